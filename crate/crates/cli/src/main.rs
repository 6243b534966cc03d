//! `mfc`: runs experiment configs and lists the built-in catalogs.
//!
//! Exit status: 0 when every hard-assert probe passes, 1 on a runtime failure
//! or a failed probe, 2 on a config error.

mod config;
mod experiments;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use config::{ConfigError, KINDS, PROBES};
use experiments::Outcome;

#[derive(Debug, Parser)]
#[command(name = "mfc", version, about = "Mean-field control numerics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
        jobs: Option<u16>,
        /// Format of the results table.
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// List experiment kinds, models, functionals and probes.
    List {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            jobs,
            format,
        } => run(&config, out.as_deref(), seed, jobs, format),
        Command::List { format } => list(format).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<ConfigError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn catalog() -> Vec<(&'static str, String)> {
    let mut entries: Vec<(&str, String)> = Vec::new();
    entries.extend(KINDS.iter().map(|k| ("experiment", k.to_string())));
    entries.extend(mfc_core::mollify::FUNCTIONALS.iter().map(|f| ("functional", f.to_string())));
    entries.extend(mfc_core::model::REGISTRY.iter().map(|m| ("model", m.to_string())));
    entries.extend(PROBES.iter().map(|p| ("probe", p.to_string())));
    entries.sort();
    entries
}

fn list(format: Format) -> Result<()> {
    let entries = catalog();
    let mut stdout = std::io::stdout().lock();
    match format {
        Format::Csv => {
            writeln!(stdout, "category,name")?;
            for (c, n) in &entries {
                writeln!(stdout, "{c},{n}")?;
            }
        }
        Format::Json => {
            let arr: Vec<_> = entries.iter().map(|(c, n)| json!({ "category": c, "name": n })).collect();
            writeln!(stdout, "{}", serde_json::to_string_pretty(&arr)?)?;
        }
    }
    Ok(())
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, dir.join(name)).with_context(|| format!("renaming into {}", dir.join(name).display()))?;
    Ok(())
}

fn run(path: &Path, out: Option<&Path>, seed: Option<u64>, jobs: Option<u16>, format: Format) -> Result<bool> {
    let loaded = config::load(path, out)?;
    if let Some(j) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j as usize)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = seed.unwrap_or(loaded.config.seed);
    let kind = loaded.config.experiment.kind();
    let outcome: Outcome = experiments::run(&loaded, seed).with_context(|| format!("{kind} experiment failed"))?;
    let pass = outcome.pass();

    fs::create_dir_all(&loaded.out).with_context(|| format!("creating {}", loaded.out.display()))?;
    let mut outputs = Vec::new();
    let (name, body) = match format {
        Format::Csv => ("results.csv", outcome.table.to_csv().into_bytes()),
        Format::Json => ("results.json", serde_json::to_vec_pretty(&outcome.table.to_json())?),
    };
    write_atomic(&loaded.out, name, &body)?;
    outputs.push(name.to_string());
    for (name, bytes) in &outcome.artifacts {
        write_atomic(&loaded.out, name, bytes)?;
        outputs.push(name.clone());
    }
    let summary = json!({
        "kind": kind,
        "model_id": loaded.model.as_ref().map(|m| m.id.clone()),
        "seed": seed,
        "pass": pass,
        "probes": outcome.probes,
        "data": outcome.data,
    });
    write_atomic(&loaded.out, "summary.json", &serde_json::to_vec_pretty(&summary)?)?;
    outputs.push("summary.json".into());

    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "config": path.display().to_string(),
        "config_sha256": format!("{:x}", Sha256::digest(&loaded.raw)),
        "seed": seed,
        "seed_overridden": seed != loaded.config.seed,
        "jobs": jobs,
        "versions": { "mfc-cli": env!("CARGO_PKG_VERSION"), "mfc-core": mfc_core::VERSION },
        "created_unix": timestamp,
        "outputs": outputs,
    });
    write_atomic(&loaded.out, "manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;

    for p in &outcome.probes {
        let tag = match (p.hard_assert, p.pass) {
            (false, _) => "note",
            (true, true) => "pass",
            (true, false) => "FAIL",
        };
        println!("{tag:4} {}: {:.6e} vs {:.6e}", p.probe, p.statistic, p.threshold);
    }
    println!("{kind}: {} ({} rows) -> {}", if pass { "pass" } else { "FAIL" }, outcome.table.rows.len(), loaded.out.display());
    Ok(pass)
}
