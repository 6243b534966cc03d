//! Experiment configuration: JSON schema, loading and semantic checks.
//!
//! Every failure here is a [`ConfigError`] carrying a JSON pointer (or a byte
//! offset for malformed JSON), and maps to exit status 2.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mfc_core::hjb::GridSpec;
use mfc_core::model::ModelDocument;
use mfc_core::{EmpiricalMeasure, ModelSpec, SimConfig, VectorTuple};
use serde::Deserialize;
use serde_path_to_error::{Path as ErrorPath, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// JSON pointer of the offending value; empty for the document root.
    pub pointer: String,
    /// Byte offset into the config text, for syntax errors.
    pub offset: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn at(pointer: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            pointer: pointer.into(),
            offset: None,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.offset {
            Some(offset) => write!(f, "malformed JSON at byte {offset}: {}", self.message),
            None if self.pointer.is_empty() => write!(f, "config error at document root: {}", self.message),
            None => write!(f, "config error at {}: {}", self.pointer, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn default_r() -> f64 {
    2.0
}

fn default_lambdas() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_tolerance() -> f64 {
    1e-3
}

fn default_core_radius() -> f64 {
    1.5
}

fn default_min_gap() -> usize {
    4
}

fn default_samples() -> usize {
    200
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Inline model document.
    #[serde(default)]
    pub model: Option<ModelDocument>,
    /// Path to a model document, relative to the config file.
    #[serde(default)]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Simulate(SimulateParams),
    SolveHjb(HjbParams),
    Verify(VerifyParams),
    Mollify(MollifyParams),
    Sweep(SweepParams),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Simulate(_) => "simulate",
            Self::SolveHjb(_) => "solve-hjb",
            Self::Verify(_) => "verify",
            Self::Mollify(_) => "mollify",
            Self::Sweep(_) => "sweep",
        }
    }

    fn needs_model(&self) -> bool {
        !matches!(self, Self::Mollify(_))
    }
}

/// Names of the experiment kinds, sorted.
pub const KINDS: [&str; 5] = ["mollify", "simulate", "solve-hjb", "sweep", "verify"];

/// Names of every probe a config can request, sorted.
pub const PROBES: [&str; 11] = [
    "assumptions",
    "convexity",
    "cost_identity",
    "duplication",
    "feedback_roundtrip",
    "lipschitz",
    "permutation",
    "riccati",
    "semiconcavity",
    "time_holder",
    "uniform_convergence",
];

/// Time window and ensemble size; the seed comes from the experiment.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    #[serde(default)]
    pub t0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    pub n_paths: usize,
}

impl SimBlock {
    pub fn config(&self, seed: u64) -> mfc_core::Result<SimConfig> {
        SimConfig::new(self.t0, self.horizon, self.steps, self.n_paths, seed)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Zero {
        id: String,
    },
    /// Open-loop constant control, cycled over the `n·d` coordinates.
    Constant {
        id: String,
        value: Vec<f64>,
    },
    /// Feedback synthesized from a grid solve with `n` equal to the tuple length.
    Feedback {
        id: String,
        grid: GridSpec,
    },
}

impl PolicySpec {
    pub fn id(&self) -> &str {
        match self {
            Self::Zero { id } | Self::Constant { id, .. } | Self::Feedback { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub sim: SimBlock,
    pub x0: VectorTuple,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub probes: Vec<SimProbe>,
    /// Also write every trajectory to `paths.csv`.
    #[serde(default)]
    pub dump_paths: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SimProbe {
    /// Finite and lifted cost of the named policy agree.
    CostIdentity { policy: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbParams {
    pub n: usize,
    pub grid: GridSpec,
    /// Tuples at which `u` is tabulated.
    #[serde(default)]
    pub points: Vec<VectorTuple>,
    /// Times at which `u` is tabulated; defaults to the initial time.
    #[serde(default)]
    pub times: Vec<f64>,
    /// Write every `dump_every`-th stored slice to `value.csv` plus `grid.json`.
    #[serde(default)]
    pub dump_every: Option<usize>,
    #[serde(default)]
    pub probes: Vec<HjbProbe>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HjbProbe {
    /// Grid against the decoupled LQ closed form on `|x|_∞ ≤ core_radius`.
    Riccati {
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        #[serde(default = "default_core_radius")]
        core_radius: f64,
    },
    Permutation,
    TimeHolder {
        #[serde(default = "default_r")]
        r: f64,
        #[serde(default = "default_min_gap")]
        min_gap_steps: usize,
    },
    /// Hard check against `expected` when given, otherwise report only.
    Semiconcavity {
        #[serde(default)]
        t: Option<f64>,
        pairs: Vec<(VectorTuple, VectorTuple)>,
        #[serde(default = "default_lambdas")]
        lambdas: Vec<f64>,
        #[serde(default)]
        expected: Option<f64>,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
    },
    FeedbackRoundtrip {
        sim: SimBlock,
        x0: VectorTuple,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyParams {
    #[serde(default)]
    pub probes: Vec<VerifyProbe>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifyProbe {
    CostIdentity {
        sim: SimBlock,
        x0: VectorTuple,
        policy: PolicySpec,
    },
    Duplication {
        base_n: usize,
        m: usize,
        base_grid: GridSpec,
        dup_grid: GridSpec,
        points: Vec<VectorTuple>,
        times: Vec<f64>,
        #[serde(default = "default_tolerance")]
        threshold: f64,
    },
    /// Sampled Lipschitz constants of the coefficients; report only.
    Assumptions {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_one")]
        radius: f64,
        #[serde(default = "default_r")]
        r: f64,
    },
}

/// A registry functional by name, or a custom expression.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalSpec {
    #[serde(default)]
    pub registry: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    pub dim: usize,
    #[serde(default)]
    pub expr: Option<String>,
    #[serde(default)]
    pub lipschitz: Option<f64>,
    #[serde(default)]
    pub convex_lift: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    pub x: Vec<f64>,
    pub mu: EmpiricalMeasure,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub lambda: f64,
    pub x: Vec<f64>,
    #[serde(rename = "X")]
    pub big_x: VectorTuple,
    pub y: Vec<f64>,
    #[serde(rename = "Y")]
    pub big_y: VectorTuple,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifyParams {
    pub functional: FunctionalSpec,
    #[serde(default)]
    pub probes: Vec<MollifyProbe>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MollifyProbe {
    Lipschitz {
        k: usize,
        reps: usize,
        pairs: Vec<(PointSpec, PointSpec)>,
        #[serde(default = "default_one")]
        r: f64,
    },
    UniformConvergence {
        ks: Vec<usize>,
        reps: usize,
        points: Vec<PointSpec>,
    },
    Convexity {
        k: usize,
        reps: usize,
        segments: Vec<SegmentSpec>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepParams {
    #[serde(default)]
    pub t: f64,
    pub family: Vec<VectorTuple>,
    #[serde(default)]
    pub target: Option<EmpiricalMeasure>,
    #[serde(default = "default_r")]
    pub r: f64,
    pub estimator: EstimatorSpec,
    /// Hard check that the last gap is at most this value.
    #[serde(default)]
    pub gap_threshold: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    /// One grid per tuple; `points[a - 1]` nodes per axis for `a` axes.
    Grid {
        lower: f64,
        upper: f64,
        points: Vec<usize>,
        #[serde(rename = "T")]
        horizon: f64,
    },
    /// Decoupled LQ value from the Riccati oracle.
    Oracle {
        sigma: f64,
        kappa: f64,
        #[serde(rename = "T")]
        horizon: f64,
    },
    /// Cost of a constant control on every coordinate.
    MonteCarlo {
        sim: SimBlock,
        #[serde(default)]
        control: f64,
    },
}

/// A parsed config with its model and output directory resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub model: Option<ModelSpec>,
    pub out: PathBuf,
    /// Raw bytes of the config file, for the manifest hash.
    pub raw: Vec<u8>,
}

fn pointer(path: &ErrorPath) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Parses JSON into `T`, reporting syntax errors by byte offset and schema
/// errors by JSON pointer.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    if let Err(e) = serde_json::from_str::<serde::de::IgnoredAny>(text) {
        return Err(ConfigError {
            pointer: String::new(),
            offset: Some(byte_offset(text, e.line(), e.column())),
            message: e.to_string(),
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let ptr = pointer(e.path());
        let inner = e.into_inner();
        // Drop serde_json's own position suffix; the pointer locates the value.
        let msg = inner.to_string();
        let msg = msg.split(" at line ").next().unwrap_or(&msg).to_string();
        ConfigError::at(ptr, msg)
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads, parses and checks a config; `out` overrides the configured output directory.
pub fn load(path: &Path, out: Option<&Path>) -> Result<Loaded, ConfigError> {
    let raw = fs::read(path).map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", path.display())))?;
    let text = std::str::from_utf8(&raw).map_err(|e| ConfigError {
        pointer: String::new(),
        offset: Some(e.valid_up_to()),
        message: "config is not UTF-8".into(),
    })?;
    let config: ExperimentConfig = parse_json(text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let doc = match (&config.model, &config.model_file) {
        (Some(_), Some(_)) => return Err(ConfigError::at("/model_file", "give either `model` or `model_file`, not both")),
        (Some(doc), None) => Some(doc.clone()),
        (None, Some(file)) => {
            let file = resolve(&base, file);
            let text = fs::read_to_string(&file)
                .map_err(|e| ConfigError::at("/model_file", format!("cannot read {}: {e}", file.display())))?;
            let doc: ModelDocument = parse_json(&text).map_err(|e| ConfigError {
                pointer: format!("/model_file{}", e.pointer),
                ..e
            })?;
            Some(doc)
        }
        (None, None) => None,
    };
    let model = match doc {
        Some(doc) => Some(ModelSpec::from_document(&doc).map_err(|e| ConfigError::at("/model", e))?),
        None if config.experiment.needs_model() => {
            return Err(ConfigError::at(
                "/model",
                format!("experiment `{}` needs a model", config.experiment.kind()),
            ))
        }
        None => None,
    };
    let out = match (out, &config.out) {
        (Some(dir), _) => dir.to_path_buf(),
        (None, Some(dir)) => resolve(&base, dir),
        (None, None) => PathBuf::from("mfc-out"),
    };
    let loaded = Loaded { config, model, out, raw };
    check(&loaded)?;
    Ok(loaded)
}

fn check_grid(ptr: &str, grid: &GridSpec) -> Result<(), ConfigError> {
    grid.validate().map_err(|e| ConfigError::at(ptr, e))
}

fn check_sim(ptr: &str, sim: &SimBlock) -> Result<(), ConfigError> {
    sim.config(0).map(drop).map_err(|e| ConfigError::at(ptr, e))
}

fn check_tuple(ptr: &str, x: &VectorTuple, dim: usize) -> Result<(), ConfigError> {
    if x.dim() != dim {
        return Err(ConfigError::at(ptr, format!("points must have dimension {dim}, got {}", x.dim())));
    }
    Ok(())
}

fn check_policy(ptr: &str, policy: &PolicySpec) -> Result<(), ConfigError> {
    match policy {
        PolicySpec::Constant { value, .. } if value.is_empty() => Err(ConfigError::at(format!("{ptr}/value"), "empty control")),
        PolicySpec::Feedback { grid, .. } => check_grid(&format!("{ptr}/grid"), grid),
        _ => Ok(()),
    }
}

/// Shape and domain checks that need no numerics.
fn check(loaded: &Loaded) -> Result<(), ConfigError> {
    let dim = loaded.model.as_ref().map_or(0, |m| m.dim);
    let root = format!("/experiment/{}", loaded.config.experiment.kind());
    match &loaded.config.experiment {
        Experiment::Simulate(p) => {
            check_sim(&format!("{root}/sim"), &p.sim)?;
            check_tuple(&format!("{root}/x0"), &p.x0, dim)?;
            if p.policies.is_empty() {
                return Err(ConfigError::at(format!("{root}/policies"), "at least one policy is required"));
            }
            for (i, pol) in p.policies.iter().enumerate() {
                check_policy(&format!("{root}/policies/{i}"), pol)?;
                if p.policies[..i].iter().any(|q| q.id() == pol.id()) {
                    return Err(ConfigError::at(format!("{root}/policies/{i}/id"), format!("duplicate policy id `{}`", pol.id())));
                }
            }
            for (i, probe) in p.probes.iter().enumerate() {
                let SimProbe::CostIdentity { policy } = probe;
                if !p.policies.iter().any(|q| q.id() == policy) {
                    return Err(ConfigError::at(format!("{root}/probes/{i}/policy"), format!("unknown policy `{policy}`")));
                }
            }
        }
        Experiment::SolveHjb(p) => {
            check_grid(&format!("{root}/grid"), &p.grid)?;
            if p.n == 0 || p.n * dim != p.grid.axes.len() {
                return Err(ConfigError::at(
                    format!("{root}/n"),
                    format!("n·d = {}·{dim} must equal the {} grid axes", p.n, p.grid.axes.len()),
                ));
            }
            for (i, x) in p.points.iter().enumerate() {
                check_tuple(&format!("{root}/points/{i}"), x, dim)?;
                if x.len() != p.n {
                    return Err(ConfigError::at(format!("{root}/points/{i}"), format!("expected {} particles", p.n)));
                }
            }
            if p.dump_every == Some(0) {
                return Err(ConfigError::at(format!("{root}/dump_every"), "must be positive"));
            }
            for (i, probe) in p.probes.iter().enumerate() {
                let ptr = format!("{root}/probes/{i}");
                match probe {
                    HjbProbe::Riccati { .. } => {
                        if lq_sigma(loaded.model.as_ref()).is_none() {
                            return Err(ConfigError::at(ptr, "riccati probe needs a decoupled LQ model (b = 0, l1 = 0, UT = m2/2, constant σ, d = 1)"));
                        }
                    }
                    HjbProbe::Permutation if p.n < 2 => {
                        return Err(ConfigError::at(ptr, "permutation probe needs n ≥ 2"));
                    }
                    HjbProbe::FeedbackRoundtrip { sim, x0 } => {
                        check_sim(&format!("{ptr}/sim"), sim)?;
                        check_tuple(&format!("{ptr}/x0"), x0, dim)?;
                    }
                    _ => {}
                }
            }
        }
        Experiment::Verify(p) => {
            for (i, probe) in p.probes.iter().enumerate() {
                let ptr = format!("{root}/probes/{i}");
                match probe {
                    VerifyProbe::CostIdentity { sim, x0, policy } => {
                        check_sim(&format!("{ptr}/sim"), sim)?;
                        check_tuple(&format!("{ptr}/x0"), x0, dim)?;
                        check_policy(&format!("{ptr}/policy"), policy)?;
                    }
                    VerifyProbe::Duplication { base_grid, dup_grid, .. } => {
                        check_grid(&format!("{ptr}/base_grid"), base_grid)?;
                        check_grid(&format!("{ptr}/dup_grid"), dup_grid)?;
                    }
                    VerifyProbe::Assumptions { .. } => {}
                }
            }
        }
        Experiment::Mollify(p) => {
            let f = &p.functional;
            if f.registry.is_some() == f.expr.is_some() {
                return Err(ConfigError::at(format!("{root}/functional"), "give exactly one of `registry` and `expr`"));
            }
        }
        Experiment::Sweep(p) => {
            if p.family.is_empty() {
                return Err(ConfigError::at(format!("{root}/family"), "empty family"));
            }
            for (i, x) in p.family.iter().enumerate() {
                check_tuple(&format!("{root}/family/{i}"), x, dim)?;
            }
            if let EstimatorSpec::MonteCarlo { sim, .. } = &p.estimator {
                check_sim(&format!("{root}/estimator/sim"), sim)?;
            }
        }
    }
    Ok(())
}

/// `σ` when `model` is the decoupled LQ problem with constant scalar noise.
pub fn lq_sigma(model: Option<&ModelSpec>) -> Option<f64> {
    let m = model?;
    let zero = |e: &mfc_core::CoefficientExpr| e.is_constant() && e.root().eval(&[], &empty_features()).ok() == Some(0.0);
    let terminal_ok = ["m2/2", "0.5*m2", "m2*0.5"]
        .iter()
        .any(|s| mfc_core::CoefficientExpr::parse(s).is_ok_and(|e| e == m.terminal));
    if m.dim != 1 || m.noise_dim != 1 || !zero(&m.drift[0]) || !zero(&m.running_cost) || !terminal_ok {
        return None;
    }
    let s = &m.diffusion[0];
    if !s.is_constant() {
        return None;
    }
    s.root().eval(&[], &empty_features()).ok()
}

fn empty_features() -> mfc_core::MeasureFeatures {
    mfc_core::MeasureFeatures { m1: vec![], m2: 0.0 }
}
