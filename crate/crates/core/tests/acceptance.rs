//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use mfc_core::hjb::{lq_closed_form, riccati_lq_value, solve_hjb, GridSpec};
use mfc_core::measure::{brute_force_wasserstein, wasserstein_r, EmpiricalMeasure, VectorTuple};
use mfc_core::model::{ModelSpec, REGISTRY};
use mfc_core::mollify::{
    convexity_preservation_probe, lipschitz_preservation_probe, uniform_convergence_probe, BaseFunctional, Point, Segment,
    SmoothedFunctional,
};
use mfc_core::sim::{paired_sup_difference, simulate_particles, ControlPolicy, SimConfig};
use mfc_core::stats::Estimate;
use mfc_core::verify::{
    cost_identity_check, duplication_consistency, feedback_roundtrip, permutation_residual, semiconcavity_probe,
    time_holder_probe, Provenance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    summary: String,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            summary: String::new(),
        }
    }

    /// Records one check; every check contributes to the printed line.
    fn check(&mut self, ok: bool, what: String) {
        self.pass &= ok;
        if !self.summary.is_empty() {
            self.summary.push_str("; ");
        }
        self.summary.push_str(&what);
        if !ok {
            self.summary.push_str(" [failed]");
        }
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn lq() -> ModelSpec {
    ModelSpec::registry("LQ-decoupled").unwrap()
}

const EXACT_U01: f64 = 0.596574;

fn criterion_1() -> Outcome {
    let mut out = Outcome::new();
    let grid = GridSpec::uniform(1, -3.0, 3.0, 241, 1.0).unwrap();
    let u = single_thread(|| solve_hjb(&lq(), 1, &grid).unwrap());
    let mut err: f64 = 0.0;
    for k in u.core_nodes() {
        let x = u.node_coords(k)[0];
        assert!(x.abs() <= 1.5 + 1e-12);
        let exact = x * x / 4.0 + 0.5 * 2f64.ln();
        err = err.max((u.initial()[k] - exact).abs());
    }
    out.check(err <= 1e-3, format!("grid max err {err:.2e} <= 1e-3 ({} steps)", u.steps));

    let mut oracle: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let t = rng.random_range(0.0..1.0);
        let x = VectorTuple::scalar(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).unwrap();
        let diff = riccati_lq_value(1.0, 1.0, 1.0, t, &x).unwrap() - lq_closed_form(1.0, 1.0, 1.0, t, &x);
        oracle = oracle.max(diff.abs());
    }
    out.check(oracle <= 1e-8, format!("riccati vs closed form {oracle:.1e} <= 1e-8"));
    let x1 = VectorTuple::scalar(&[1.0]).unwrap();
    let v = riccati_lq_value(1.0, 1.0, 1.0, 0.0, &x1).unwrap();
    out.check((v - EXACT_U01).abs() < 1e-6, format!("u(0,1) = {v:.6}"));
    out
}

fn criterion_2() -> Outcome {
    let mut out = Outcome::new();
    let base = GridSpec::uniform(1, -3.0, 3.0, 241, 1.0).unwrap();
    let dup = GridSpec::uniform(2, -3.0, 3.0, 121, 1.0).unwrap().with_store_every(usize::MAX);
    let points: Vec<VectorTuple> = [-1.0, 0.0, 1.0].iter().map(|&a| VectorTuple::scalar(&[a]).unwrap()).collect();
    for name in ["LQ-decoupled", "LQ-mean-reverting"] {
        let model = ModelSpec::registry(name).unwrap();
        let rep = duplication_consistency(&model, 1, 2, &base, &dup, &points, &[0.0], 2e-2).unwrap();
        let terminal = rep.details["terminal"];
        out.check(rep.pass, format!("{name} |u2 - u1| {:.1e} <= 2e-2", rep.statistic));
        out.check(terminal == 0.0, format!("{name} at T {terminal:e} == 0"));
    }
    out
}

fn random_policy(rng: &mut ChaCha8Rng, steps: usize, width: usize) -> ControlPolicy {
    ControlPolicy::open_loop(
        (0..steps)
            .map(|_| (0..width).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    )
}

fn criterion_3() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut bitwise = 0;
    for trial in 0..100 {
        let model = ModelSpec::registry(REGISTRY[trial % REGISTRY.len()]).unwrap();
        let n = rng.random_range(1..=4);
        let x0 = VectorTuple::scalar(&(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 20, 16, rng.random()).unwrap();
        let policy = random_policy(&mut rng, cfg.steps, n);
        let rep = cost_identity_check(&model, &cfg, &x0, &policy).unwrap();
        worst = worst.max(rep.statistic);
        if rep.details["finite"].to_bits() == rep.details["lifted"].to_bits() {
            bitwise += 1;
        }
    }
    out.check(worst <= 1e-12, format!("max relative |J_n - J| {worst:e} <= 1e-12"));
    out.check(bitwise == 100, format!("{bitwise}/100 bit-identical"));
    out
}

fn criterion_4() -> Outcome {
    let mut out = Outcome::new();
    let model = lq();
    let fine = GridSpec::uniform(1, -3.0, 3.0, 241, 1.0).unwrap();
    let coarse = GridSpec::uniform(1, -3.0, 3.0, 121, 1.0).unwrap();
    let u = Arc::new(solve_hjb(&model, 1, &fine).unwrap());
    let uc = solve_hjb(&model, 1, &coarse).unwrap();
    let eps_grid = (u.value_at(0.0, &[1.0]) - uc.value_at(0.0, &[1.0])).abs();

    let cfg = SimConfig::new(0.0, 1.0, 200, 10_000, 44).unwrap();
    let x0 = VectorTuple::scalar(&[1.0]).unwrap();
    let rt = feedback_roundtrip(&model, &cfg, &x0, u).unwrap();
    // Paired with zero control, whose cost E[(1 + W_T)²/2] = 1 is known exactly.
    let cmp = rt.comparison.as_ref().unwrap();
    let fb = Estimate::control_variate(cmp.totals("feedback").unwrap(), cmp.totals("zero").unwrap(), 1.0);
    let dev = (fb.mean - EXACT_U01).abs();
    let tol = eps_grid + 3.0 * fb.std_error;
    out.check(
        dev <= tol,
        format!(
            "feedback cost {:.5} (paired SE {:.1e}, raw {:.5}), |dev| {dev:.1e} <= eps_grid {eps_grid:.1e} + 3 SE",
            fb.mean, fb.std_error, rt.feedback_cost.mean
        ),
    );
    let z = rt.zero_gap.mean / rt.zero_gap.std_error;
    out.check(
        z >= 5.0,
        format!("zero control {:.4} worse by {:.4} = {z:.1} paired SE >= 5", rt.zero_cost.mean, rt.zero_gap.mean),
    );
    out.check(rt.state_identity.pass, format!("lift/project state diff {:e}", rt.state_identity.statistic));
    out.check(
        rt.perturbation.pass,
        format!("best perturbed policy z {:.2} <= 2", rt.perturbation.statistic),
    );
    out
}

fn random_measure(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmpiricalMeasure {
    EmpiricalMeasure::new(d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn criterion_5() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let n = rng.random_range(1..=7);
        let d = rng.random_range(1..=3);
        let r = [1.0, 1.5, 2.0][i % 3];
        let (mu, nu) = (random_measure(&mut rng, n, d), random_measure(&mut rng, n, d));
        let fast = wasserstein_r(&mu, &nu, r).unwrap();
        let brute = brute_force_wasserstein(&mu, &nu, r).unwrap();
        worst = worst.max((fast - brute).abs());
    }
    out.check(worst <= 1e-12, format!("assignment vs brute force {worst:.1e} <= 1e-12"));
    let mut moment: f64 = 0.0;
    for i in 0..100 {
        let n = rng.random_range(1..=7);
        let d = rng.random_range(1..=3);
        let r = [1.0, 1.5, 2.0][i % 3];
        let mu = random_measure(&mut rng, n, d);
        let dist = wasserstein_r(&mu, &EmpiricalMeasure::dirac(&vec![0.0; d], n).unwrap(), r).unwrap();
        moment = moment.max((dist - mu.moment_r(r).unwrap().powf(1.0 / r)).abs());
    }
    out.check(moment <= 1e-12, format!("d_r(mu, delta_0) vs moment {moment:.1e} <= 1e-12"));
    out
}

fn scalar_point(x: f64, atoms: &[f64]) -> Point {
    (vec![x], EmpiricalMeasure::scalar(atoms).unwrap())
}

/// Fixed bounded family: `x ∈ {-2, -2/3, 2/3, 2}`, `μ = (δ_a + δ_{-a})/2`, five `a` in `[1/4, 2]`.
fn test_family() -> Vec<Point> {
    let mut v = Vec::new();
    for i in 0..4 {
        for j in 0..5 {
            let x = -2.0 + 4.0 * i as f64 / 3.0;
            let a = 0.25 + 1.75 * j as f64 / 4.0;
            v.push(scalar_point(x, &[a, -a]));
        }
    }
    v
}

fn criterion_6() -> Outcome {
    let mut out = Outcome::new();
    let ks = [4, 16, 64];
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    // (i) Lipschitz quotients under the coupled estimator.
    let pairs: Vec<(Point, Point)> = (0..10)
        .map(|_| {
            let atoms: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let moved: Vec<f64> = atoms.iter().map(|a| a + rng.random_range(-0.5..0.5)).collect();
            let x = rng.random_range(-2.0..2.0);
            (scalar_point(x, &atoms), scalar_point(x + rng.random_range(-0.5..0.5), &moved))
        })
        .collect();
    for name in ["position", "mean", "abs-offset"] {
        let base = BaseFunctional::registry(name, 1).unwrap();
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for &k in &ks {
            let sf = SmoothedFunctional::new(base.clone(), k, 2000, 60 + k as u64).unwrap();
            let rep = lipschitz_preservation_probe(&sf, &pairs, 1.0).unwrap();
            ok &= rep.pass && rep.details["max_offset_norm"] < 1.0 / k as f64;
            worst = worst.max(rep.statistic);
        }
        out.check(ok, format!("(i) {name} quotient - slack {worst:.3} <= 1"));
    }

    // (ii) Uniform convergence on the fixed family.
    let family = test_family();
    for name in ["abs-offset", "second-moment"] {
        let base = BaseFunctional::registry(name, 1).unwrap();
        let uc = uniform_convergence_probe(&base, &ks, &family, 20_000, 61).unwrap();
        let sups: Vec<String> = uc.rows.iter().map(|r| format!("{:.2e}", r.sup)).collect();
        out.check(
            uc.monotone.pass && uc.strict.pass,
            format!("(ii) {name} sups [{}] non-increasing, drop {:.1e} > 3 SE", sups.join(", "), uc.strict.statistic),
        );
    }

    // (iv) Coupled convexity statistic.
    let segments: Vec<Segment> = (0..12)
        .map(|i| {
            let draw = |rng: &mut ChaCha8Rng| VectorTuple::scalar(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()).unwrap();
            Segment {
                lambda: [0.25, 0.5, 0.75][i % 3],
                x: vec![rng.random_range(-2.0..2.0)],
                big_x: draw(&mut rng),
                y: vec![rng.random_range(-2.0..2.0)],
                big_y: draw(&mut rng),
            }
        })
        .collect();
    for name in ["abs-offset", "second-moment", "mean"] {
        let base = BaseFunctional::registry(name, 1).unwrap();
        let mut min_stat = f64::INFINITY;
        let mut max_abs: f64 = 0.0;
        let mut ok = true;
        for &k in &ks {
            let sf = SmoothedFunctional::new(base.clone(), k, 2000, 62 + k as u64).unwrap();
            let rep = convexity_preservation_probe(&sf, &segments).unwrap();
            ok &= rep.pass;
            min_stat = min_stat.min(rep.statistic);
            max_abs = max_abs.max(rep.details["max_abs_replicate_delta"]);
        }
        if name == "mean" {
            out.check(ok && max_abs <= 1e-12, format!("(iv) linear lift |Delta| {max_abs:.1e} == 0"));
        } else {
            out.check(ok, format!("(iv) {name} min(Delta + 3 SE) {min_stat:.2e} >= 0"));
        }
    }
    out
}

fn criterion_7() -> Outcome {
    let mut out = Outcome::new();
    let model = lq();
    // Wider than the criterion 1 grid, same spacing: the core is |x| ≤ 2.
    let grid = GridSpec::uniform(1, -4.0, 4.0, 321, 1.0).unwrap();
    let u = solve_hjb(&model, 1, &grid).unwrap();

    // Node-aligned pairs in the core region; every convex combination is a node.
    let xs: Vec<f64> = (-20..=20).step_by(5).map(|i| i as f64 / 10.0).collect();
    let mut pairs = Vec::new();
    for &a in &xs {
        for &b in &xs {
            if a < b {
                pairs.push((VectorTuple::scalar(&[a]).unwrap(), VectorTuple::scalar(&[b]).unwrap()));
            }
        }
    }
    let est = semiconcavity_probe(&u, 0.0, &pairs, &[0.25, 0.5, 0.75]).unwrap();
    let rep = est.report(0.25, 1e-3, Provenance::model(&model).with_grid(&grid));
    out.check(
        rep.pass,
        format!("semiconcavity sup {:.5} inf {:.5} = 0.25 +- 1e-3", est.sup, est.inf),
    );

    let sym = GridSpec::uniform(2, -3.0, 3.0, 61, 1.0).unwrap().with_store_every(50);
    let mut worst: f64 = 0.0;
    for name in ["LQ-decoupled", "LQ-mean-reverting", "tanh-interaction"] {
        let u2 = solve_hjb(&ModelSpec::registry(name).unwrap(), 2, &sym).unwrap();
        worst = worst.max(permutation_residual(&u2).unwrap().statistic);
    }
    out.check(worst <= 1e-9, format!("permutation residual {worst:.1e} <= 1e-9"));

    let (rows, holder) = time_holder_probe(&u, 2.0, 4).unwrap();
    let ratios: Vec<String> = rows.iter().map(|r| format!("{:.3}", r.ratio)).collect();
    out.check(
        holder.pass,
        format!("time-Holder ratios (gaps {}..{} steps) [{}] non-increasing", rows[0].gap_steps, rows.last().unwrap().gap_steps, ratios.join(", ")),
    );
    out
}

fn criterion_8() -> Outcome {
    let mut out = Outcome::new();
    let cfg = SimConfig::new(0.0, 1.0, 100, 10_000, 8).unwrap();

    // b ≡ 0 and a ≡ 0: the particles are martingales.
    let model = ModelSpec::new("martingale", 1, 1, &["0"], &[&["1 + 0.5*tanh(x[0])"]], "0", 1.0, "0").unwrap();
    let x0 = VectorTuple::scalar(&[0.5, -1.0, 2.0]).unwrap();
    let bundle = simulate_particles(&model, &cfg, &x0, &ControlPolicy::Zero).unwrap();
    let mut worst_z: f64 = 0.0;
    for i in 0..3 {
        let finals: Vec<f64> = (0..cfg.n_paths).map(|p| bundle.state(p, cfg.steps)[i]).collect();
        let est = Estimate::from_samples(&finals);
        worst_z = worst_z.max((est.mean - x0.as_slice()[i]).abs() / est.std_error);
    }
    out.check(worst_z <= 4.0, format!("martingale mean within {worst_z:.2} SE <= 4"));

    // Expanding drift with state-dependent noise, so the sup is not attained at t = 0.
    let model = ModelSpec::new(
        "expanding",
        1,
        1,
        &["0.5*x[0] + tanh(m1[0])"],
        &[&["0.5 + 0.25*sin(x[0])"]],
        "0",
        1.0,
        "0",
    )
    .unwrap();
    let base = VectorTuple::scalar(&[0.5, -1.0, 2.0]).unwrap();
    let dir = [1.0, -0.5, 0.25];
    let b0 = simulate_particles(&model, &cfg, &base, &ControlPolicy::Zero).unwrap();
    let mut ratios = Vec::new();
    for delta in [0.1, 0.01] {
        let moved = VectorTuple::scalar(&base.as_slice().iter().zip(dir).map(|(x, v)| x + delta * v).collect::<Vec<_>>()).unwrap();
        let b1 = simulate_particles(&model, &cfg, &moved, &ControlPolicy::Zero).unwrap();
        let sup = paired_sup_difference(&b1, &b0, 2.0).unwrap();
        ratios.push(sup.mean / moved.rdistance(&base, 2.0).unwrap());
    }
    let spread = ratios[0].max(ratios[1]) / ratios[0].min(ratios[1]);
    out.check(
        spread <= 1.5,
        format!("stability ratios {:.4}, {:.4} within factor {spread:.3} <= 1.5", ratios[0], ratios[1]),
    );
    out
}

/// Name, wall-clock budget and body of one criterion.
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("LQ value oracle", Duration::from_secs(60), criterion_1),
        ("projection/duplication consistency", Duration::from_secs(600), criterion_2),
        ("finite/lifted cost identity", Duration::from_secs(120), criterion_3),
        ("feedback optimality", Duration::from_secs(120), criterion_4),
        ("Wasserstein oracle", Duration::from_secs(30), criterion_5),
        ("mollifier suite", Duration::from_secs(300), criterion_6),
        ("regularity probes", Duration::from_secs(300), criterion_7),
        ("simulator statistics", Duration::from_secs(120), criterion_8),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str()) || name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let elapsed = start.elapsed();
        let (pass, summary) = match result {
            Ok(o) => (o.pass && elapsed <= *budget, o.summary),
            Err(e) => (
                false,
                format!(
                    "panicked: {}",
                    e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()).unwrap_or("?")
                ),
            ),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{label} {}: {name}: {summary} ({:.1}s of {}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
