//! Euler–Maruyama integration of the n-particle system driven by one common
//! Wiener process,
//!
//! ```text
//! X_i^{k+1} = X_i^k + (-a_i^k + b(X_i^k, μ^k)) dt + σ(X_i^k, μ^k) ΔW^k,
//! ```
//!
//! and of the same system written on the atom representation of its lift.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{EvalError, MeasureFeatures};
use crate::measure::VectorTuple;
use crate::model::ModelSpec;
use crate::rng::NoiseStream;
use crate::stats::Estimate;

/// Paths whose state leaves this box are aborted.
pub const BLOW_UP: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub t0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(t0: f64, horizon: f64, steps: usize, n_paths: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            t0,
            horizon,
            steps,
            n_paths,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > self.t0) || !self.t0.is_finite() || !self.horizon.is_finite() {
            return Err(Error::Domain(format!("need T > t0, got t0 = {}, T = {}", self.t0, self.horizon)));
        }
        if self.steps == 0 || self.n_paths == 0 {
            return Err(Error::Domain("steps and n_paths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.t0 + step as f64 * self.dt()
    }
}

/// State-feedback law `(step, s, x) ↦ a` on the whole particle tuple.
pub trait Feedback: Send + Sync + fmt::Debug {
    /// Writes the `n * d` control into `out`.
    fn control(&self, step: usize, time: f64, state: &[f64], dim: usize, out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub enum ControlPolicy {
    Zero,
    /// One flat `n * d` control tuple per time step.
    OpenLoop(Arc<Vec<Vec<f64>>>),
    MarkovFeedback(Arc<dyn Feedback>),
}

impl ControlPolicy {
    pub fn open_loop(schedule: Vec<Vec<f64>>) -> Self {
        Self::OpenLoop(Arc::new(schedule))
    }

    pub fn feedback(f: impl Feedback + 'static) -> Self {
        Self::MarkovFeedback(Arc::new(f))
    }

    /// This policy plus a constant per-coordinate offset (length `n * d`).
    pub fn offset(&self, offset: Vec<f64>) -> Self {
        Self::feedback(Offset {
            base: self.clone(),
            offset,
        })
    }

    pub fn evaluate(&self, step: usize, time: f64, state: &[f64], dim: usize, out: &mut [f64]) {
        match self {
            Self::Zero => out.fill(0.0),
            Self::OpenLoop(schedule) => out.copy_from_slice(&schedule[step]),
            Self::MarkovFeedback(f) => f.control(step, time, state, dim, out),
        }
    }

    fn check(&self, steps: usize, width: usize) -> Result<()> {
        if let Self::OpenLoop(schedule) = self {
            if schedule.len() < steps || schedule.iter().any(|a| a.len() != width) {
                return Err(Error::Shape(format!(
                    "open-loop schedule must provide {steps} controls of length {width}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Offset {
    base: ControlPolicy,
    offset: Vec<f64>,
}

impl Feedback for Offset {
    fn control(&self, step: usize, time: f64, state: &[f64], dim: usize, out: &mut [f64]) {
        self.base.evaluate(step, time, state, dim, out);
        for (a, o) in out.iter_mut().zip(self.offset.iter().cycle()) {
            *a += o;
        }
    }
}

/// A control on the lifted space that is constant on each cell `A_i^n`,
/// i.e. one `d`-vector per atom. Built from a finite-dimensional policy by
/// `a^n = Σ a_i 1_{A_i^n}`.
#[derive(Debug, Clone)]
pub struct LiftedPolicy(ControlPolicy);

impl LiftedPolicy {
    pub fn lift(policy: ControlPolicy) -> Self {
        Self(policy)
    }

    /// The finite-dimensional policy whose lift this is.
    pub fn project(&self) -> &ControlPolicy {
        &self.0
    }

    fn evaluate_atoms(&self, step: usize, time: f64, atoms: &[f64], dim: usize, out: &mut [f64]) {
        self.0.evaluate(step, time, atoms, dim, out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFailure {
    pub path: usize,
    pub step: usize,
    pub reason: String,
}

/// Monte Carlo ensemble of trajectories. Arrays are flat, path-major.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub config: SimConfig,
    pub particles: usize,
    pub dim: usize,
    pub noise_dim: usize,
    /// `[n_paths][steps + 1][n][d]`
    pub states: Vec<f64>,
    /// `[n_paths][steps][d']`, `ΔW ~ N(0, dt I)`, shared by every particle.
    pub increments: Vec<f64>,
    /// `[n_paths][steps][n][d]`
    pub controls: Vec<f64>,
    pub failures: Vec<PathFailure>,
}

impl PathBundle {
    fn width(&self) -> usize {
        self.particles * self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.config.n_paths
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let w = self.width();
        let off = (path * (self.steps() + 1) + step) * w;
        &self.states[off..off + w]
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.steps() + step) * self.noise_dim;
        &self.increments[off..off + self.noise_dim]
    }

    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let w = self.width();
        let off = (path * self.steps() + step) * w;
        &self.controls[off..off + w]
    }

    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn ensure_valid(&self) -> Result<()> {
        match self.failures.first() {
            None => Ok(()),
            Some(f) => Err(Error::DeadPaths {
                dead: self.failures.len(),
                total: self.n_paths(),
                first: format!("path {} step {}: {}", f.path, f.step, f.reason),
            }),
        }
    }

    /// Trajectory dump with columns `path,step,particle,coord,value`.
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "path,step,particle,coord,value")?;
        for p in 0..self.n_paths() {
            for k in 0..=self.steps() {
                for (j, v) in self.state(p, k).iter().enumerate() {
                    writeln!(out, "{p},{k},{},{},{v:?}", j / self.dim, j % self.dim)?;
                }
            }
        }
        Ok(())
    }
}

/// `ΔW ~ N(0, dt I)` for every `(path, step)` of `cfg`, laid out
/// `[n_paths][steps][noise_dim]`.
pub fn wiener_increments(cfg: &SimConfig, noise_dim: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let sqrt_dt = cfg.dt().sqrt();
    let mut out = vec![0.0; cfg.n_paths * cfg.steps * noise_dim];
    out.par_chunks_mut(cfg.steps * noise_dim)
        .enumerate()
        .for_each(|(p, chunk)| {
            let mut stream = NoiseStream::new(cfg.seed, p as u64, noise_dim);
            for (k, dw) in chunk.chunks_mut(noise_dim).enumerate() {
                stream.fill_step(k, dw);
                dw.iter_mut().for_each(|v| *v *= sqrt_dt);
            }
        });
    Ok(out)
}

/// One explicit step for every particle with the shared increment `dw`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn em_update(x: &[f64], a: &[f64], b: &[f64], sigma: &[f64], dw: &[f64], dt: f64, dim: usize, next: &mut [f64]) {
    let dp = dw.len();
    for (j, out) in next.iter_mut().enumerate() {
        let (i, c) = (j / dim, j % dim);
        let row = &sigma[(i * dim + c) * dp..(i * dim + c + 1) * dp];
        let noise: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
        *out = x[j] + (-a[j] + b[j]) * dt + noise;
    }
}

#[derive(Clone, Copy)]
enum Route {
    Particles,
    Lifted,
}

struct Scratch {
    drift: Vec<f64>,
    sigma: Vec<f64>,
    control: Vec<f64>,
    dw: Vec<f64>,
}

fn coefficients_particles(model: &ModelSpec, x: &[f64], s: &mut Scratch) -> Result<(), EvalError> {
    let d = model.dim;
    let dd = d * model.noise_dim;
    let features = MeasureFeatures::of_atoms(d, x);
    for (i, xi) in x.chunks_exact(d).enumerate() {
        model.drift_into(xi, &features, &mut s.drift[i * d..(i + 1) * d])?;
        model.diffusion_into(xi, &features, &mut s.sigma[i * dd..(i + 1) * dd])?;
    }
    Ok(())
}

fn coefficients_lifted(model: &ModelSpec, atoms: &[f64], s: &mut Scratch) -> Result<(), EvalError> {
    let lifted = model.lift_dynamics_into(atoms, &mut s.drift, &mut s.sigma);
    lifted.map(|_| ())
}

fn simulate(model: &ModelSpec, cfg: &SimConfig, x0: &VectorTuple, route: Route, policy: &ControlPolicy) -> Result<PathBundle> {
    cfg.validate()?;
    if x0.dim() != model.dim {
        return Err(Error::Shape(format!("initial state has dimension {}, model has {}", x0.dim(), model.dim)));
    }
    let (n, d, dp) = (x0.len(), model.dim, model.noise_dim);
    let w = n * d;
    let steps = cfg.steps;
    policy.check(steps, w)?;
    let dt = cfg.dt();
    let sqrt_dt = dt.sqrt();

    let mut states = vec![0.0; cfg.n_paths * (steps + 1) * w];
    let mut increments = vec![0.0; cfg.n_paths * steps * dp];
    let mut controls = vec![0.0; cfg.n_paths * steps * w];

    let failures: Vec<PathFailure> = states
        .par_chunks_mut((steps + 1) * w)
        .zip(increments.par_chunks_mut(steps * dp))
        .zip(controls.par_chunks_mut(steps * w))
        .enumerate()
        .filter_map(|(p, ((xs, dws), acs))| {
            let mut scratch = Scratch {
                drift: vec![0.0; w],
                sigma: vec![0.0; w * dp],
                control: vec![0.0; w],
                dw: vec![0.0; dp],
            };
            let mut stream = NoiseStream::new(cfg.seed, p as u64, dp);
            xs[..w].copy_from_slice(x0.as_slice());
            for k in 0..steps {
                let (done, rest) = xs.split_at_mut((k + 1) * w);
                let x = &done[k * w..];
                let time = cfg.time(k);
                let eval = match route {
                    Route::Particles => coefficients_particles(model, x, &mut scratch),
                    Route::Lifted => coefficients_lifted(model, x, &mut scratch),
                };
                let fail = |reason: String| {
                    Some(PathFailure {
                        path: p,
                        step: k,
                        reason,
                    })
                };
                if let Err(e) = eval {
                    rest.fill(f64::NAN);
                    return fail(format!("coefficient evaluation failed: {e}"));
                }
                match route {
                    Route::Particles => policy.evaluate(k, time, x, d, &mut scratch.control),
                    Route::Lifted => LiftedPolicy::lift(policy.clone()).evaluate_atoms(k, time, x, d, &mut scratch.control),
                }
                if scratch.control.iter().any(|v| !v.is_finite()) {
                    rest.fill(f64::NAN);
                    return fail("policy returned a non-finite control".into());
                }
                stream.fill_step(k, &mut scratch.dw);
                scratch.dw.iter_mut().for_each(|v| *v *= sqrt_dt);
                dws[k * dp..(k + 1) * dp].copy_from_slice(&scratch.dw);
                acs[k * w..(k + 1) * w].copy_from_slice(&scratch.control);
                let next = &mut rest[..w];
                em_update(x, &scratch.control, &scratch.drift, &scratch.sigma, &scratch.dw, dt, d, next);
                if next.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) {
                    rest.fill(f64::NAN);
                    return fail(format!("state left the box |x| <= {BLOW_UP:e}"));
                }
            }
            None
        })
        .collect();

    Ok(PathBundle {
        config: *cfg,
        particles: n,
        dim: d,
        noise_dim: dp,
        states,
        increments,
        controls,
        failures,
    })
}

/// Simulates the particle system from `x0` under `policy`.
pub fn simulate_particles(model: &ModelSpec, cfg: &SimConfig, x0: &VectorTuple, policy: &ControlPolicy) -> Result<PathBundle> {
    simulate(model, cfg, x0, Route::Particles, policy)
}

/// Simulates `dX = (-a + B(X)) ds + Σ(X) dW` on the atom representation of
/// the lift of `atoms`, with a control constant on every cell.
pub fn simulate_lifted_atoms(
    model: &ModelSpec,
    cfg: &SimConfig,
    atoms: &VectorTuple,
    policy: &LiftedPolicy,
) -> Result<PathBundle> {
    simulate(model, cfg, atoms, Route::Lifted, policy.project())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathStatistics {
    /// `E[sup_s |X(s)|_r]`
    pub sup_norm: Estimate,
    /// `E[sup_s |X(s) - x|_r]`
    pub sup_deviation: Estimate,
    /// `E[M_r(μ_{X(t_k)})]` for every step.
    pub moment_trajectory: Vec<f64>,
}

fn rnorm_flat(v: &[f64], dim: usize, r: f64) -> f64 {
    let n = v.len() / dim;
    let s: f64 = v
        .chunks_exact(dim)
        .map(|p| p.iter().map(|c| c * c).sum::<f64>().sqrt().powf(r))
        .sum();
    (s / n as f64).powf(1.0 / r)
}

/// Monte Carlo counterparts of the moment, time-continuity and stability
/// estimates for the state process.
pub fn path_statistics(bundle: &PathBundle, r: f64) -> Result<PathStatistics> {
    crate::error::check_r(r)?;
    bundle.ensure_valid()?;
    let (d, steps) = (bundle.dim, bundle.steps());
    let x0 = bundle.state(0, 0);
    let mut sup_norm = Vec::with_capacity(bundle.n_paths());
    let mut sup_dev = Vec::with_capacity(bundle.n_paths());
    let mut moments = vec![0.0; steps + 1];
    for p in 0..bundle.n_paths() {
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for (k, m) in moments.iter_mut().enumerate() {
            let x = bundle.state(p, k);
            let norm = rnorm_flat(x, d, r);
            a = a.max(norm);
            let diff: Vec<f64> = x.iter().zip(x0).map(|(u, v)| u - v).collect();
            b = b.max(rnorm_flat(&diff, d, r));
            *m += norm.powf(r);
        }
        sup_norm.push(a);
        sup_dev.push(b);
    }
    moments.iter_mut().for_each(|m| *m /= bundle.n_paths() as f64);
    Ok(PathStatistics {
        sup_norm: Estimate::from_samples(&sup_norm),
        sup_deviation: Estimate::from_samples(&sup_dev),
        moment_trajectory: moments,
    })
}

/// `E[sup_{s ≤ t_k} |X(s) - x|_r]` for every `k = 0..=steps`.
pub fn sup_deviation_profile(bundle: &PathBundle, r: f64) -> Result<Vec<Estimate>> {
    crate::error::check_r(r)?;
    bundle.ensure_valid()?;
    let x0 = bundle.state(0, 0);
    let steps = bundle.steps();
    let mut running = vec![vec![0.0; bundle.n_paths()]; steps + 1];
    for p in 0..bundle.n_paths() {
        let mut sup = 0.0f64;
        for (k, col) in running.iter_mut().enumerate() {
            let diff: Vec<f64> = bundle.state(p, k).iter().zip(x0).map(|(u, v)| u - v).collect();
            sup = sup.max(rnorm_flat(&diff, bundle.dim, r));
            col[p] = sup;
        }
    }
    Ok(running.iter().map(|c| Estimate::from_samples(c)).collect())
}

/// `E[sup_s |X¹(s) - X⁰(s)|_r]` for two bundles driven by the same noise.
pub fn paired_sup_difference(a: &PathBundle, b: &PathBundle, r: f64) -> Result<Estimate> {
    crate::error::check_r(r)?;
    a.ensure_valid()?;
    b.ensure_valid()?;
    if a.states.len() != b.states.len() || a.dim != b.dim {
        return Err(Error::Shape("paired bundles must have identical shapes".into()));
    }
    let samples: Vec<f64> = (0..a.n_paths())
        .map(|p| {
            (0..=a.steps())
                .map(|k| {
                    let diff: Vec<f64> = a.state(p, k).iter().zip(b.state(p, k)).map(|(u, v)| u - v).collect();
                    rnorm_flat(&diff, a.dim, r)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(b: &str, s: &str) -> ModelSpec {
        ModelSpec::new("t", 1, 1, &[b], &[&[s]], "0", 1.0, "m2/2").unwrap()
    }

    #[test]
    fn frozen_without_coefficients() {
        let cfg = SimConfig::new(0.0, 1.0, 10, 3, 1).unwrap();
        let x0 = VectorTuple::scalar(&[0.5, -2.0]).unwrap();
        let bundle = simulate_particles(&model("0", "0"), &cfg, &x0, &ControlPolicy::Zero).unwrap();
        for p in 0..3 {
            for k in 0..=10 {
                assert_eq!(bundle.state(p, k), x0.as_slice());
            }
        }
    }

    #[test]
    fn constant_drift_is_exact() {
        let cfg = SimConfig::new(0.0, 1.0, 8, 1, 1).unwrap();
        let x0 = VectorTuple::scalar(&[0.25]).unwrap();
        let bundle = simulate_particles(&model("1", "0"), &cfg, &x0, &ControlPolicy::Zero).unwrap();
        assert_eq!(bundle.state(0, 8), &[1.25]);
    }

    #[test]
    fn mean_drift_converges_to_e() {
        // ẋ = x from x = 1: Euler gives (1 + 1/m)^m.
        let x0 = VectorTuple::scalar(&[1.0, 1.0]).unwrap();
        let mut errors = vec![];
        for k in 4..9 {
            let steps = 1usize << k;
            let cfg = SimConfig::new(0.0, 1.0, steps, 1, 0).unwrap();
            let b = simulate_particles(&model("m1[0]", "0"), &cfg, &x0, &ControlPolicy::Zero).unwrap();
            let end = b.state(0, steps)[0];
            assert!((end - (1.0 + 1.0 / steps as f64).powi(steps as i32)).abs() < 1e-12);
            errors.push(std::f64::consts::E - end);
        }
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..2.2).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn open_loop_shape_checked() {
        let cfg = SimConfig::new(0.0, 1.0, 4, 1, 0).unwrap();
        let x0 = VectorTuple::scalar(&[0.0, 1.0]).unwrap();
        let bad = ControlPolicy::open_loop(vec![vec![0.0; 2]; 3]);
        assert!(simulate_particles(&model("0", "1"), &cfg, &x0, &bad).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let cfg = SimConfig::new(0.0, 1.0, 50, 2, 0).unwrap();
        let x0 = VectorTuple::scalar(&[1.0]).unwrap();
        let bundle = simulate_particles(&model("x[0]^3", "0"), &cfg, &x0, &ControlPolicy::Zero).unwrap();
        assert_eq!(bundle.failures.len(), 2);
        assert!(bundle.ensure_valid().is_err());
        let bundle = simulate_particles(&model("log(x[0])", "0"), &cfg, &VectorTuple::scalar(&[-1.0]).unwrap(), &ControlPolicy::Zero).unwrap();
        assert!(bundle.failures[0].reason.contains("log"));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(1.0, 1.0, 1, 1, 0).is_err());
        assert!(SimConfig::new(0.0, 1.0, 0, 1, 0).is_err());
        assert!(SimConfig::new(0.0, 1.0, 1, 0, 0).is_err());
    }

    #[test]
    fn csv_dump() {
        let cfg = SimConfig::new(0.0, 1.0, 1, 1, 0).unwrap();
        let x0 = VectorTuple::scalar(&[2.0]).unwrap();
        let b = simulate_particles(&model("1", "0"), &cfg, &x0, &ControlPolicy::Zero).unwrap();
        let mut buf = vec![];
        b.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "path,step,particle,coord,value\n0,0,0,0,2.0\n0,1,0,0,3.0\n");
    }
}
