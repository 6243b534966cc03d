//! Smoothing of functionals on `R^d × P_r(R^d)`:
//!
//! ```text
//! φ_k(x, μ) = E[ φ(x - y_0, (1/k) Σ_i δ_{X̃_i - y_i}) ],
//! ```
//!
//! with `X̃_i` i.i.d. from `μ` and `y_0, …, y_k` i.i.d. from the bump density of
//! width `ε = 1/k`. The expectation is estimated by Monte Carlo replicates.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{CoefficientExpr, MeasureFeatures};
use crate::measure::{optimal_assignment, wasserstein_r, EmpiricalMeasure, VectorTuple};
use crate::rng::aux_rng;
use crate::stats::Estimate;
use crate::verify::{Comparison, ProbeReport, Provenance};

/// A functional `φ(x, μ)` written in the coefficient language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseFunctional {
    pub name: String,
    pub dim: usize,
    pub expr: CoefficientExpr,
    /// Declared Lipschitz constant for `|x - y| + d_r(μ, ν)`.
    #[serde(default)]
    pub lipschitz: Option<f64>,
    /// Whether `(x, X) ↦ φ(x, law(X))` is declared convex.
    #[serde(default)]
    pub convex_lift: bool,
}

/// Names accepted by [`BaseFunctional::registry`].
pub const FUNCTIONALS: [&str; 4] = ["position", "mean", "abs-offset", "second-moment"];

impl BaseFunctional {
    pub fn new(name: &str, dim: usize, expr: &str, lipschitz: Option<f64>, convex_lift: bool) -> Result<Self> {
        let expr = CoefficientExpr::parse(expr)?;
        let (xi, mi) = expr.max_indices();
        if xi.is_some_and(|i| i >= dim) || mi.is_some_and(|i| i >= dim) {
            return Err(Error::Model(format!("functional {name} indexes beyond dimension {dim}")));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            expr,
            lipschitz,
            convex_lift,
        })
    }

    /// `position = x[0]`, `mean = m1[0]`, `abs-offset = |x[0] - m1[0]|` (all
    /// 1-Lipschitz), and `second-moment = m2` (not globally Lipschitz).
    pub fn registry(name: &str, dim: usize) -> Result<Self> {
        match name {
            "position" => Self::new(name, dim, "x[0]", Some(1.0), true),
            "mean" => Self::new(name, dim, "m1[0]", Some(1.0), true),
            "abs-offset" => Self::new(name, dim, "abs(x[0] - m1[0])", Some(1.0), true),
            "second-moment" => Self::new(name, dim, "m2", None, true),
            _ => Err(Error::Model(format!(
                "unknown functional {name}; known: {}",
                FUNCTIONALS.join(", ")
            ))),
        }
    }

    pub fn constant(value: f64, dim: usize) -> Self {
        Self {
            name: format!("constant {value}"),
            dim,
            expr: CoefficientExpr::constant(value),
            lipschitz: Some(0.0),
            convex_lift: true,
        }
    }

    pub fn eval(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<f64> {
        Ok(self.expr.eval_measure(x, mu)?)
    }

    fn eval_atoms(&self, x: &[f64], atoms: &[f64]) -> Result<f64> {
        Ok(self.expr.eval(x, &MeasureFeatures::of_atoms(self.dim, atoms))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothedFunctional {
    pub base: BaseFunctional,
    /// Sample count; the bump width is `1/k`.
    pub k: usize,
    pub mc_reps: usize,
    pub seed: u64,
}

impl SmoothedFunctional {
    pub fn new(base: BaseFunctional, k: usize, mc_reps: usize, seed: u64) -> Result<Self> {
        if k == 0 || mc_reps == 0 {
            return Err(Error::Domain("smoothing needs k ≥ 1 and mc_reps ≥ 1".into()));
        }
        Ok(Self { base, k, mc_reps, seed })
    }

    pub fn epsilon(&self) -> f64 {
        1.0 / self.k as f64
    }
}

/// Unnormalized bump `exp(1/(|u|² - 1))` on the unit ball, divided by its maximum `e^{-1}`.
fn bump_ratio(norm_sq: f64) -> f64 {
    if norm_sq >= 1.0 {
        0.0
    } else {
        (1.0 / (norm_sq - 1.0) + 1.0).exp()
    }
}

/// A draw from the bump density of width `epsilon`, with the number of
/// ball proposals it took.
pub fn sample_bump_counted(epsilon: f64, dim: usize, rng: &mut impl Rng) -> (Vec<f64>, usize) {
    let mut u = vec![0.0; dim];
    let mut proposals = 0;
    loop {
        // Uniform on the unit ball by rejection from the cube.
        let norm_sq = loop {
            for v in u.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let s: f64 = u.iter().map(|v| v * v).sum();
            if s < 1.0 {
                break s;
            }
        };
        proposals += 1;
        if rng.random::<f64>() < bump_ratio(norm_sq) {
            return (u.iter().map(|v| epsilon * v).collect(), proposals);
        }
    }
}

pub fn sample_bump(epsilon: f64, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    sample_bump_counted(epsilon, dim, rng).0
}

/// The random inputs of one replicate: `y_0`, the sampled atom indices and
/// `y_1..y_k` (flat).
#[derive(Debug, Clone)]
struct Replicate {
    y0: Vec<f64>,
    index: Vec<usize>,
    offsets: Vec<f64>,
}

impl Replicate {
    fn draw(seed: u64, rep: usize, k: usize, atoms: usize, dim: usize) -> Self {
        let mut rng = aux_rng(seed, rep as u64);
        let eps = 1.0 / k as f64;
        let y0 = sample_bump(eps, dim, &mut rng);
        let mut index = Vec::with_capacity(k);
        let mut offsets = Vec::with_capacity(k * dim);
        for _ in 0..k {
            index.push(rng.random_range(0..atoms));
            offsets.extend(sample_bump(eps, dim, &mut rng));
        }
        Self { y0, index, offsets }
    }

    fn max_offset_norm(&self) -> f64 {
        let d = self.y0.len();
        std::iter::once(self.y0.as_slice())
            .chain(self.offsets.chunks_exact(d))
            .map(|y| y.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `φ(x - y_0, (1/k) Σ δ_{atoms[index_i] - y_i})`.
    fn apply(&self, base: &BaseFunctional, x: &[f64], atoms: &[f64]) -> Result<f64> {
        let d = base.dim;
        let shifted: Vec<f64> = x.iter().zip(&self.y0).map(|(a, b)| a - b).collect();
        let mut sample = Vec::with_capacity(self.offsets.len());
        for (i, y) in self.index.iter().zip(self.offsets.chunks_exact(d)) {
            sample.extend(atoms[i * d..(i + 1) * d].iter().zip(y).map(|(a, b)| a - b));
        }
        base.eval_atoms(&shifted, &sample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub reps: usize,
    /// Largest mollifier offset norm used; always below `1/k`.
    pub max_offset_norm: f64,
}

fn check_point(sf: &SmoothedFunctional, x: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
    if x.len() != sf.base.dim || mu.dim() != sf.base.dim {
        return Err(Error::Shape(format!(
            "functional {} lives in dimension {}",
            sf.base.name, sf.base.dim
        )));
    }
    if mu.is_empty() {
        return Err(Error::Shape("empty measure".into()));
    }
    Ok(())
}

/// Per-replicate values of `g(replicate)`, in replicate order.
fn replicate_values<F>(sf: &SmoothedFunctional, atoms: usize, g: F) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&Replicate) -> Result<f64> + Sync,
{
    let out: Vec<(f64, f64)> = (0..sf.mc_reps)
        .into_par_iter()
        .map(|j| {
            let rep = Replicate::draw(sf.seed, j, sf.k, atoms, sf.base.dim);
            Ok((g(&rep)?, rep.max_offset_norm()))
        })
        .collect::<Result<_>>()?;
    let max_norm = out.iter().map(|v| v.1).fold(0.0, f64::max);
    Ok((out.into_iter().map(|v| v.0).collect(), max_norm))
}

/// Monte Carlo estimate of `φ_k(x, μ)`.
pub fn smooth_eval(sf: &SmoothedFunctional, x: &[f64], mu: &EmpiricalMeasure) -> Result<SmoothEstimate> {
    check_point(sf, x, mu)?;
    let (values, max_offset_norm) = replicate_values(sf, mu.len(), |rep| rep.apply(&sf.base, x, mu.as_slice()))?;
    let est = Estimate::from_samples(&values);
    Ok(SmoothEstimate {
        mean: est.mean,
        std_error: est.std_error,
        reps: est.samples,
        max_offset_norm,
    })
}

/// A point `(x, μ)` of the product space.
pub type Point = (Vec<f64>, EmpiricalMeasure);

/// Reorders `nu` so that atom `i` of `mu` is optimally paired with atom `i`.
fn coupled_atoms(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, r: f64) -> Result<Vec<f64>> {
    let plan = optimal_assignment(mu, nu, r)?;
    let d = mu.dim();
    let mut out = Vec::with_capacity(nu.as_slice().len());
    for &j in &plan.target {
        out.extend_from_slice(nu.atom(j));
    }
    debug_assert_eq!(out.len(), d * nu.len());
    Ok(out)
}

/// `max |φ_k(x,μ) - φ_k(y,ν)| / (|x - y| + d_r(μ, ν))` over pairs with equal
/// atom counts, under common random numbers and the optimal coupling of the
/// atoms. Passes when every quotient, less three paired standard errors over
/// the denominator, stays within the declared constant.
pub fn lipschitz_preservation_probe(sf: &SmoothedFunctional, pairs: &[(Point, Point)], r: f64) -> Result<ProbeReport> {
    let lip = sf
        .base
        .lipschitz
        .ok_or_else(|| Error::Model(format!("functional {} declares no Lipschitz constant", sf.base.name)))?;
    let mut worst = f64::NEG_INFINITY;
    let mut raw: f64 = 0.0;
    let mut used = 0;
    let mut max_norm: f64 = 0.0;
    for ((x, mu), (y, nu)) in pairs {
        check_point(sf, x, mu)?;
        check_point(sf, y, nu)?;
        let dx = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let denom = dx + wasserstein_r(mu, nu, r)?;
        if denom < 1e-12 {
            continue;
        }
        let nu_atoms = coupled_atoms(mu, nu, r)?;
        let (diffs, norm) = replicate_values(sf, mu.len(), |rep| {
            Ok(rep.apply(&sf.base, x, mu.as_slice())? - rep.apply(&sf.base, y, &nu_atoms)?)
        })?;
        max_norm = max_norm.max(norm);
        let est = Estimate::from_samples(&diffs);
        let q = est.mean.abs() / denom;
        raw = raw.max(q);
        worst = worst.max(q - 3.0 * est.std_error / denom);
        used += 1;
    }
    if used == 0 {
        worst = 0.0;
    }
    Ok(ProbeReport::new(
        format!("lipschitz_preservation {} k={}", sf.base.name, sf.k),
        used,
        worst,
        lip,
        Comparison::AtMost,
        Provenance {
            model_id: sf.base.name.clone(),
            grid_id: None,
            seeds: vec![sf.seed],
        },
    )
    .detail("max_quotient", raw)
    .detail("max_offset_norm", max_norm))
}

/// `sup |φ_k - φ|` over the test set for one `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupError {
    pub k: usize,
    pub sup: f64,
    /// Standard error at the maximizing point.
    pub std_error: f64,
    pub max_offset_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformConvergence {
    pub rows: Vec<SupError>,
    /// Sups are non-increasing in `k` up to three combined standard errors.
    pub monotone: ProbeReport,
    /// The last sup lies below the first by more than three combined standard errors.
    pub strict: ProbeReport,
}

fn combined(a: &SupError, b: &SupError) -> f64 {
    (a.std_error.powi(2) + b.std_error.powi(2)).sqrt()
}

pub fn uniform_convergence_probe(
    base: &BaseFunctional,
    ks: &[usize],
    test_set: &[Point],
    mc_reps: usize,
    seed: u64,
) -> Result<UniformConvergence> {
    if ks.len() < 2 {
        return Err(Error::Domain("uniform convergence needs at least two values of k".into()));
    }
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let sf = SmoothedFunctional::new(base.clone(), k, mc_reps, seed)?;
        let mut row = SupError {
            k,
            sup: 0.0,
            std_error: 0.0,
            max_offset_norm: 0.0,
        };
        for (x, mu) in test_set {
            let est = smooth_eval(&sf, x, mu)?;
            let err = (est.mean - base.eval(x, mu)?).abs();
            row.max_offset_norm = row.max_offset_norm.max(est.max_offset_norm);
            if err > row.sup {
                row.sup = err;
                row.std_error = est.std_error;
            }
        }
        rows.push(row);
    }
    let prov = Provenance {
        model_id: base.name.clone(),
        grid_id: None,
        seeds: vec![seed],
    };
    let rise = rows
        .windows(2)
        .map(|w| (w[1].sup - w[0].sup) - 3.0 * combined(&w[0], &w[1]))
        .fold(f64::NEG_INFINITY, f64::max);
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let drop = first.sup - last.sup - 3.0 * combined(first, last);
    Ok(UniformConvergence {
        monotone: ProbeReport::new(
            format!("uniform_convergence_monotone {}", base.name),
            test_set.len() * rows.len(),
            rise,
            0.0,
            Comparison::AtMost,
            prov.clone(),
        ),
        strict: ProbeReport::new(
            format!("uniform_convergence_strict {}", base.name),
            test_set.len() * 2,
            drop,
            0.0,
            Comparison::AtLeast,
            prov,
        )
        .detail("first_sup", first.sup)
        .detail("last_sup", last.sup),
        rows,
    })
}

/// One sampled segment: `λ`, `(x, X)` and `(y, Y)` with `X`, `Y` of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub lambda: f64,
    pub x: Vec<f64>,
    pub big_x: VectorTuple,
    pub y: Vec<f64>,
    pub big_y: VectorTuple,
}

/// Absolute slack for rounding in the convexity statistic, which is exactly
/// zero for linear lifts in exact arithmetic.
pub const ROUNDING_SLACK: f64 = 1e-12;

/// Coupled estimate of
/// `Δ = λφ̃_k(x,X) + (1-λ)φ̃_k(y,Y) - φ̃_k(λx+(1-λ)y, λX+(1-λ)Y)`:
/// each replicate samples one atom index per draw for all three terms and
/// shares the mollifier offsets. The report statistic is
/// `min (Δ + 3·SE)`, which must be non-negative up to [`ROUNDING_SLACK`]; the details carry the
/// smallest and the largest absolute per-replicate `Δ`.
pub fn convexity_preservation_probe(sf: &SmoothedFunctional, segments: &[Segment]) -> Result<ProbeReport> {
    if !sf.base.convex_lift {
        return Err(Error::Model(format!("functional {} does not declare a convex lift", sf.base.name)));
    }
    let mut stat = f64::INFINITY;
    let mut min_rep = f64::INFINITY;
    let mut max_abs_rep: f64 = 0.0;
    let mut min_mean = f64::INFINITY;
    for s in segments {
        s.big_x.same_shape(&s.big_y)?;
        if s.big_x.dim() != sf.base.dim || s.x.len() != sf.base.dim || s.y.len() != sf.base.dim {
            return Err(Error::Shape(format!("segment does not match dimension {}", sf.base.dim)));
        }
        let l = s.lambda;
        let mid_x: Vec<f64> = s.x.iter().zip(&s.y).map(|(a, b)| l * a + (1.0 - l) * b).collect();
        let mid = s.big_x.convex_combination(&s.big_y, l)?;
        let (deltas, _) = replicate_values(sf, s.big_x.len(), |rep| {
            let a = rep.apply(&sf.base, &s.x, s.big_x.as_slice())?;
            let b = rep.apply(&sf.base, &s.y, s.big_y.as_slice())?;
            let c = rep.apply(&sf.base, &mid_x, mid.as_slice())?;
            Ok(l * a + (1.0 - l) * b - c)
        })?;
        for &dv in &deltas {
            min_rep = min_rep.min(dv);
            max_abs_rep = max_abs_rep.max(dv.abs());
        }
        let est = Estimate::from_samples(&deltas);
        min_mean = min_mean.min(est.mean);
        stat = stat.min(est.mean + 3.0 * est.std_error);
    }
    if segments.is_empty() {
        stat = 0.0;
    }
    Ok(ProbeReport::new(
        format!("convexity_preservation {} k={}", sf.base.name, sf.k),
        segments.len(),
        stat,
        -ROUNDING_SLACK,
        Comparison::AtLeast,
        Provenance {
            model_id: sf.base.name.clone(),
            grid_id: None,
            seeds: vec![sf.seed],
        },
    )
    .detail("min_mean_delta", min_mean)
    .detail("min_replicate_delta", min_rep)
    .detail("max_abs_replicate_delta", max_abs_rep))
}
