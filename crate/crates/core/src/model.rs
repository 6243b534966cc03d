//! Coefficient bundles `(b, σ, l_1, l_2, U_T)` of the controlled particle
//! system, the Hamiltonian and the pointwise optimal feedback map.
//!
//! The control cost is always `l_2(a) = κ|a|²/2`, so its convex conjugate and
//! the inverse of its gradient have closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{CoefficientExpr, EvalError, MeasureFeatures};
use crate::measure::{wasserstein_r, EmpiricalMeasure, VectorTuple};

/// Names of the built-in models, sorted.
pub const REGISTRY: [&str; 4] = [
    "LQ-decoupled",
    "LQ-mean-reverting",
    "linear-terminal",
    "tanh-interaction",
];

/// JSON model document. Either `registry` alone or a full coefficient set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_prime: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(rename = "UT", default, skip_serializing_if = "Option::is_none")]
    pub ut: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine_lift: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift_convex: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub dim: usize,
    pub noise_dim: usize,
    /// `b`, one expression per state coordinate.
    pub drift: Vec<CoefficientExpr>,
    /// `σ`, row-major `d × d'`.
    pub diffusion: Vec<CoefficientExpr>,
    pub running_cost: CoefficientExpr,
    pub kappa: f64,
    /// `U_T`, a function of measure features only.
    pub terminal: CoefficientExpr,
    /// Lifts of `b` and `σ` are affine.
    pub affine_lift: bool,
    /// Lifts of `l_1` and `U_T` are convex.
    pub lift_convex: bool,
}

fn parse_field(field: &str, src: &str) -> Result<CoefficientExpr> {
    CoefficientExpr::parse(src).map_err(|e| Error::Model(format!("{field}: {e}")))
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        noise_dim: usize,
        drift: &[&str],
        diffusion: &[&[&str]],
        running_cost: &str,
        kappa: f64,
        terminal: &str,
    ) -> Result<Self> {
        let drift = drift
            .iter()
            .enumerate()
            .map(|(k, s)| parse_field(&format!("b[{k}]"), s))
            .collect::<Result<Vec<_>>>()?;
        if diffusion.len() != dim {
            return Err(Error::Model(format!("sigma has {} rows, expected d = {dim}", diffusion.len())));
        }
        let mut sigma = Vec::with_capacity(dim * noise_dim);
        for (k, row) in diffusion.iter().enumerate() {
            if row.len() != noise_dim {
                return Err(Error::Model(format!(
                    "sigma row {k} has {} entries, expected d' = {noise_dim}",
                    row.len()
                )));
            }
            for (m, s) in row.iter().enumerate() {
                sigma.push(parse_field(&format!("sigma[{k}][{m}]"), s)?);
            }
        }
        let spec = Self {
            id: id.into(),
            dim,
            noise_dim,
            drift,
            diffusion: sigma,
            running_cost: parse_field("l1", running_cost)?,
            kappa,
            terminal: parse_field("UT", terminal)?,
            affine_lift: false,
            lift_convex: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_flags(mut self, affine_lift: bool, lift_convex: bool) -> Self {
        self.affine_lift = affine_lift;
        self.lift_convex = lift_convex;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.noise_dim == 0 {
            return Err(Error::Model("d and d' must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Model(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.drift.len() != self.dim {
            return Err(Error::Model(format!("b has {} components, expected d = {}", self.drift.len(), self.dim)));
        }
        if self.terminal.uses_state() {
            return Err(Error::Model("UT may depend on measure features only (m1, m2)".into()));
        }
        let all = self
            .drift
            .iter()
            .chain(&self.diffusion)
            .chain([&self.running_cost, &self.terminal]);
        for e in all {
            let (xs, ms) = e.max_indices();
            if let Some(k) = xs.max(ms).filter(|&k| k >= self.dim) {
                return Err(Error::Model(format!("`{e}` indexes coordinate {k} but d = {}", self.dim)));
            }
        }
        Ok(())
    }

    pub fn registry(name: &str) -> Result<Self> {
        let spec = match name {
            "LQ-decoupled" => Self::new(name, 1, 1, &["0"], &[&["1"]], "0", 1.0, "m2/2")?.with_flags(true, true),
            "LQ-mean-reverting" => {
                Self::new(name, 1, 1, &["-x[0]+m1[0]"], &[&["1"]], "0", 1.0, "m2/2")?.with_flags(true, true)
            }
            "linear-terminal" => Self::new(name, 1, 1, &["0"], &[&["1"]], "0", 1.0, "m1[0]")?.with_flags(true, true),
            "tanh-interaction" => Self::new(
                name,
                1,
                1,
                &["-0.5*x[0]"],
                &[&["0.5+0.25*tanh(m1[0])"]],
                "sqrt(1+(x[0]-m1[0])^2)-1",
                1.0,
                "sqrt(1+m1[0]^2)",
            )?
            .with_flags(false, true),
            other => return Err(Error::Model(format!("unknown registry model `{other}`"))),
        };
        Ok(spec)
    }

    /// Builds the registry model `LQ-decoupled` with a custom noise level and
    /// control cost.
    pub fn lq_decoupled(sigma: f64, kappa: f64) -> Result<Self> {
        let s = format!("{sigma:?}");
        Ok(Self::new("LQ-decoupled", 1, 1, &["0"], &[&[s.as_str()]], "0", kappa, "m2/2")?.with_flags(true, true))
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if let Some(name) = &doc.registry {
            let extra = doc.d.is_some()
                || doc.d_prime.is_some()
                || doc.b.is_some()
                || doc.sigma.is_some()
                || doc.l1.is_some()
                || doc.kappa.is_some()
                || doc.ut.is_some();
            if extra {
                return Err(Error::Model("`registry` cannot be combined with explicit coefficients".into()));
            }
            let mut spec = Self::registry(name)?;
            if let Some(id) = &doc.id {
                spec.id = id.clone();
            }
            return Ok(spec);
        }
        let missing = |f: &str| Error::Model(format!("missing field `{f}`"));
        let d = doc.d.ok_or_else(|| missing("d"))?;
        let d_prime = doc.d_prime.ok_or_else(|| missing("d_prime"))?;
        let b = doc.b.as_ref().ok_or_else(|| missing("b"))?;
        let sigma = doc.sigma.as_ref().ok_or_else(|| missing("sigma"))?;
        let b: Vec<&str> = b.iter().map(String::as_str).collect();
        let rows: Vec<Vec<&str>> = sigma.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
        let rows: Vec<&[&str]> = rows.iter().map(Vec::as_slice).collect();
        let spec = Self::new(
            doc.id.clone().unwrap_or_else(|| "custom".into()),
            d,
            d_prime,
            &b,
            &rows,
            doc.l1.as_deref().ok_or_else(|| missing("l1"))?,
            doc.kappa.ok_or_else(|| missing("kappa"))?,
            doc.ut.as_deref().ok_or_else(|| missing("UT"))?,
        )?;
        Ok(spec.with_flags(doc.affine_lift.unwrap_or(false), doc.lift_convex.unwrap_or(false)))
    }

    pub fn to_document(&self) -> ModelDocument {
        let strs = |v: &[CoefficientExpr]| v.iter().map(ToString::to_string).collect::<Vec<_>>();
        ModelDocument {
            registry: None,
            id: Some(self.id.clone()),
            d: Some(self.dim),
            d_prime: Some(self.noise_dim),
            b: Some(strs(&self.drift)),
            sigma: Some(self.diffusion.chunks(self.noise_dim).map(strs).collect()),
            l1: Some(self.running_cost.to_string()),
            kappa: Some(self.kappa),
            ut: Some(self.terminal.to_string()),
            affine_lift: Some(self.affine_lift),
            lift_convex: Some(self.lift_convex),
        }
    }

    /// `b(x, μ)` written into `out` (length `d`).
    pub fn drift_into(&self, x: &[f64], f: &MeasureFeatures, out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(x, f)?;
        }
        Ok(())
    }

    /// `σ(x, μ)` written row-major into `out` (length `d * d'`).
    pub fn diffusion_into(&self, x: &[f64], f: &MeasureFeatures, out: &mut [f64]) -> Result<(), EvalError> {
        for (o, e) in out.iter_mut().zip(&self.diffusion) {
            *o = e.eval(x, f)?;
        }
        Ok(())
    }

    pub fn running(&self, x: &[f64], f: &MeasureFeatures) -> Result<f64, EvalError> {
        self.running_cost.eval(x, f)
    }

    pub fn terminal_value(&self, f: &MeasureFeatures) -> Result<f64, EvalError> {
        self.terminal.eval(&[], f)
    }

    /// `l_2(a) = κ|a|²/2`.
    pub fn control_cost(&self, a: &[f64]) -> f64 {
        0.5 * self.kappa * a.iter().map(|v| v * v).sum::<f64>()
    }

    /// Constants of the two-sided growth bound `-C1 + C2|p|² ≤ l_2(p) ≤ C1 + C3|p|²`
    /// and the convexity modulus `ν`, returned as `(C1, C2, C3, ν)`.
    pub fn growth_constants(&self) -> (f64, f64, f64, f64) {
        let half = self.kappa / 2.0;
        (0.0, half, half, half)
    }

    /// `H(x, μ, p)` for a state `x` and the measure `mu`.
    pub fn hamiltonian(&self, x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Result<f64> {
        self.hamiltonian_features(x, &MeasureFeatures::of(mu), p)
    }

    pub fn hamiltonian_features(&self, x: &[f64], f: &MeasureFeatures, p: &[f64]) -> Result<f64> {
        if p.len() != self.dim || x.len() != self.dim {
            return Err(Error::Shape(format!("x and p must have dimension {}", self.dim)));
        }
        let mut b = vec![0.0; self.dim];
        self.drift_into(x, f, &mut b)?;
        let l1 = self.running(x, f)?;
        Ok(hamiltonian_from_parts(&b, l1, p, self.kappa))
    }

    /// Atom representations of `B(X)`, `Σ(X)`, `L_1(X)` and `U_T(X)` for the
    /// lift `X = Σ x_i 1_{A_i^n}`.
    pub fn lifted_coefficients(&self, atoms: &VectorTuple) -> Result<LiftedCoefficients> {
        if atoms.dim() != self.dim {
            return Err(Error::Shape(format!("atoms have dimension {}, model has {}", atoms.dim(), self.dim)));
        }
        let n = atoms.len();
        let mut drift = vec![0.0; n * self.dim];
        let mut diffusion = vec![0.0; n * self.dim * self.noise_dim];
        let (running, features) = self.lift_into(atoms.as_slice(), &mut drift, &mut diffusion)?;
        Ok(LiftedCoefficients {
            drift: VectorTuple::new(self.dim, drift)?,
            diffusion,
            running,
            terminal: self.terminal_value(&features)?,
        })
    }

    /// Fills the atom representations of `B(X)` and `Σ(X)`.
    pub(crate) fn lift_dynamics_into(
        &self,
        atoms: &[f64],
        drift: &mut [f64],
        diffusion: &mut [f64],
    ) -> Result<MeasureFeatures, EvalError> {
        let d = self.dim;
        let dd = d * self.noise_dim;
        let features = MeasureFeatures::of_atoms(d, atoms);
        for (i, x) in atoms.chunks_exact(d).enumerate() {
            self.drift_into(x, &features, &mut drift[i * d..(i + 1) * d])?;
            self.diffusion_into(x, &features, &mut diffusion[i * dd..(i + 1) * dd])?;
        }
        Ok(features)
    }

    /// `L_1(X) = (1/n) Σ l_1(x_i, μ_x)`.
    pub(crate) fn lifted_running(&self, atoms: &[f64], features: &MeasureFeatures) -> Result<f64, EvalError> {
        let d = self.dim;
        let n = atoms.len() / d;
        let mut running = 0.0;
        for x in atoms.chunks_exact(d) {
            running += self.running(x, features)?;
        }
        Ok(running / n as f64)
    }

    fn lift_into(
        &self,
        atoms: &[f64],
        drift: &mut [f64],
        diffusion: &mut [f64],
    ) -> Result<(f64, MeasureFeatures), EvalError> {
        let features = self.lift_dynamics_into(atoms, drift, diffusion)?;
        Ok((self.lifted_running(atoms, &features)?, features))
    }
}

/// `-b·p - l_1 + l_2*(p)`.
pub fn hamiltonian_from_parts(b: &[f64], l1: f64, p: &[f64], kappa: f64) -> f64 {
    let bp: f64 = b.iter().zip(p).map(|(b, p)| b * p).sum();
    -bp - l1 + l2_conjugate(p, kappa)
}

/// Convex conjugate of `κ|a|²/2`: `|p|²/(2κ)`.
pub fn l2_conjugate(p: &[f64], kappa: f64) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>() / (2.0 * kappa)
}

/// `Dl_2(a) = κ a`.
pub fn l2_gradient(a: &[f64], kappa: f64) -> Vec<f64> {
    a.iter().map(|v| kappa * v).collect()
}

/// `(Dl_2)^{-1}(p) = p / κ`, the maximizer of `a·p - l_2(a)`.
pub fn feedback_map(p: &[f64], kappa: f64) -> Vec<f64> {
    p.iter().map(|v| v / kappa).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedCoefficients {
    pub drift: VectorTuple,
    /// `n` row-major `d × d'` blocks.
    pub diffusion: Vec<f64>,
    pub running: f64,
    pub terminal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub coefficient: String,
    pub at_radius: f64,
    pub at_double_radius: f64,
    /// False when the estimate grows substantially under radius doubling.
    pub globally_lipschitz: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub model: String,
    pub radius: f64,
    pub sample_count: usize,
    pub r: f64,
    pub estimates: Vec<LipschitzEstimate>,
}

impl AssumptionReport {
    pub fn get(&self, coefficient: &str) -> Option<&LipschitzEstimate> {
        self.estimates.iter().find(|e| e.coefficient == coefficient)
    }
}

const PROBE_ATOMS: usize = 4;
const GROWTH_FLAG: f64 = 1.5;

fn ball_point(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-radius..radius)).collect();
        if p.iter().map(|v| v * v).sum::<f64>() < radius * radius {
            return p;
        }
    }
}

fn perturb(rng: &mut impl Rng, base: &[f64], scale: f64) -> Vec<f64> {
    base.iter().map(|v| v + rng.random_range(-scale..scale)).collect()
}

/// Sampled Lipschitz constants of `b`, `σ`, `l_1` and `U_T` with respect to
/// `|·| + d_r`, at `radius` and at twice the radius.
pub fn assumption_probe(model: &ModelSpec, sample_count: usize, radius: f64, seed: u64, r: f64) -> Result<AssumptionReport> {
    if sample_count < 2 {
        return Err(Error::Domain("assumption probe needs at least 2 samples".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Domain("probe radius must be positive".into()));
    }
    let names = ["b", "sigma", "l1", "UT"];
    let first = probe_at(model, sample_count, radius, seed, r)?;
    let second = probe_at(model, sample_count, 2.0 * radius, seed, r)?;
    let estimates = names
        .iter()
        .zip(first.iter().zip(&second))
        .map(|(name, (&a, &b))| LipschitzEstimate {
            coefficient: name.to_string(),
            at_radius: a,
            at_double_radius: b,
            globally_lipschitz: !(b > GROWTH_FLAG * a && b > 1e-12),
        })
        .collect();
    Ok(AssumptionReport {
        model: model.id.clone(),
        radius,
        sample_count,
        r,
        estimates,
    })
}

fn probe_at(model: &ModelSpec, samples: usize, radius: f64, seed: u64, r: f64) -> Result<[f64; 4]> {
    let d = model.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = [0.0f64; 4];
    let buf = |x: &[f64], f: &MeasureFeatures| -> Result<[Vec<f64>; 4]> {
        let mut b = vec![0.0; d];
        let mut s = vec![0.0; d * model.noise_dim];
        model.drift_into(x, f, &mut b)?;
        model.diffusion_into(x, f, &mut s)?;
        Ok([b, s, vec![model.running(x, f)?], vec![model.terminal_value(f)?]])
    };
    for k in 0..samples {
        let x = ball_point(&mut rng, d, radius);
        let atoms: Vec<f64> = (0..PROBE_ATOMS).flat_map(|_| ball_point(&mut rng, d, radius)).collect();
        // Alternate between moving the point, the measure, or both.
        let scale = 0.1 * radius * rng.random::<f64>().max(1e-3);
        let (y, other) = match k % 3 {
            0 => (perturb(&mut rng, &x, scale), atoms.clone()),
            1 => (x.clone(), perturb(&mut rng, &atoms, scale)),
            _ => (perturb(&mut rng, &x, scale), perturb(&mut rng, &atoms, scale)),
        };
        let mu = EmpiricalMeasure::new(d, atoms)?;
        let nu = EmpiricalMeasure::new(d, other)?;
        let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dm = wasserstein_r(&mu, &nu, r)?;
        let (fa, fb) = (MeasureFeatures::of(&mu), MeasureFeatures::of(&nu));
        let (va, vb) = (buf(&x, &fa)?, buf(&y, &fb)?);
        for c in 0..4 {
            let denom = if c == 3 { dm } else { dx + dm };
            if denom < 1e-12 {
                continue;
            }
            let diff = va[c].iter().zip(&vb[c]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            best[c] = best[c].max(diff / denom);
        }
    }
    Ok(best)
}
