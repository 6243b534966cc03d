//! Numerical probes of the structural properties of the value functions and
//! of the cost functionals: duplication consistency, the finite/lifted cost
//! identity, semiconcavity, permutation invariance, time regularity and
//! optimality of synthesized feedback.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::{cost_finite, cost_lifted, policy_compare, CostEstimate, PolicyComparison};
use crate::error::{Error, Result};
use crate::hjb::{riccati_lq_value, solve_hjb, synthesize_feedback, GridSpec, GridValueFunction};
use crate::measure::{wasserstein_r, EmpiricalMeasure, VectorTuple};
use crate::model::ModelSpec;
use crate::sim::{simulate_lifted_atoms, simulate_particles, ControlPolicy, LiftedPolicy, SimConfig};
use crate::stats::Estimate;

/// Direction of the pass test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `statistic ≤ threshold`
    AtMost,
    /// `statistic ≥ threshold`
    AtLeast,
}

impl Comparison {
    pub fn holds(self, statistic: f64, threshold: f64) -> bool {
        match self {
            Self::AtMost => statistic <= threshold,
            Self::AtLeast => statistic >= threshold,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub grid_id: Option<String>,
    pub seeds: Vec<u64>,
}

impl Provenance {
    pub fn model(model: &ModelSpec) -> Self {
        Self {
            model_id: model.id.clone(),
            ..Self::default()
        }
    }

    pub fn with_grid(mut self, grid: &GridSpec) -> Self {
        self.grid_id = Some(grid.id());
        self
    }

    pub fn with_seeds(mut self, seeds: Vec<u64>) -> Self {
        self.seeds = seeds;
        self
    }
}

/// Outcome of one probe. `pass` is derived from `statistic`, `threshold`
/// and `comparison` only; a non-finite statistic never passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub samples: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub pass: bool,
    /// Report-only probes never fail a run.
    pub hard_assert: bool,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

impl ProbeReport {
    pub fn new(
        probe: impl Into<String>,
        samples: usize,
        statistic: f64,
        threshold: f64,
        comparison: Comparison,
        provenance: Provenance,
    ) -> Self {
        Self {
            probe: probe.into(),
            samples,
            statistic,
            threshold,
            comparison,
            pass: statistic.is_finite() && comparison.holds(statistic, threshold),
            hard_assert: true,
            provenance,
            details: BTreeMap::new(),
        }
    }

    pub fn advisory(mut self) -> Self {
        self.hard_assert = false;
        self
    }

    pub fn detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }
}

pub const SUMMARY_HEADER: &str = "probe,statistic,threshold,pass";

pub fn write_summary_csv(reports: &[ProbeReport], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for r in reports {
        writeln!(out, "{},{:?},{:?},{}", r.probe, r.statistic, r.threshold, r.pass)?;
    }
    Ok(())
}

/// `z`-score that stays finite for serialization.
fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff > 0.0 {
        f64::MAX
    } else if diff < 0.0 {
        f64::MIN
    } else {
        0.0
    }
}

/// Values `V(t, X)` at atom tuples.
pub trait ValueSource: Sync {
    fn value(&self, t: f64, x: &VectorTuple) -> Result<f64>;
    fn label(&self) -> String;
}

impl ValueSource for GridValueFunction {
    fn value(&self, t: f64, x: &VectorTuple) -> Result<f64> {
        if x.as_slice().len() != self.axes() {
            return Err(Error::Shape(format!(
                "grid has {} axes, state has {} coordinates",
                self.axes(),
                x.as_slice().len()
            )));
        }
        Ok(self.value_at(t, x.as_slice()))
    }

    fn label(&self) -> String {
        format!("grid {}", self.spec.id())
    }
}

/// Decoupled LQ value from the Riccati oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqOracle {
    pub sigma: f64,
    pub kappa: f64,
    pub horizon: f64,
}

impl ValueSource for LqOracle {
    fn value(&self, t: f64, x: &VectorTuple) -> Result<f64> {
        riccati_lq_value(self.sigma, self.kappa, self.horizon, t, x)
    }

    fn label(&self) -> String {
        format!("riccati sigma={} kappa={} T={}", self.sigma, self.kappa, self.horizon)
    }
}

#[allow(clippy::too_many_arguments)]
/// Solves `u_n` and `u_{mn}` independently and reports
/// `max |u_{mn}(t, dup(x, m)) - u_n(t, x)|` over the core test points and `times`.
/// The difference at `t = T` alone is recorded as the `terminal` detail.
pub fn duplication_consistency(
    model: &ModelSpec,
    base_n: usize,
    m: usize,
    base_grid: &GridSpec,
    dup_grid: &GridSpec,
    points: &[VectorTuple],
    times: &[f64],
    threshold: f64,
) -> Result<ProbeReport> {
    let d = model.dim;
    if m == 0 || base_n * m * d > crate::hjb::MAX_GRID_AXES {
        return Err(Error::Shape(format!(
            "duplication needs base_n·m·d ≤ {}, got {}·{}·{}",
            crate::hjb::MAX_GRID_AXES,
            base_n,
            m,
            d
        )));
    }
    let base = solve_hjb(model, base_n, base_grid)?;
    let dup = solve_hjb(model, base_n * m, dup_grid)?;
    let mut worst: f64 = 0.0;
    let mut terminal: f64 = 0.0;
    let mut samples = 0;
    for x in points {
        let xd = x.duplicate_atoms(m)?;
        if !base.in_core(x.as_slice()) || !dup.in_core(xd.as_slice()) {
            return Err(Error::Domain(format!("test point {:?} lies outside the core region", x.as_slice())));
        }
        for &t in times {
            worst = worst.max((dup.value(t, &xd)? - base.value(t, x)?).abs());
            samples += 1;
        }
        terminal = terminal.max((dup.value(dup_grid.horizon, &xd)? - base.value(base_grid.horizon, x)?).abs());
    }
    let prov = Provenance::model(model);
    Ok(ProbeReport::new(
        format!("duplication_consistency n={base_n} m={m}"),
        samples,
        worst,
        threshold,
        Comparison::AtMost,
        Provenance {
            grid_id: Some(format!("{} | {}", base_grid.id(), dup_grid.id())),
            ..prov
        },
    )
    .detail("terminal", terminal))
}

/// Relative tolerance of the cost identity.
pub const COST_IDENTITY_TOLERANCE: f64 = 1e-12;

/// `|J_n(t, x; a) - J(t, X; a^n)| / max(|J_n|, |J|)` for the lift `a^n` of `a`.
pub fn cost_identity_check(model: &ModelSpec, cfg: &SimConfig, x0: &VectorTuple, policy: &ControlPolicy) -> Result<ProbeReport> {
    let finite = cost_finite(model, cfg, x0, policy)?;
    let lifted = cost_lifted(model, cfg, x0, &LiftedPolicy::lift(policy.clone()))?;
    let scale = finite.mean.abs().max(lifted.mean.abs());
    let diff = (finite.mean - lifted.mean).abs();
    let rel = if scale > 0.0 { diff / scale } else { diff };
    Ok(ProbeReport::new(
        "cost_identity",
        cfg.n_paths,
        rel,
        COST_IDENTITY_TOLERANCE,
        Comparison::AtMost,
        Provenance::model(model).with_seeds(vec![cfg.seed]),
    )
    .detail("finite", finite.mean)
    .detail("lifted", lifted.mean))
}

/// Extremes of `S(λ, X, Y) / (λ(1-λ)‖X - Y‖²)` with
/// `S = λV(X) + (1-λ)V(Y) - V(λX + (1-λ)Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiconcavityEstimate {
    /// Semiconcavity constant estimate.
    pub sup: f64,
    /// Semiconvexity estimate.
    pub inf: f64,
    pub samples: usize,
    pub skipped: usize,
}

impl SemiconcavityEstimate {
    /// Hard check that both extremes equal `expected` within `tol`.
    pub fn report(&self, expected: f64, tol: f64, provenance: Provenance) -> ProbeReport {
        let dev = (self.sup - expected).abs().max((self.inf - expected).abs());
        ProbeReport::new("semiconcavity", self.samples, dev, tol, Comparison::AtMost, provenance)
            .detail("sup", self.sup)
            .detail("inf", self.inf)
            .detail("expected", expected)
    }
}

/// Pairs with `‖X - Y‖ < 1e-8`, and `λ ∈ {0, 1}`, are skipped.
pub fn semiconcavity_probe(
    source: &dyn ValueSource,
    t: f64,
    pairs: &[(VectorTuple, VectorTuple)],
    lambdas: &[f64],
) -> Result<SemiconcavityEstimate> {
    let mut est = SemiconcavityEstimate {
        sup: f64::NEG_INFINITY,
        inf: f64::INFINITY,
        samples: 0,
        skipped: 0,
    };
    for (x, y) in pairs {
        let dist = x.rdistance(y, 2.0)?;
        let norm_sq = dist * dist;
        if dist < 1e-8 {
            est.skipped += lambdas.len();
            continue;
        }
        let (vx, vy) = (source.value(t, x)?, source.value(t, y)?);
        for &lambda in lambdas {
            if lambda <= 0.0 || lambda >= 1.0 {
                est.skipped += 1;
                continue;
            }
            let mid = source.value(t, &x.convex_combination(y, lambda)?)?;
            let s = lambda * vx + (1.0 - lambda) * vy - mid;
            let q = s / (lambda * (1.0 - lambda) * norm_sq);
            est.sup = est.sup.max(q);
            est.inf = est.inf.min(q);
            est.samples += 1;
        }
    }
    Ok(est)
}

/// `max |u(t, x) - u(t, σx)|` over core nodes of every stored slice, where `σ`
/// swaps particles 0 and 1.
pub fn permutation_residual(u: &GridValueFunction) -> Result<ProbeReport> {
    if u.n < 2 {
        return Err(Error::Shape("permutation residual needs at least two particles".into()));
    }
    let d = u.d;
    let core = u.core_nodes();
    let mut worst: f64 = 0.0;
    for j in 0..u.slice_count() {
        let v = u.slice(j);
        for &k in &core {
            let mut m = u.multi_index(k);
            for c in 0..d {
                m.swap(c, d + c);
            }
            worst = worst.max((v[k] - v[u.node_index(&m)]).abs());
        }
    }
    Ok(ProbeReport::new(
        "permutation_invariance",
        core.len() * u.slice_count(),
        worst,
        1e-9,
        Comparison::AtMost,
        Provenance::model(&u.model).with_grid(&u.spec),
    ))
}

/// Maximal time-Hölder ratio for one gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderRow {
    pub gap_steps: usize,
    pub gap: f64,
    pub ratio: f64,
}

/// `max |u(s,x) - u(t,x)| / ((1 + |x|_r) √|s - t|)` over core nodes and pairs
/// of slices `gap` steps apart, for dyadic gaps from `min_gap_steps` up. The
/// report asserts that the ratio does not increase as the gap shrinks.
pub fn time_holder_probe(u: &GridValueFunction, r: f64, min_gap_steps: usize) -> Result<(Vec<HolderRow>, ProbeReport)> {
    let core = u.core_nodes();
    let weights: Vec<f64> = core
        .iter()
        .map(|&k| {
            let x = VectorTuple::new(u.d, u.node_coords(k))?;
            Ok(1.0 + x.rnorm(r)?)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut gap = min_gap_steps.max(1);
    while gap <= u.steps {
        let mut ratio: f64 = 0.0;
        let mut start = 0;
        while start + gap <= u.steps {
            let (Some(a), Some(b)) = (u.slice_at_step(start), u.slice_at_step(start + gap)) else {
                return Err(Error::Domain(format!(
                    "time-Hölder probe needs slices {start} and {} to be stored",
                    start + gap
                )));
            };
            for (&k, w) in core.iter().zip(&weights) {
                ratio = ratio.max((a[k] - b[k]).abs() / w);
            }
            start += gap;
        }
        let dt = gap as f64 * u.dt;
        rows.push(HolderRow {
            gap_steps: gap,
            gap: dt,
            ratio: ratio / dt.sqrt(),
        });
        gap *= 2;
    }
    // Ratio of each row to the next-larger gap; ≤ 1 means non-increasing as gaps shrink.
    let growth = rows
        .windows(2)
        .map(|w| w[0].ratio / w[1].ratio)
        .fold(0.0, f64::max);
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let report = ProbeReport::new(
        "time_holder",
        rows.len(),
        growth,
        1.0 + 1e-9,
        Comparison::AtMost,
        Provenance::model(&u.model).with_grid(&u.spec),
    )
    .detail("max_ratio", max_ratio);
    Ok((rows, report))
}

/// Offsets of the eight perturbed policies: `±0.1`, `±0.2` on every axis,
/// uniformly and with alternating signs across axes.
pub fn perturbation_offsets(axes: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for c in [0.1, -0.1, 0.2, -0.2] {
        out.push(vec![c; axes]);
    }
    for c in [0.1, -0.1, 0.2, -0.2] {
        out.push((0..axes).map(|a| if a % 2 == 0 { c } else { -c }).collect());
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRoundtrip {
    /// Lifted and finite trajectories coincide.
    pub state_identity: ProbeReport,
    /// No perturbed policy beats the feedback by more than two paired standard errors.
    pub perturbation: ProbeReport,
    pub feedback_cost: CostEstimate,
    pub zero_cost: CostEstimate,
    /// Paired `J(zero) - J(feedback)`.
    pub zero_gap: Estimate,
    /// Every policy's per-path costs on the shared noise.
    #[serde(skip)]
    pub comparison: Option<PolicyComparison>,
}

pub fn feedback_roundtrip(
    model: &ModelSpec,
    cfg: &SimConfig,
    x0: &VectorTuple,
    u: Arc<GridValueFunction>,
) -> Result<FeedbackRoundtrip> {
    let prov = Provenance::model(model).with_grid(&u.spec).with_seeds(vec![cfg.seed]);
    let feedback = synthesize_feedback(u);

    let finite = simulate_particles(model, cfg, x0, &feedback)?;
    let lifted = simulate_lifted_atoms(model, cfg, x0, &LiftedPolicy::lift(feedback.clone()))?;
    finite.ensure_valid()?;
    lifted.ensure_valid()?;
    let state_diff = finite
        .states
        .iter()
        .zip(&lifted.states)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let state_identity = ProbeReport::new(
        "feedback_lift_project",
        cfg.n_paths,
        state_diff,
        0.0,
        Comparison::AtMost,
        prov.clone(),
    );

    let mut policies = vec![
        ("feedback".to_string(), feedback.clone()),
        ("zero".to_string(), ControlPolicy::Zero),
    ];
    for (k, off) in perturbation_offsets(x0.as_slice().len()).into_iter().enumerate() {
        policies.push((format!("perturbed{k}"), feedback.offset(off)));
    }
    let cmp = policy_compare(model, cfg, x0, &policies)?;
    let mut worst = f64::MIN;
    for (id, _) in policies.iter().skip(2) {
        let diff = cmp
            .paired_difference("feedback", id)
            .ok_or_else(|| Error::Domain(format!("missing policy {id}")))?;
        worst = worst.max(z_score(diff.mean, diff.std_error));
    }
    let perturbation = ProbeReport::new("feedback_perturbation", policies.len() - 2, worst, 2.0, Comparison::AtMost, prov);
    let get = |id: &str| {
        cmp.get(id)
            .map(|r| r.estimate.clone())
            .ok_or_else(|| Error::Domain(format!("missing policy {id}")))
    };
    Ok(FeedbackRoundtrip {
        state_identity,
        perturbation,
        feedback_cost: get("feedback")?,
        zero_cost: get("zero")?,
        zero_gap: cmp
            .paired_difference("zero", "feedback")
            .ok_or_else(|| Error::Domain("missing policy zero".into()))?,
        comparison: Some(cmp),
    })
}

/// How `u_n(t, x(n))` is obtained in a convergence sweep.
pub enum SweepEstimator<'a> {
    /// Independent grid solve per `n`; the closure supplies the grid for `n`.
    Grid { grid: &'a dyn Fn(usize) -> Result<GridSpec> },
    /// Exact value from an oracle.
    Oracle(&'a dyn ValueSource),
    /// Monte Carlo cost of a policy: an upper bound on `u_n`.
    MonteCarlo {
        cfg: SimConfig,
        policy: &'a dyn Fn(usize) -> Result<ControlPolicy>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub value: Estimate,
    /// `|value - previous value|`; absent for the first row.
    pub gap: Option<f64>,
    /// `d_r(μ_{x(n)}, μ_target)` when it can be computed.
    pub distance_to_target: Option<f64>,
}

/// `u_n(t, x(n))` along a family of atom tuples.
pub fn convergence_sweep(
    model: &ModelSpec,
    t: f64,
    family: &[VectorTuple],
    target: Option<&EmpiricalMeasure>,
    r: f64,
    estimator: &SweepEstimator,
) -> Result<Vec<SweepRow>> {
    let mut rows: Vec<SweepRow> = Vec::with_capacity(family.len());
    for x in family {
        let n = x.len();
        let value = match estimator {
            SweepEstimator::Grid { grid } => Estimate::exact(solve_hjb(model, n, &grid(n)?)?.value(t, x)?),
            SweepEstimator::Oracle(src) => Estimate::exact(src.value(t, x)?),
            SweepEstimator::MonteCarlo { cfg, policy } => {
                let mut cfg = *cfg;
                cfg.t0 = t;
                let est = cost_finite(model, &cfg, x, &policy(n)?)?;
                Estimate {
                    mean: est.mean,
                    std_error: est.std_error,
                    samples: est.n_paths,
                }
            }
        };
        let gap = rows.last().map(|p| (value.mean - p.value.mean).abs());
        let distance_to_target = target.and_then(|mu| wasserstein_r(&x.to_measure(), mu, r).ok());
        rows.push(SweepRow {
            n,
            value,
            gap,
            distance_to_target,
        });
    }
    Ok(rows)
}
