//! Monte Carlo evaluation of the particle cost `J_n` and of the lifted cost
//! `J`, using left-endpoint quadrature on the simulation grid.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::MeasureFeatures;
use crate::measure::VectorTuple;
use crate::model::ModelSpec;
use crate::sim::{simulate_lifted_atoms, simulate_particles, ControlPolicy, LiftedPolicy, PathBundle, SimConfig};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub running_l1: f64,
    pub running_l2: f64,
    pub terminal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    /// Always `running_l1 + running_l2 + terminal` of the breakdown.
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub breakdown: CostBreakdown,
}

/// Per-path cost contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCosts {
    pub running_l1: Vec<f64>,
    pub running_l2: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl PathCosts {
    pub fn totals(&self) -> Vec<f64> {
        self.running_l1
            .iter()
            .zip(&self.running_l2)
            .zip(&self.terminal)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }

    pub fn estimate(&self) -> CostEstimate {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let breakdown = CostBreakdown {
            running_l1: mean(&self.running_l1),
            running_l2: mean(&self.running_l2),
            terminal: mean(&self.terminal),
        };
        let totals = Estimate::from_samples(&self.totals());
        CostEstimate {
            mean: breakdown.running_l1 + breakdown.running_l2 + breakdown.terminal,
            std_error: totals.std_error,
            n_paths: self.terminal.len(),
            breakdown,
        }
    }
}

fn mean_control_cost(model: &ModelSpec, a: &[f64]) -> f64 {
    let d = model.dim;
    let n = a.len() / d;
    let mut s = 0.0;
    for ai in a.chunks_exact(d) {
        s += model.control_cost(ai);
    }
    s / n as f64
}

/// Costs along particle paths: `Σ_k dt (1/n) Σ_i (l_1 + l_2) + U_T(μ_{X^K})`.
pub fn particle_path_costs(model: &ModelSpec, bundle: &PathBundle) -> Result<PathCosts> {
    bundle.ensure_valid()?;
    let (d, steps, dt) = (model.dim, bundle.steps(), bundle.config.dt());
    let mut out = PathCosts {
        running_l1: Vec::with_capacity(bundle.n_paths()),
        running_l2: Vec::with_capacity(bundle.n_paths()),
        terminal: Vec::with_capacity(bundle.n_paths()),
    };
    for p in 0..bundle.n_paths() {
        let (mut l1, mut l2) = (0.0, 0.0);
        for k in 0..steps {
            let x = bundle.state(p, k);
            let n = x.len() / d;
            let f = MeasureFeatures::of_atoms(d, x);
            let mut s = 0.0;
            for xi in x.chunks_exact(d) {
                s += model.running(xi, &f)?;
            }
            l1 += dt * (s / n as f64);
            l2 += dt * mean_control_cost(model, bundle.control(p, k));
        }
        let f = MeasureFeatures::of_atoms(d, bundle.state(p, steps));
        out.running_l1.push(l1);
        out.running_l2.push(l2);
        out.terminal.push(model.terminal_value(&f)?);
    }
    Ok(out)
}

/// Costs along lifted paths: `Σ_k dt (L_1(X^k) + L_2(a^k)) + U_T(X^K)`.
pub fn lifted_path_costs(model: &ModelSpec, bundle: &PathBundle) -> Result<PathCosts> {
    bundle.ensure_valid()?;
    let (d, steps, dt) = (model.dim, bundle.steps(), bundle.config.dt());
    let mut out = PathCosts {
        running_l1: Vec::with_capacity(bundle.n_paths()),
        running_l2: Vec::with_capacity(bundle.n_paths()),
        terminal: Vec::with_capacity(bundle.n_paths()),
    };
    for p in 0..bundle.n_paths() {
        let (mut l1, mut l2) = (0.0, 0.0);
        for k in 0..steps {
            let atoms = bundle.state(p, k);
            let f = MeasureFeatures::of_atoms(d, atoms);
            l1 += dt * model.lifted_running(atoms, &f)?;
            l2 += dt * mean_control_cost(model, bundle.control(p, k));
        }
        let atoms = VectorTuple::new(d, bundle.state(p, steps).to_vec())?;
        out.running_l1.push(l1);
        out.running_l2.push(l2);
        out.terminal.push(model.lifted_coefficients(&atoms)?.terminal);
    }
    Ok(out)
}

/// `J_n(t0, x0; a)`.
pub fn cost_finite(model: &ModelSpec, cfg: &SimConfig, x0: &VectorTuple, policy: &ControlPolicy) -> Result<CostEstimate> {
    let bundle = simulate_particles(model, cfg, x0, policy)?;
    Ok(particle_path_costs(model, &bundle)?.estimate())
}

/// `J(t0, X; a^n)` for the lift `X` of `atoms`.
pub fn cost_lifted(model: &ModelSpec, cfg: &SimConfig, atoms: &VectorTuple, policy: &LiftedPolicy) -> Result<CostEstimate> {
    let bundle = simulate_lifted_atoms(model, cfg, atoms, policy)?;
    Ok(lifted_path_costs(model, &bundle)?.estimate())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedCost {
    pub policy_id: String,
    pub estimate: CostEstimate,
    /// Paired estimate of `J(policy) - J(best)`.
    pub excess_over_best: Estimate,
}

#[derive(Debug, Clone)]
pub struct PolicyComparison {
    /// Sorted by mean cost, lowest first.
    pub ranked: Vec<RankedCost>,
    totals: Vec<(String, Vec<f64>)>,
}

impl PolicyComparison {
    /// Paired estimate of `J(a) - J(b)` on the common noise.
    pub fn paired_difference(&self, a: &str, b: &str) -> Option<Estimate> {
        let find = |id: &str| self.totals.iter().find(|(k, _)| k == id).map(|(_, v)| v);
        Some(Estimate::paired(find(a)?, find(b)?))
    }

    /// Per-path total costs of one policy, in path order.
    pub fn totals(&self, id: &str) -> Option<&[f64]> {
        self.totals.iter().find(|(k, _)| k == id).map(|(_, v)| v.as_slice())
    }

    pub fn get(&self, id: &str) -> Option<&RankedCost> {
        self.ranked.iter().find(|r| r.policy_id == id)
    }
}

/// Evaluates every policy on the same Wiener increments.
pub fn policy_compare(
    model: &ModelSpec,
    cfg: &SimConfig,
    x0: &VectorTuple,
    policies: &[(String, ControlPolicy)],
) -> Result<PolicyComparison> {
    if policies.len() < 2 {
        return Err(Error::Domain("policy comparison needs at least two policies".into()));
    }
    let mut evaluated = Vec::with_capacity(policies.len());
    for (id, policy) in policies {
        let bundle = simulate_particles(model, cfg, x0, policy)?;
        let costs = particle_path_costs(model, &bundle)?;
        evaluated.push((id.clone(), costs.estimate(), costs.totals()));
    }
    let best = evaluated
        .iter()
        .min_by(|a, b| a.1.mean.total_cmp(&b.1.mean))
        .map(|e| e.2.clone())
        .unwrap_or_default();
    let mut ranked: Vec<RankedCost> = evaluated
        .iter()
        .map(|(id, est, totals)| RankedCost {
            policy_id: id.clone(),
            estimate: est.clone(),
            excess_over_best: Estimate::paired(totals, &best),
        })
        .collect();
    ranked.sort_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean));
    Ok(PolicyComparison {
        ranked,
        totals: evaluated.into_iter().map(|(id, _, t)| (id, t)).collect(),
    })
}

/// FNV-1a over the bit patterns of the coordinates, for experiment tables.
pub fn tuple_hash(x: &VectorTuple) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x.as_slice() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

pub const EXPERIMENT_HEADER: &str = "model_id,n,t0,x0_hash,policy_id,mean,std_error,n_paths,dt";

/// One CSV row matching [`EXPERIMENT_HEADER`].
pub fn write_experiment_row(
    mut out: impl Write,
    model: &ModelSpec,
    cfg: &SimConfig,
    x0: &VectorTuple,
    policy_id: &str,
    est: &CostEstimate,
) -> io::Result<()> {
    writeln!(
        out,
        "{},{},{:?},{},{},{:?},{:?},{},{:?}",
        model.id,
        x0.len(),
        cfg.t0,
        tuple_hash(x0),
        policy_id,
        est.mean,
        est.std_error,
        est.n_paths,
        cfg.dt()
    )
}
