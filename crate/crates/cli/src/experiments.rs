//! Dispatch from a loaded config to the numerical modules.

use std::sync::Arc;

use anyhow::{Context, Result};
use mfc_core::cost::{write_experiment_row, EXPERIMENT_HEADER};
use mfc_core::hjb::lq_closed_form;
use mfc_core::model::assumption_probe;
use mfc_core::mollify::{
    convexity_preservation_probe, lipschitz_preservation_probe, uniform_convergence_probe, Point, Segment,
};
use mfc_core::sim::simulate_particles;
use mfc_core::verify::{
    convergence_sweep, cost_identity_check, duplication_consistency, feedback_roundtrip, permutation_residual,
    semiconcavity_probe, time_holder_probe, Comparison, LqOracle, Provenance, SweepEstimator, SUMMARY_HEADER,
};
use mfc_core::{
    policy_compare, solve_hjb, synthesize_feedback, BaseFunctional, ControlPolicy, GridSpec, ModelSpec, ProbeReport,
    SmoothedFunctional, VectorTuple,
};
use serde_json::{json, Value};

use crate::config::{
    lq_sigma, EstimatorSpec, Experiment, FunctionalSpec, HjbParams, HjbProbe, Loaded, MollifyParams, MollifyProbe,
    PointSpec, PolicySpec, SimProbe, SimulateParams, SweepParams, VerifyParams, VerifyProbe,
};

/// A CSV-shaped table; cells are preformatted.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &str) -> Self {
        Self {
            header: header.split(',').map(String::from).collect(),
            rows: Vec::new(),
        }
    }

    fn from_csv(text: &str) -> Self {
        let mut lines = text.lines();
        let mut table = Self::new(lines.next().unwrap_or_default());
        table.rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        table
    }

    fn probes(reports: &[ProbeReport]) -> Self {
        let mut out = Vec::new();
        mfc_core::verify::write_summary_csv(reports, &mut out).expect("writing to memory");
        let table = Self::from_csv(&String::from_utf8_lossy(&out));
        debug_assert_eq!(table.header.join(","), SUMMARY_HEADER);
        table
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Array of objects keyed by the header; numeric cells stay numbers.
    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|row| {
                let obj = self
                    .header
                    .iter()
                    .zip(row)
                    .map(|(k, v)| {
                        let cell = match (v.parse::<i64>(), v.parse::<f64>()) {
                            (Ok(i), _) => json!(i),
                            (_, Ok(x)) if x.is_finite() => json!(x),
                            _ => match v.as_str() {
                                "true" => json!(true),
                                "false" => json!(false),
                                _ => json!(v),
                            },
                        };
                        (k.clone(), cell)
                    })
                    .collect::<serde_json::Map<_, _>>();
                Value::Object(obj)
            })
            .collect();
        Value::Array(rows)
    }
}

/// Everything an experiment produces before it is written out.
#[derive(Debug, Default)]
pub struct Outcome {
    pub table: Table,
    pub probes: Vec<ProbeReport>,
    /// Kind-specific results for the summary.
    pub data: Value,
    /// Extra files as `(name, contents)`.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

impl Outcome {
    /// True when every hard-assert probe passed.
    pub fn pass(&self) -> bool {
        self.probes.iter().all(|p| p.pass || !p.hard_assert)
    }
}

pub fn run(loaded: &Loaded, seed: u64) -> Result<Outcome> {
    let model = loaded.model.as_ref();
    match &loaded.config.experiment {
        Experiment::Simulate(p) => simulate(model.context("model")?, p, seed),
        Experiment::SolveHjb(p) => solve(model.context("model")?, p, seed),
        Experiment::Verify(p) => verify(model.context("model")?, p, seed),
        Experiment::Mollify(p) => mollify(p, seed),
        Experiment::Sweep(p) => sweep(model.context("model")?, p, seed),
    }
}

fn build_policy(model: &ModelSpec, spec: &PolicySpec, n: usize, steps: usize) -> Result<ControlPolicy> {
    Ok(match spec {
        PolicySpec::Zero { .. } => ControlPolicy::Zero,
        PolicySpec::Constant { value, .. } => {
            let width = n * model.dim;
            let row: Vec<f64> = value.iter().cycle().take(width).copied().collect();
            ControlPolicy::open_loop(vec![row; steps])
        }
        PolicySpec::Feedback { grid, id } => {
            let u = solve_hjb(model, n, grid).with_context(|| format!("grid solve for policy `{id}`"))?;
            synthesize_feedback(u)
        }
    })
}

fn coords(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(";")
}

fn simulate(model: &ModelSpec, p: &SimulateParams, seed: u64) -> Result<Outcome> {
    let cfg = p.sim.config(seed)?;
    let n = p.x0.len();
    let policies = p
        .policies
        .iter()
        .map(|s| Ok((s.id().to_string(), build_policy(model, s, n, cfg.steps)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Outcome {
        table: Table::new(EXPERIMENT_HEADER),
        ..Outcome::default()
    };
    let mut csv = Vec::new();
    let mut ranking = Vec::new();
    if policies.len() >= 2 {
        let cmp = policy_compare(model, &cfg, &p.x0, &policies)?;
        for (id, _) in &policies {
            let r = cmp.get(id).context("policy missing from comparison")?;
            write_experiment_row(&mut csv, model, &cfg, &p.x0, id, &r.estimate)?;
        }
        for r in &cmp.ranked {
            ranking.push(json!({
                "policy_id": r.policy_id,
                "mean": r.estimate.mean,
                "excess_over_best": r.excess_over_best,
            }));
        }
    } else {
        let (id, policy) = &policies[0];
        let est = mfc_core::cost_finite(model, &cfg, &p.x0, policy)?;
        write_experiment_row(&mut csv, model, &cfg, &p.x0, id, &est)?;
    }
    out.table.rows = Table::from_csv(&format!("{EXPERIMENT_HEADER}\n{}", String::from_utf8(csv)?)).rows;
    for probe in &p.probes {
        let SimProbe::CostIdentity { policy } = probe;
        let (_, pol) = policies.iter().find(|(id, _)| id == policy).context("unknown policy")?;
        let mut report = cost_identity_check(model, &cfg, &p.x0, pol)?;
        report.probe = format!("cost_identity {policy}");
        out.probes.push(report);
    }
    if p.dump_paths {
        for (id, pol) in &policies {
            let bundle = simulate_particles(model, &cfg, &p.x0, pol)?;
            let mut buf = Vec::new();
            bundle.write_csv(&mut buf)?;
            out.artifacts.push((format!("paths_{id}.csv"), buf));
        }
    }
    out.data = json!({ "ranking": ranking });
    Ok(out)
}

fn solve(model: &ModelSpec, p: &HjbParams, seed: u64) -> Result<Outcome> {
    let u = Arc::new(solve_hjb(model, p.n, &p.grid)?);
    let prov = Provenance::model(model).with_grid(&p.grid);
    let times = if p.times.is_empty() { vec![p.grid.t0] } else { p.times.clone() };
    let mut out = Outcome {
        table: Table::new("t,x,value"),
        ..Outcome::default()
    };
    for &t in &times {
        for x in &p.points {
            let v = u.value_at(t, x.as_slice());
            out.table.rows.push(vec![format!("{t:?}"), coords(x.as_slice()), format!("{v:?}")]);
        }
    }
    for probe in &p.probes {
        match probe {
            HjbProbe::Riccati { tolerance, core_radius } => {
                let sigma = lq_sigma(Some(model)).context("riccati probe needs a decoupled LQ model")?;
                let t = p.grid.t0;
                let mut err: f64 = 0.0;
                let mut samples = 0;
                for node in 0..u.node_count() {
                    let x = u.node_coords(node);
                    if x.iter().all(|c| c.abs() <= core_radius + 1e-12) {
                        let exact = lq_closed_form(sigma, model.kappa, p.grid.horizon, t, &VectorTuple::new(1, x.clone())?);
                        err = err.max((u.value_at(t, &x) - exact).abs());
                        samples += 1;
                    }
                }
                let ones = VectorTuple::new(1, vec![1.0; p.n])?;
                out.probes.push(
                    ProbeReport::new("riccati", samples, err, *tolerance, Comparison::AtMost, prov.clone())
                        .detail("u(t0,1)", u.value_at(t, ones.as_slice()))
                        .detail("oracle(t0,1)", lq_closed_form(sigma, model.kappa, p.grid.horizon, t, &ones)),
                );
            }
            HjbProbe::Permutation => out.probes.push(permutation_residual(&u)?),
            HjbProbe::TimeHolder { r, min_gap_steps } => {
                let (rows, report) = time_holder_probe(&u, *r, *min_gap_steps)?;
                out.data["time_holder"] = serde_json::to_value(rows)?;
                out.probes.push(report);
            }
            HjbProbe::Semiconcavity {
                t,
                pairs,
                lambdas,
                expected,
                tolerance,
            } => {
                let est = semiconcavity_probe(u.as_ref(), t.unwrap_or(p.grid.t0), pairs, lambdas)?;
                let report = match expected {
                    Some(e) => est.report(*e, *tolerance, prov.clone()),
                    None => ProbeReport::new("semiconcavity", est.samples, est.sup, f64::INFINITY, Comparison::AtMost, prov.clone())
                        .detail("sup", est.sup)
                        .detail("inf", est.inf)
                        .advisory(),
                };
                out.probes.push(report);
            }
            HjbProbe::FeedbackRoundtrip { sim, x0 } => {
                let rt = feedback_roundtrip(model, &sim.config(seed)?, x0, Arc::clone(&u))?;
                out.data["feedback_roundtrip"] = json!({
                    "feedback_cost": rt.feedback_cost,
                    "zero_cost": rt.zero_cost,
                    "zero_gap": rt.zero_gap,
                });
                out.probes.push(rt.state_identity);
                out.probes.push(rt.perturbation);
            }
        }
    }
    if let Some(every) = p.dump_every {
        let mut buf = Vec::new();
        u.write_csv(&mut buf, every)?;
        out.artifacts.push(("value.csv".into(), buf));
        out.artifacts.push(("grid.json".into(), serde_json::to_vec_pretty(&u.sidecar())?));
    }
    out.data["dt"] = json!(u.dt);
    out.data["steps"] = json!(u.steps);
    Ok(out)
}

fn verify(model: &ModelSpec, p: &VerifyParams, seed: u64) -> Result<Outcome> {
    let mut probes = Vec::new();
    for probe in &p.probes {
        match probe {
            VerifyProbe::CostIdentity { sim, x0, policy } => {
                let cfg = sim.config(seed)?;
                let pol = build_policy(model, policy, x0.len(), cfg.steps)?;
                probes.push(cost_identity_check(model, &cfg, x0, &pol)?);
            }
            VerifyProbe::Duplication {
                base_n,
                m,
                base_grid,
                dup_grid,
                points,
                times,
                threshold,
            } => probes.push(duplication_consistency(model, *base_n, *m, base_grid, dup_grid, points, times, *threshold)?),
            VerifyProbe::Assumptions { samples, radius, r } => {
                let report = assumption_probe(model, *samples, *radius, seed, *r)?;
                for e in &report.estimates {
                    probes.push(
                        ProbeReport::new(
                            format!("assumptions {}", e.coefficient),
                            *samples,
                            e.at_double_radius,
                            f64::INFINITY,
                            Comparison::AtMost,
                            Provenance::model(model).with_seeds(vec![seed]),
                        )
                        .detail("at_radius", e.at_radius)
                        .detail("globally_lipschitz", if e.globally_lipschitz { 1.0 } else { 0.0 })
                        .advisory(),
                    );
                }
            }
        }
    }
    Ok(Outcome {
        table: Table::probes(&probes),
        probes,
        data: Value::Null,
        artifacts: Vec::new(),
    })
}

fn functional(spec: &FunctionalSpec) -> Result<BaseFunctional> {
    Ok(match (&spec.registry, &spec.expr) {
        (Some(name), _) => BaseFunctional::registry(name, spec.dim)?,
        (None, Some(expr)) => {
            let name = spec.name.as_deref().unwrap_or("custom");
            BaseFunctional::new(name, spec.dim, expr, spec.lipschitz, spec.convex_lift)?
        }
        (None, None) => anyhow::bail!("functional needs `registry` or `expr`"),
    })
}

fn point(p: &PointSpec) -> Point {
    (p.x.clone(), p.mu.clone())
}

fn mollify(p: &MollifyParams, seed: u64) -> Result<Outcome> {
    let base = functional(&p.functional)?;
    let mut probes = Vec::new();
    let mut data = json!({});
    for probe in &p.probes {
        match probe {
            MollifyProbe::Lipschitz { k, reps, pairs, r } => {
                let sf = SmoothedFunctional::new(base.clone(), *k, *reps, seed)?;
                let pairs: Vec<(Point, Point)> = pairs.iter().map(|(a, b)| (point(a), point(b))).collect();
                probes.push(lipschitz_preservation_probe(&sf, &pairs, *r)?);
            }
            MollifyProbe::UniformConvergence { ks, reps, points } => {
                let set: Vec<Point> = points.iter().map(point).collect();
                let uc = uniform_convergence_probe(&base, ks, &set, *reps, seed)?;
                data["uniform_convergence"] = serde_json::to_value(&uc.rows)?;
                probes.push(uc.monotone);
                probes.push(uc.strict);
            }
            MollifyProbe::Convexity { k, reps, segments } => {
                let sf = SmoothedFunctional::new(base.clone(), *k, *reps, seed)?;
                let segs: Vec<Segment> = segments
                    .iter()
                    .map(|s| Segment {
                        lambda: s.lambda,
                        x: s.x.clone(),
                        big_x: s.big_x.clone(),
                        y: s.y.clone(),
                        big_y: s.big_y.clone(),
                    })
                    .collect();
                probes.push(convexity_preservation_probe(&sf, &segs)?);
            }
        }
    }
    Ok(Outcome {
        table: Table::probes(&probes),
        probes,
        data,
        artifacts: Vec::new(),
    })
}

fn sweep(model: &ModelSpec, p: &SweepParams, seed: u64) -> Result<Outcome> {
    let oracle;
    let grid_fn;
    let policy_fn;
    let estimator = match &p.estimator {
        EstimatorSpec::Grid {
            lower,
            upper,
            points,
            horizon,
        } => {
            let dim = model.dim;
            grid_fn = move |n: usize| -> mfc_core::Result<GridSpec> {
                let axes = n * dim;
                let pts = points.get(axes.wrapping_sub(1)).copied().ok_or_else(|| {
                    mfc_core::Error::Shape(format!("no grid resolution configured for {axes} axes"))
                })?;
                let mut g = GridSpec::uniform(axes, *lower, *upper, pts, *horizon)?;
                g.t0 = p.t;
                Ok(g)
            };
            SweepEstimator::Grid { grid: &grid_fn }
        }
        EstimatorSpec::Oracle { sigma, kappa, horizon } => {
            oracle = LqOracle {
                sigma: *sigma,
                kappa: *kappa,
                horizon: *horizon,
            };
            SweepEstimator::Oracle(&oracle)
        }
        EstimatorSpec::MonteCarlo { sim, control } => {
            let c = *control;
            let steps = sim.steps;
            let dim = model.dim;
            policy_fn = move |n: usize| -> mfc_core::Result<ControlPolicy> {
                Ok(if c == 0.0 {
                    ControlPolicy::Zero
                } else {
                    ControlPolicy::open_loop(vec![vec![c; n * dim]; steps])
                })
            };
            SweepEstimator::MonteCarlo {
                cfg: sim.config(seed)?,
                policy: &policy_fn,
            }
        }
    };
    let rows = convergence_sweep(model, p.t, &p.family, p.target.as_ref(), p.r, &estimator)?;
    let mut table = Table::new("n,value,std_error,gap,distance_to_target");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    for r in &rows {
        table.rows.push(vec![
            r.n.to_string(),
            format!("{:?}", r.value.mean),
            format!("{:?}", r.value.std_error),
            opt(r.gap),
            opt(r.distance_to_target),
        ]);
    }
    let mut probes = Vec::new();
    if let Some(thr) = p.gap_threshold {
        let last = rows.last().and_then(|r| r.gap).unwrap_or(0.0);
        probes.push(ProbeReport::new(
            "sweep_gap",
            rows.len(),
            last,
            thr,
            Comparison::AtMost,
            Provenance::model(model).with_seeds(vec![seed]),
        ));
    }
    Ok(Outcome {
        table,
        probes,
        data: serde_json::to_value(&rows)?,
        artifacts: Vec::new(),
    })
}
