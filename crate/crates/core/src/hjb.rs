//! Explicit finite differences for the n-particle HJB equation
//!
//! ```text
//! ∂_t u + ½ Tr(A_n D²u) - (1/n) Σ_i H(x_i, μ_x, n D_{x_i} u) = 0,   u(T, ·) = U_T(μ_x),
//! ```
//!
//! on tensor grids with `n·d ≤ 3`, plus gradient extraction, feedback
//! synthesis and a Riccati oracle for the decoupled LQ benchmark.

use std::io::{self, Write};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::MeasureFeatures;
use crate::measure::VectorTuple;
use crate::model::{hamiltonian_from_parts, ModelSpec};
use crate::sim::{ControlPolicy, Feedback};

pub const MAX_GRID_AXES: usize = 3;
pub const MIN_AXIS_POINTS: usize = 8;
const CFL_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl AxisSpec {
    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        let s = i as f64 / (self.points - 1) as f64;
        self.lower * (1.0 - s) + self.upper * s
    }
}

/// Artificial viscosity added to the first-order term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissipation {
    /// Per node and axis, `θ = max(0, |∂H/∂p| - A_aa/h)` over the two
    /// one-sided gradients: just enough to keep the axis stencil monotone.
    #[default]
    Local,
    /// One `θ` per axis and slice, `max_grid (|b| + |n Du|/κ) / n`.
    Global,
}

fn default_margin() -> f64 {
    0.25
}

fn default_store_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<AxisSpec>,
    #[serde(default)]
    pub t0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// `None` picks the smallest step count satisfying the CFL bound.
    #[serde(default)]
    pub time_steps: Option<usize>,
    /// Fraction of each axis, at either end, excluded from the core region.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Keep every `store_every`-th time slice (the first and last are always kept).
    #[serde(default = "default_store_every")]
    pub store_every: usize,
    #[serde(default)]
    pub dissipation: Dissipation,
}

impl GridSpec {
    /// The same axis repeated `axes` times.
    pub fn uniform(axes: usize, lower: f64, upper: f64, points: usize, horizon: f64) -> Result<Self> {
        let spec = Self {
            axes: vec![AxisSpec { lower, upper, points }; axes],
            t0: 0.0,
            horizon,
            time_steps: None,
            margin: default_margin(),
            store_every: 1,
            dissipation: Dissipation::Local,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_time_steps(mut self, steps: usize) -> Self {
        self.time_steps = Some(steps);
        self
    }

    pub fn with_store_every(mut self, every: usize) -> Self {
        self.store_every = every;
        self
    }

    pub fn with_dissipation(mut self, dissipation: Dissipation) -> Self {
        self.dissipation = dissipation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > MAX_GRID_AXES {
            return Err(Error::Shape(format!(
                "grid needs between 1 and {MAX_GRID_AXES} axes, got {}",
                self.axes.len()
            )));
        }
        for (k, ax) in self.axes.iter().enumerate() {
            if ax.points < MIN_AXIS_POINTS {
                return Err(Error::Domain(format!(
                    "axis {k} has {} points, need at least {MIN_AXIS_POINTS}",
                    ax.points
                )));
            }
            if !(ax.upper > ax.lower) || !ax.lower.is_finite() || !ax.upper.is_finite() {
                return Err(Error::Domain(format!("axis {k} needs upper > lower")));
            }
        }
        if !(self.horizon > self.t0) || !self.t0.is_finite() || !self.horizon.is_finite() {
            return Err(Error::Domain(format!("need T > t0, got t0 = {}, T = {}", self.t0, self.horizon)));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return Err(Error::Domain(format!("margin {} must lie in [0, 0.5)", self.margin)));
        }
        if self.store_every == 0 || self.time_steps == Some(0) {
            return Err(Error::Domain("store_every and time_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    /// Short label such as `2x121[-3,3] T=1`.
    pub fn id(&self) -> String {
        let axes: Vec<String> = self
            .axes
            .iter()
            .map(|a| format!("{}[{},{}]", a.points, a.lower, a.upper))
            .collect();
        format!("{} t0={} T={}", axes.join("x"), self.t0, self.horizon)
    }

    fn min_step(&self) -> f64 {
        self.axes.iter().map(AxisSpec::step).fold(f64::INFINITY, f64::min)
    }
}

/// `dt ≤ 0.9 / (2Λ/h² + Θ/h)`.
pub fn cfl_bound(lambda: f64, theta: f64, h: f64) -> f64 {
    CFL_SAFETY / (2.0 * lambda / (h * h) + theta / h)
}

/// Coefficients frozen at every node; the model has no explicit time dependence.
struct NodeCoefficients {
    axes: usize,
    particles: usize,
    drift: Vec<f64>,
    /// Row-major `axes × axes` blocks of `A_n`.
    amat: Vec<f64>,
    /// `l_1(x_i, μ_x)` per particle.
    running: Vec<f64>,
    lambda: f64,
}

impl NodeCoefficients {
    fn build(model: &ModelSpec, n: usize, nodes: &[Vec<f64>]) -> Result<Self> {
        let (d, dp) = (model.dim, model.noise_dim);
        let axes = n * d;
        let per_node: Vec<_> = nodes
            .par_iter()
            .map(|x| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
                let f = MeasureFeatures::of_atoms(d, x);
                let mut drift = vec![0.0; axes];
                let mut sig = vec![0.0; n * d * dp];
                let mut running = vec![0.0; n];
                for i in 0..n {
                    let xi = &x[i * d..(i + 1) * d];
                    model.drift_into(xi, &f, &mut drift[i * d..(i + 1) * d])?;
                    model.diffusion_into(xi, &f, &mut sig[i * d * dp..(i + 1) * d * dp])?;
                    running[i] = model.running(xi, &f)?;
                }
                let mut amat = vec![0.0; axes * axes];
                for a in 0..axes {
                    for b in 0..axes {
                        let ra = &sig[a * dp..(a + 1) * dp];
                        let rb = &sig[b * dp..(b + 1) * dp];
                        amat[a * axes + b] = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
                    }
                }
                Ok((drift, amat, running))
            })
            .collect::<Result<_>>()?;
        let mut out = Self {
            axes,
            particles: n,
            drift: Vec::with_capacity(nodes.len() * axes),
            amat: Vec::with_capacity(nodes.len() * axes * axes),
            running: Vec::with_capacity(nodes.len() * n),
            lambda: 0.0,
        };
        for (drift, amat, running) in per_node {
            let trace: f64 = (0..axes).map(|a| amat[a * axes + a]).sum();
            out.lambda = out.lambda.max(trace);
            out.drift.extend(drift);
            out.amat.extend(amat);
            out.running.extend(running);
        }
        Ok(out)
    }
}

/// Grid geometry with one ghost layer on each side of every axis.
#[derive(Debug, Clone)]
struct Layout {
    points: Vec<usize>,
    strides: Vec<usize>,
    ext_points: Vec<usize>,
    ext_strides: Vec<usize>,
}

impl Layout {
    fn new(spec: &GridSpec) -> Self {
        let points: Vec<usize> = spec.axes.iter().map(|a| a.points).collect();
        let ext_points: Vec<usize> = points.iter().map(|p| p + 2).collect();
        Self {
            strides: row_major_strides(&points),
            ext_strides: row_major_strides(&ext_points),
            points,
            ext_points,
        }
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut m = vec![0; self.points.len()];
        for (a, s) in self.strides.iter().enumerate() {
            m[a] = flat / s;
            flat %= s;
        }
        m
    }

    fn ext_index(&self, flat: usize) -> usize {
        self.multi_index(flat)
            .iter()
            .zip(&self.ext_strides)
            .map(|(m, s)| (m + 1) * s)
            .sum()
    }

    /// Copies `u` into the extended array and fills ghosts by linear
    /// extrapolation, one axis at a time so corners are consistent.
    fn extend(&self, u: &[f64], ext: &mut [f64], ext_index: &[usize]) {
        for (v, &e) in u.iter().zip(ext_index) {
            ext[e] = *v;
        }
        let total = ext.len();
        for a in 0..self.points.len() {
            let s = self.ext_strides[a];
            let last = self.ext_points[a] - 1;
            for e in 0..total {
                let m = (e / s) % self.ext_points[a];
                if m == 0 {
                    ext[e] = 2.0 * ext[e + s] - ext[e + 2 * s];
                } else if m == last {
                    ext[e] = 2.0 * ext[e - s] - ext[e - 2 * s];
                }
            }
        }
    }
}

fn row_major_strides(points: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; points.len()];
    for a in (0..points.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * points[a + 1];
    }
    strides
}

struct Stencil<'a> {
    layout: &'a Layout,
    steps: Vec<f64>,
    coeffs: &'a NodeCoefficients,
    kappa: f64,
    dissipation: Dissipation,
}

impl Stencil<'_> {
    /// Returns `(u^k, Σ_a θ_a)` at one node given the extended slice `u^{k+1}`.
    fn update(&self, node: usize, e: usize, ext: &[f64], global_theta: &[f64], dt: f64) -> (f64, f64) {
        let axes = self.coeffs.axes;
        let n = self.coeffs.particles;
        let d = axes / n;
        let nf = n as f64;
        let b = &self.coeffs.drift[node * axes..(node + 1) * axes];
        let amat = &self.coeffs.amat[node * axes * axes..(node + 1) * axes * axes];
        let running = &self.coeffs.running[node * n..(node + 1) * n];
        let es = &self.layout.ext_strides;
        let u0 = ext[e];

        let mut grad = [0.0; MAX_GRID_AXES];
        let mut diffusion = 0.0;
        let mut viscosity = 0.0;
        let mut theta_sum = 0.0;
        for a in 0..axes {
            let (s, h) = (es[a], self.steps[a]);
            let (up, um) = (ext[e + s], ext[e - s]);
            grad[a] = (up - um) / (2.0 * h);
            let d2 = (up - 2.0 * u0 + um) / (h * h);
            let a_aa = amat[a * axes + a];
            diffusion += 0.5 * a_aa * d2;
            for c in a + 1..axes {
                let a_ac = amat[a * axes + c];
                if a_ac != 0.0 {
                    let (t, k) = (es[c], self.steps[c]);
                    let cross = (ext[e + s + t] - ext[e + s - t] - ext[e - s + t] + ext[e - s - t]) / (4.0 * h * k);
                    diffusion += a_ac * cross;
                }
            }
            let theta = match self.dissipation {
                Dissipation::Local => {
                    let vp = (-b[a] + nf * (up - u0) / h / self.kappa).abs();
                    let vm = (-b[a] + nf * (u0 - um) / h / self.kappa).abs();
                    (vp.max(vm) - a_aa / h).max(0.0)
                }
                Dissipation::Global => global_theta[a],
            };
            theta_sum += theta;
            viscosity += theta * 0.5 * h * d2;
        }

        let mut ham = 0.0;
        let mut p = [0.0; MAX_GRID_AXES];
        for i in 0..n {
            for c in 0..d {
                p[c] = nf * grad[i * d + c];
            }
            ham += hamiltonian_from_parts(&b[i * d..(i + 1) * d], running[i], &p[..d], self.kappa);
        }
        ham /= nf;
        (u0 + dt * (diffusion - ham + viscosity), theta_sum)
    }

    fn global_theta(&self, ext: &[f64], ext_index: &[usize]) -> Vec<f64> {
        let axes = self.coeffs.axes;
        let nf = self.coeffs.particles as f64;
        let es = &self.layout.ext_strides;
        (0..axes)
            .map(|a| {
                ext_index
                    .iter()
                    .enumerate()
                    .map(|(node, &e)| {
                        let g = (ext[e + es[a]] - ext[e - es[a]]) / (2.0 * self.steps[a]);
                        (self.coeffs.drift[node * axes + a].abs() + (nf * g).abs() / self.kappa) / nf
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Value function on the grid, with the stored time slices in increasing time.
#[derive(Debug, Clone)]
pub struct GridValueFunction {
    pub spec: GridSpec,
    pub model: ModelSpec,
    pub n: usize,
    pub d: usize,
    pub dt: f64,
    pub steps: usize,
    slice_steps: Vec<usize>,
    values: Vec<Vec<f64>>,
    layout: Layout,
}

/// Solves backward from `u(T) = U_T(μ_x)` to `t0`.
pub fn solve_hjb(model: &ModelSpec, n: usize, grid: &GridSpec) -> Result<GridValueFunction> {
    grid.validate()?;
    let d = model.dim;
    if n == 0 || n * d != grid.axes.len() {
        return Err(Error::Shape(format!(
            "grid has {} axes but n·d = {}·{} = {}",
            grid.axes.len(),
            n,
            d,
            n * d
        )));
    }
    let layout = Layout::new(grid);
    let count = grid.node_count();
    let nodes: Vec<Vec<f64>> = (0..count)
        .map(|k| {
            layout
                .multi_index(k)
                .iter()
                .zip(&grid.axes)
                .map(|(&m, ax)| ax.coord(m))
                .collect()
        })
        .collect();
    let coeffs = NodeCoefficients::build(model, n, &nodes)?;
    let terminal: Vec<f64> = nodes
        .iter()
        .map(|x| model.terminal_value(&MeasureFeatures::of_atoms(d, x)))
        .collect::<Result<_, _>>()?;
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { slice: 0 });
    }

    let ext_index: Vec<usize> = (0..count).map(|k| layout.ext_index(k)).collect();
    let stencil = Stencil {
        layout: &layout,
        steps: grid.axes.iter().map(AxisSpec::step).collect(),
        coeffs: &coeffs,
        kappa: model.kappa,
        dissipation: grid.dissipation,
    };
    let h = grid.min_step();
    let span = grid.horizon - grid.t0;
    let mut ext = vec![0.0; layout.ext_points.iter().product()];

    // Stability envelope from the terminal slice.
    layout.extend(&terminal, &mut ext, &ext_index);
    let global = stencil.global_theta(&ext, &ext_index);
    let theta0 = slice_theta(&stencil, &ext, &ext_index, &global);
    let bound = cfl_bound(coeffs.lambda, theta0, h);
    let min_steps = (span / bound).ceil().max(1.0) as usize;
    let steps = grid.time_steps.unwrap_or(min_steps);
    let dt = span / steps as f64;
    if dt > bound {
        return Err(Error::Cfl {
            dt,
            bound,
            min_steps,
            slice: None,
        });
    }

    let mut stored = vec![(steps, terminal.clone())];
    let mut current = terminal;
    let mut next = vec![0.0; count];
    for k in (0..steps).rev() {
        layout.extend(&current, &mut ext, &ext_index);
        let global = match grid.dissipation {
            Dissipation::Global => stencil.global_theta(&ext, &ext_index),
            Dissipation::Local => Vec::new(),
        };
        let theta = next
            .par_iter_mut()
            .enumerate()
            .map(|(node, out)| {
                let (v, th) = stencil.update(node, ext_index[node], &ext, &global, dt);
                *out = v;
                th
            })
            .reduce(|| 0.0, f64::max);
        let bound = cfl_bound(coeffs.lambda, theta, h);
        if dt > bound {
            return Err(Error::Cfl {
                dt,
                bound,
                min_steps: (span / bound).ceil() as usize,
                slice: Some(k),
            });
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { slice: k });
        }
        std::mem::swap(&mut current, &mut next);
        if k == 0 || k % grid.store_every == 0 {
            stored.push((k, current.clone()));
        }
    }
    stored.reverse();
    let (slice_steps, values) = stored.into_iter().unzip();
    Ok(GridValueFunction {
        spec: grid.clone(),
        model: model.clone(),
        n,
        d,
        dt,
        steps,
        slice_steps,
        values,
        layout,
    })
}

fn slice_theta(stencil: &Stencil, ext: &[f64], ext_index: &[usize], global: &[f64]) -> f64 {
    ext_index
        .iter()
        .enumerate()
        .map(|(node, &e)| stencil.update(node, e, ext, global, 0.0).1)
        .fold(0.0, f64::max)
}

impl GridValueFunction {
    pub fn axes(&self) -> usize {
        self.spec.axes.len()
    }

    pub fn node_count(&self) -> usize {
        self.values[0].len()
    }

    pub fn slice_count(&self) -> usize {
        self.values.len()
    }

    /// Time-step index `k` of stored slice `j` (time `t0 + k·dt`).
    pub fn slice_step(&self, j: usize) -> usize {
        self.slice_steps[j]
    }

    pub fn time(&self, j: usize) -> f64 {
        self.spec.t0 + self.slice_steps[j] as f64 * self.dt
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        &self.values[j]
    }

    pub fn initial(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn terminal(&self) -> &[f64] {
        &self.values[self.values.len() - 1]
    }

    /// Stored slice at time-step index `k`, if kept.
    pub fn slice_at_step(&self, k: usize) -> Option<&[f64]> {
        self.slice_steps.binary_search(&k).ok().map(|j| self.values[j].as_slice())
    }

    pub fn nearest_slice(&self, t: f64) -> usize {
        let k = ((t - self.spec.t0) / self.dt).round().clamp(0.0, self.steps as f64) as usize;
        match self.slice_steps.binary_search(&k) {
            Ok(j) => j,
            Err(0) => 0,
            Err(j) if j == self.slice_steps.len() => j - 1,
            Err(j) => {
                if k - self.slice_steps[j - 1] <= self.slice_steps[j] - k {
                    j - 1
                } else {
                    j
                }
            }
        }
    }

    pub fn node_coords(&self, node: usize) -> Vec<f64> {
        self.layout
            .multi_index(node)
            .iter()
            .zip(&self.spec.axes)
            .map(|(&m, ax)| ax.coord(m))
            .collect()
    }

    pub fn node_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.layout.strides).map(|(m, s)| m * s).sum()
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        self.layout.multi_index(node)
    }

    /// Nodes whose coordinates all lie in the core region.
    pub fn core_nodes(&self) -> Vec<usize> {
        (0..self.node_count())
            .filter(|&k| self.in_core(&self.node_coords(k)))
            .collect()
    }

    pub fn in_core(&self, x: &[f64]) -> bool {
        let tol = 1e-12;
        x.iter().zip(&self.spec.axes).all(|(v, ax)| {
            let pad = self.spec.margin * (ax.upper - ax.lower);
            *v >= ax.lower + pad - tol && *v <= ax.upper - pad + tol
        })
    }

    /// Multilinear interpolation of a per-node array, with `x` clamped to the grid box.
    pub fn interpolate(&self, data: &[f64], x: &[f64]) -> f64 {
        let axes = self.axes();
        let mut base = [0usize; MAX_GRID_AXES];
        let mut frac = [0.0; MAX_GRID_AXES];
        for a in 0..axes {
            let ax = &self.spec.axes[a];
            let mut s = ((x[a].clamp(ax.lower, ax.upper) - ax.lower) / ax.step()).clamp(0.0, (ax.points - 1) as f64);
            // Snap queries that sit on a node up to rounding, so node values come back exactly.
            if (s - s.round()).abs() < 1e-9 {
                s = s.round();
            }
            let i = (s.floor() as usize).min(ax.points - 2);
            base[a] = i;
            frac[a] = s - i as f64;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << axes) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..axes {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                idx += (base[a] + bit) * self.layout.strides[a];
            }
            if w != 0.0 {
                total += w * data[idx];
            }
        }
        total
    }

    /// `u(t, x)`: multilinear in space, linear in time between stored slices.
    pub fn value_at(&self, t: f64, x: &[f64]) -> f64 {
        let mut k = ((t - self.spec.t0) / self.dt).clamp(0.0, self.steps as f64);
        if (k - k.round()).abs() < 1e-9 {
            k = k.round();
        }
        let j = self.slice_steps.partition_point(|&s| (s as f64) <= k);
        if j == 0 {
            return self.interpolate(&self.values[0], x);
        }
        if j == self.slice_steps.len() {
            return self.interpolate(&self.values[j - 1], x);
        }
        let (k0, k1) = (self.slice_steps[j - 1] as f64, self.slice_steps[j] as f64);
        let w = (k - k0) / (k1 - k0);
        (1.0 - w) * self.interpolate(&self.values[j - 1], x) + w * self.interpolate(&self.values[j], x)
    }

    /// CSV rows `slice,node,value` for every `every`-th stored slice, where
    /// `slice` is the time-step index.
    pub fn write_csv(&self, mut out: impl Write, every: usize) -> io::Result<()> {
        writeln!(out, "slice,node,value")?;
        for (j, (k, values)) in self.slice_steps.iter().zip(&self.values).enumerate() {
            if j % every.max(1) != 0 && j + 1 != self.values.len() {
                continue;
            }
            for (node, v) in values.iter().enumerate() {
                writeln!(out, "{k},{node},{v:?}")?;
            }
        }
        Ok(())
    }

    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar {
            grid: self.spec.clone(),
            model_id: self.model.id.clone(),
            n: self.n,
            d: self.d,
            dt: self.dt,
            steps: self.steps,
            stored_slices: self.slice_steps.clone(),
        }
    }
}

/// JSON companion of the value CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub grid: GridSpec,
    pub model_id: String,
    pub n: usize,
    pub d: usize,
    pub dt: f64,
    pub steps: usize,
    pub stored_slices: Vec<usize>,
}

/// Per-axis gradient arrays of stored slice `j`: central differences in the
/// interior, one-sided at the boundary.
pub fn grid_gradient(u: &GridValueFunction, j: usize) -> Vec<Vec<f64>> {
    let v = u.slice(j);
    (0..u.axes())
        .map(|a| {
            let ax = &u.spec.axes[a];
            let (s, h) = (u.layout.strides[a], ax.step());
            (0..v.len())
                .map(|node| {
                    let m = (node / s) % ax.points;
                    if m == 0 {
                        (v[node + s] - v[node]) / h
                    } else if m + 1 == ax.points {
                        (v[node] - v[node - s]) / h
                    } else {
                        (v[node + s] - v[node - s]) / (2.0 * h)
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug)]
struct GridFeedback {
    u: Arc<GridValueFunction>,
    gradients: Vec<OnceLock<Vec<Vec<f64>>>>,
}

impl Feedback for GridFeedback {
    fn control(&self, _step: usize, time: f64, state: &[f64], _dim: usize, out: &mut [f64]) {
        let j = self.u.nearest_slice(time);
        let grads = self.gradients[j].get_or_init(|| grid_gradient(&self.u, j));
        let nf = self.u.n as f64;
        for (a, o) in out.iter_mut().enumerate() {
            *o = nf * self.u.interpolate(&grads[a], state) / self.u.model.kappa;
        }
    }
}

/// The feedback `a_i = (Dl_2)^{-1}(n D_{x_i} u)` read off the grid.
pub fn synthesize_feedback(u: impl Into<Arc<GridValueFunction>>) -> ControlPolicy {
    let u = u.into();
    let gradients = (0..u.slice_count()).map(|_| OnceLock::new()).collect();
    ControlPolicy::feedback(GridFeedback { u, gradients })
}

/// `P` and `r` on a uniform backward mesh, for `u = (1/n) Σ (P x_i²/2 + r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
}

impl RiccatiSolution {
    /// Integrates `P' = P²/κ`, `P(T) = 1`, `r' = -σ²P/2`, `r(T) = 0` backward
    /// from `T` to `t` with `steps` RK4 steps.
    pub fn solve(sigma: f64, kappa: f64, horizon: f64, t: f64, steps: usize) -> Result<Self> {
        if !(kappa > 0.0) || !(horizon >= t) || steps == 0 {
            return Err(Error::Domain("Riccati oracle needs κ > 0, T ≥ t and steps ≥ 1".into()));
        }
        let rhs = |p: f64| (p * p / kappa, -sigma * sigma * p / 2.0);
        let h = (horizon - t) / steps as f64;
        let (mut p, mut r) = (1.0, 0.0);
        let mut out = Self {
            times: vec![horizon],
            p: vec![p],
            r: vec![r],
        };
        for k in 1..=steps {
            // Backward in time: step of -h.
            let k1 = rhs(p);
            let k2 = rhs(p - 0.5 * h * k1.0);
            let k3 = rhs(p - 0.5 * h * k2.0);
            let k4 = rhs(p - h * k3.0);
            p -= h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            r -= h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            out.times.push(if k == steps { t } else { horizon - k as f64 * h });
            out.p.push(p);
            out.r.push(r);
        }
        out.times.reverse();
        out.p.reverse();
        out.r.reverse();
        Ok(out)
    }

    /// Solution on the time mesh of a grid solve, refined ten times.
    pub fn on_grid(sigma: f64, kappa: f64, u: &GridValueFunction) -> Result<Self> {
        Self::solve(sigma, kappa, u.spec.horizon, u.spec.t0, 10 * u.steps)
    }

    pub fn value(&self, j: usize, x: &VectorTuple) -> f64 {
        let n = x.len() as f64;
        x.points()
            .map(|xi| self.p[j] * xi.iter().map(|v| v * v).sum::<f64>() / 2.0 + self.r[j])
            .sum::<f64>()
            / n
    }
}

/// Steps per unit time used by [`riccati_lq_value`] before the tenfold refinement.
pub const RICCATI_BASE_STEPS: usize = 1000;

/// Value of the decoupled LQ problem (`b = 0`, `l_1 = 0`, `U_T = m2/2`) at `(t, x)`.
pub fn riccati_lq_value(sigma: f64, kappa: f64, horizon: f64, t: f64, x: &VectorTuple) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Shape("empty state".into()));
    }
    let steps = 10 * ((horizon - t) * RICCATI_BASE_STEPS as f64).ceil().max(1.0) as usize;
    let sol = RiccatiSolution::solve(sigma, kappa, horizon, t, steps)?;
    Ok(sol.value(0, x))
}

/// Closed form of the same value, for cross-checks.
pub fn lq_closed_form(sigma: f64, kappa: f64, horizon: f64, t: f64, x: &VectorTuple) -> f64 {
    let tau = horizon - t;
    let p = kappa / (kappa + tau);
    let r = sigma * sigma * kappa / 2.0 * ((kappa + tau) / kappa).ln();
    x.points()
        .map(|xi| p * xi.iter().map(|v| v * v).sum::<f64>() / 2.0 + r)
        .sum::<f64>()
        / x.len() as f64
}
