//! Empirical measures, r-norms of particle tuples and Wasserstein distances
//! between equally weighted point clouds.
//!
//! A [`VectorTuple`] is an ordered state `(x_1, ..., x_n)` in `(R^d)^n`. The
//! same atom list, read without order, is the [`EmpiricalMeasure`]
//! `(1/n) Σ δ_{x_i}`; read as a step function on `(0,1)` it is the lift of the
//! measure into the piecewise-constant subspace `E_n`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_r, Error, Result};

fn validate(dim: usize, atoms: &[f64]) -> Result<()> {
    if dim == 0 {
        return Err(Error::Shape("spatial dimension must be positive".into()));
    }
    if atoms.is_empty() || !atoms.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!(
            "{} coordinates do not form a positive number of {dim}-dimensional atoms",
            atoms.len()
        )));
    }
    if let Some(pos) = atoms.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "coordinate {} of atom {} is not finite",
            pos % dim,
            pos / dim
        )));
    }
    Ok(())
}

fn flatten(points: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let dim = points
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Shape("at least one atom is required".into()))?;
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("atoms have inconsistent dimensions".into()));
    }
    Ok((dim, points.iter().flatten().copied().collect()))
}

/// Ordered particle state `(x_1, ..., x_n)`, stored as a flat `n * d` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct VectorTuple {
    dim: usize,
    coords: Vec<f64>,
}

impl VectorTuple {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        validate(dim, &coords)?;
        Ok(Self { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let (dim, coords) = flatten(points)?;
        Self::new(dim, coords)
    }

    /// Scalar particles, `d = 1`.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.coords
    }

    /// Forgets the order of the particles.
    pub fn to_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure {
            dim: self.dim,
            atoms: self.coords.clone(),
        }
    }

    /// Applies the same permutation to the particles: output particle `k` is
    /// input particle `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let coords = perm.iter().flat_map(|&i| self.point(i).iter().copied()).collect();
        Self {
            dim: self.dim,
            coords,
        }
    }

    /// `|x|_r = (n^{-1} Σ |x_i|^r)^{1/r}`.
    pub fn rnorm(&self, r: f64) -> Result<f64> {
        check_r(r)?;
        Ok(mean_pow(self.points(), r).powf(1.0 / r))
    }

    /// `|x - y|_r` for tuples of the same shape.
    pub fn rdistance(&self, other: &Self, r: f64) -> Result<f64> {
        check_r(r)?;
        self.same_shape(other)?;
        let diff: Vec<f64> = self.coords.iter().zip(&other.coords).map(|(a, b)| a - b).collect();
        Ok(mean_pow(diff.chunks_exact(self.dim), r).powf(1.0 / r))
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.coords.len() != other.coords.len() {
            return Err(Error::Shape(format!(
                "tuple shapes differ: {}x{} vs {}x{}",
                self.len(),
                self.dim,
                other.len(),
                other.dim
            )));
        }
        Ok(())
    }

    /// Repeats every particle `m` times in place: `(x_1, .., x_1, x_2, ..)`.
    pub fn duplicate_atoms(&self, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("duplication factor must be at least 1".into()));
        }
        let coords = self
            .points()
            .flat_map(|p| std::iter::repeat_n(p, m).flatten().copied())
            .collect();
        Ok(Self {
            dim: self.dim,
            coords,
        })
    }

    /// `λ self + (1 - λ) other`, atom by atom.
    pub fn convex_combination(&self, other: &Self, lambda: f64) -> Result<Self> {
        self.same_shape(other)?;
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        Ok(Self {
            dim: self.dim,
            coords,
        })
    }
}

impl TryFrom<Vec<Vec<f64>>> for VectorTuple {
    type Error = Error;
    fn try_from(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_points(&points)
    }
}

impl From<VectorTuple> for Vec<Vec<f64>> {
    fn from(t: VectorTuple) -> Self {
        t.points().map(<[f64]>::to_vec).collect()
    }
}

/// `μ = (1/n) Σ δ_{x_i}` with uniform implicit weights.
///
/// Equality ignores atom order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        validate(dim, &atoms)?;
        Ok(Self { dim, atoms })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let (dim, atoms) = flatten(points)?;
        Self::new(dim, atoms)
    }

    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    /// `δ_x` represented by `n` copies of `x`.
    pub fn dirac(point: &[f64], n: usize) -> Result<Self> {
        let atoms = std::iter::repeat_n(point, n).flatten().copied().collect();
        Self::new(point.len(), atoms)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.atoms
    }

    /// The atom list in storage order, as the lift `Σ x_i 1_{A_i^n}`.
    pub fn to_tuple(&self) -> VectorTuple {
        VectorTuple {
            dim: self.dim,
            coords: self.atoms.clone(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim];
        for a in self.atoms() {
            for (acc, v) in m.iter_mut().zip(a) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// `∫ |y|^2 μ(dy)`.
    pub fn second_moment(&self) -> f64 {
        self.atoms().map(sq_norm).sum::<f64>() / self.len() as f64
    }

    /// `M_r(μ) = (1/n) Σ |x_i|^r`.
    pub fn moment_r(&self, r: f64) -> Result<f64> {
        check_r(r)?;
        Ok(mean_pow(self.atoms(), r))
    }

    fn sorted_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| lex_cmp(self.atom(a), self.atom(b)));
        idx
    }
}

impl PartialEq for EmpiricalMeasure {
    fn eq(&self, other: &Self) -> bool {
        if self.dim != other.dim || self.atoms.len() != other.atoms.len() {
            return false;
        }
        let (a, b) = (self.sorted_indices(), other.sorted_indices());
        a.iter()
            .zip(&b)
            .all(|(&i, &j)| self.atom(i) == other.atom(j))
    }
}

impl From<&VectorTuple> for EmpiricalMeasure {
    fn from(t: &VectorTuple) -> Self {
        t.to_measure()
    }
}

impl TryFrom<Vec<Vec<f64>>> for EmpiricalMeasure {
    type Error = Error;
    fn try_from(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_points(&points)
    }
}

impl From<EmpiricalMeasure> for Vec<Vec<f64>> {
    fn from(m: EmpiricalMeasure) -> Self {
        m.atoms().map(<[f64]>::to_vec).collect()
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

pub(crate) fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// `|x|^r`, avoiding the square root for `r = 2`.
fn norm_pow(sq: f64, r: f64) -> f64 {
    if r == 2.0 {
        sq
    } else if r == 1.0 {
        sq.sqrt()
    } else {
        sq.sqrt().powf(r)
    }
}

fn mean_pow<'a>(points: impl Iterator<Item = &'a [f64]>, r: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in points {
        sum += norm_pow(sq_norm(p), r);
        n += 1;
    }
    sum / n as f64
}

/// `|x - y|^r`.
pub fn transport_cost(x: &[f64], y: &[f64], r: f64) -> f64 {
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    norm_pow(sq, r)
}

fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, r: f64) -> Vec<f64> {
    let n = mu.len();
    let mut c = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            c.push(transport_cost(mu.atom(i), nu.atom(j), r));
        }
    }
    c
}

fn assignment_total(cost: &[f64], n: usize, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Optimal transport plan between two equal-count measures.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// Atom `i` of the source is sent to atom `target[i]` of the destination.
    pub target: Vec<usize>,
    /// `Σ_i |x_i - y_{target[i]}|^r`.
    pub total_cost: f64,
}

/// Exact minimum-cost perfect matching by shortest augmenting paths with
/// dual potentials, `O(n^3)`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based arrays; column 0 is the virtual root of each augmenting tree.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut target = vec![0; n];
    for j in 1..=n {
        target[row_of[j] - 1] = j - 1;
    }
    target
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim != nu.dim {
        return Err(Error::Shape(format!(
            "measures live in different dimensions ({} vs {})",
            mu.dim, nu.dim
        )));
    }
    Ok(())
}

pub fn optimal_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, r: f64) -> Result<Assignment> {
    check_r(r)?;
    check_pair(mu, nu)?;
    if mu.len() != nu.len() {
        return Err(Error::Shape(format!(
            "assignment needs equal atom counts, got {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    let n = mu.len();
    let cost = cost_matrix(mu, nu, r);
    let target = solve_assignment(&cost, n);
    let total_cost = assignment_total(&cost, n, &target);
    Ok(Assignment { target, total_cost })
}

/// `d_r(μ, ν)`.
///
/// Equal atom counts are solved exactly as an assignment problem. In one
/// dimension unequal counts use the quantile coupling; in higher dimension
/// they are rejected.
pub fn wasserstein_r(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, r: f64) -> Result<f64> {
    check_r(r)?;
    check_pair(mu, nu)?;
    if mu.len() == nu.len() {
        let plan = optimal_assignment(mu, nu, r)?;
        return Ok((plan.total_cost / mu.len() as f64).powf(1.0 / r));
    }
    if mu.dim == 1 {
        return Ok(quantile_wasserstein(mu.as_slice(), nu.as_slice(), r));
    }
    Err(Error::Shape(format!(
        "transport between {} and {} atoms in dimension {} is not supported",
        mu.len(),
        nu.len(),
        mu.dim
    )))
}

/// Monotone rearrangement in 1-D over the common refinement of both
/// quantile functions.
fn quantile_wasserstein(a: &[f64], b: &[f64], r: f64) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    // Positions are measured in units of 1/(n m) to keep breakpoints exact.
    let (mut i, mut j, mut cur) = (0usize, 0usize, 0usize);
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) * m;
        let next_b = (j + 1) * n;
        let next = next_a.min(next_b);
        let mass = (next - cur) as f64 / (n * m) as f64;
        total += mass * norm_pow((xs[i] - ys[j]).powi(2), r);
        cur = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    total.powf(1.0 / r)
}

/// Largest atom count accepted by [`brute_force_wasserstein`].
pub const BRUTE_FORCE_MAX_ATOMS: usize = 8;

/// Minimum over all `n!` bijections. Oracle for the assignment solver.
pub fn brute_force_wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, r: f64) -> Result<f64> {
    check_r(r)?;
    check_pair(mu, nu)?;
    let n = mu.len();
    if n != nu.len() {
        return Err(Error::Shape("brute force needs equal atom counts".into()));
    }
    if n > BRUTE_FORCE_MAX_ATOMS {
        return Err(Error::Domain(format!(
            "brute force limited to {BRUTE_FORCE_MAX_ATOMS} atoms, got {n}"
        )));
    }
    let cost = cost_matrix(mu, nu, r);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = assignment_total(&cost, n, &perm);
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut k = 1;
    while k < n {
        if c[k] < k {
            if k % 2 == 0 {
                perm.swap(0, k);
            } else {
                perm.swap(c[k], k);
            }
            best = best.min(assignment_total(&cost, n, &perm));
            c[k] += 1;
            k = 1;
        } else {
            c[k] = 0;
            k += 1;
        }
    }
    Ok((best / n as f64).powf(1.0 / r))
}
