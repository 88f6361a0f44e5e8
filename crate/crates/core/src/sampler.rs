//! The Gibbs–Metropolis engine.
//!
//! One cycle consists of
//!
//! 1. block updates of `θ` over a schedule of non-adjacent voxel balls
//!    (blocks of one step run concurrently),
//! 2. per-voxel updates of the latent counts, `σ²` and, where needed, `θ₀`,
//! 3. Gibbs updates of the field hyperparameters.
//!
//! Latent counts are redrawn from their reinforced Poisson conditional right
//! before every update that uses them and are never stored.
//!
//! Every block, voxel and hyperparameter update draws from its own ChaCha
//! stream keyed by `(seed, cycle, step, index)`, so results do not depend on
//! the number of worker threads.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StandardUniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::Dataset;
use crate::design::{positivity_unchecked, Family, GradientScheme, ModelSpec, Positivity, Tensor2};
use crate::diagnostics::{DicAccumulator, DicReport};
use crate::error::{domain, Error, Result};
use crate::glm::{log_conditional_unchecked, scoring_unchecked, LaplaceProposal, ScoringFailure, ScoringOptions};
use crate::priors::{
    field_omega, omega_4th_abd_basis, quad_form, Hyper, IsoPrecision2, IsoPrecision4, ParameterField,
    PowerSpectrum, VoxelGraph,
};
use crate::rice::{rice_log_density_unchecked, ReinforcedPoisson};

// ---------------------------------------------------------------------------
// Problem data and state

/// Everything the chain needs about the observations.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ModelSpec,
    /// Design matrix, `m × (1+d)`, shared by all voxels.
    pub z: DMatrix<f64>,
    /// Magnitudes, `m` per voxel, voxel-major.
    pub y: Vec<f64>,
    pub m: usize,
    pub graph: VoxelGraph,
}

impl Problem {
    pub fn new(spec: ModelSpec, scheme: &GradientScheme, graph: VoxelGraph, y: Vec<f64>) -> Result<Self> {
        let z = spec.design_matrix(scheme)?;
        let m = z.nrows();
        if y.len() != m * graph.len() {
            return Err(Error::Dimension { expected: m * graph.len(), got: y.len() });
        }
        if !y.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return domain("measurements must be finite and >= 0");
        }
        Ok(Self { spec, z, y, m, graph })
    }

    pub fn from_dataset(data: &Dataset, spec: ModelSpec) -> Result<Self> {
        let graph = data.graph()?;
        let y = data.measurements.iter().map(|&v| v as f64).collect();
        Self::new(spec, &data.scheme, graph, y)
    }

    pub fn n_voxels(&self) -> usize {
        self.graph.len()
    }

    pub fn y_of(&self, v: usize) -> &[f64] {
        &self.y[v * self.m..(v + 1) * self.m]
    }

    /// Exact Rice log-likelihood of voxel `v`.
    pub fn voxel_log_likelihood(&self, v: usize, theta: &[f64], sigma2: f64) -> f64 {
        let eta = crate::glm::linpred(theta, &self.z);
        self.y_of(v)
            .iter()
            .zip(eta)
            .map(|(&y, e)| rice_log_density_unchecked(y, e.exp(), sigma2))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta: ParameterField,
    pub sigma2: Vec<f64>,
    pub hyper: Hyper,
    pub cycle: u64,
    pub rng_seed: u64,
}

impl ChainState {
    pub fn validate(&self, problem: &Problem) -> Result<()> {
        if self.theta.p != problem.spec.n_params() || self.theta.n_voxels() != problem.n_voxels() {
            return Err(Error::Dimension { expected: problem.n_voxels(), got: self.theta.n_voxels() });
        }
        if self.sigma2.len() != problem.n_voxels() {
            return Err(Error::Dimension { expected: problem.n_voxels(), got: self.sigma2.len() });
        }
        if !self.sigma2.iter().all(|s| s.is_finite() && *s > 0.0) {
            return domain("every sigma2 must be finite and > 0");
        }
        if !self.theta.data.iter().all(|t| t.is_finite()) {
            return domain("theta must be finite");
        }
        self.hyper.validate()?;
        self.hyper.check_family(&problem.spec)
    }
}

// ---------------------------------------------------------------------------
// Random streams

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for the tuple `(seed, cycle, kind, a, b)`.
pub fn stream(seed: u64, cycle: u64, kind: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [cycle, kind, a, b] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

const STREAM_BLOCK: u64 = 1;
const STREAM_VOXEL: u64 = 2;
const STREAM_HYPER: u64 = 3;

// ---------------------------------------------------------------------------
// Per-voxel conditionals

/// Draws one count per acquisition from its reinforced Poisson conditional.
pub fn update_counts<R: Rng + ?Sized>(y: &[f64], theta: &[f64], sigma2: f64, z: &DMatrix<f64>, rng: &mut R) -> Vec<u64> {
    let eta = crate::glm::linpred(theta, z);
    y.iter()
        .zip(eta)
        .map(|(&yi, e)| {
            let tau = yi * e.exp() / (2.0 * sigma2);
            ReinforcedPoisson::new(tau).map(|d| d.sample(rng)).unwrap_or(0)
        })
        .collect()
}

/// `(shape, rate)` of the inverse-gamma conditional of `σ²`.
pub fn sigma2_conditional(y: &[f64], theta: &[f64], counts: &[u64], z: &DMatrix<f64>) -> Result<(f64, f64)> {
    if y.is_empty() {
        return domain("sigma2 update needs at least one measurement");
    }
    let eta = crate::glm::linpred(theta, z);
    let shape: f64 = counts.iter().map(|&n| 2.0 * n as f64 + 1.0).sum();
    let rate = 0.5 * y.iter().zip(eta).map(|(yi, e)| yi * yi + (2.0 * e).exp()).sum::<f64>();
    Ok((shape, rate))
}

/// Exact Gibbs draw of `σ²`.
pub fn update_sigma2<R: Rng + ?Sized>(
    y: &[f64],
    theta: &[f64],
    counts: &[u64],
    z: &DMatrix<f64>,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = sigma2_conditional(y, theta, counts, z)?;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(1.0 / g.sample(rng))
}

/// `(a, b)` of the Gamma conditional of `S₀² = exp(2θ₀)`; `None` when
/// `a = 0` (improper conditional).
pub fn theta0_conditional(theta: &[f64], counts: &[u64], sigma2: f64, z: &DMatrix<f64>) -> Option<(f64, f64)> {
    let a: f64 = counts.iter().map(|&n| n as f64).sum();
    if a == 0.0 {
        return None;
    }
    let mut t = theta.to_vec();
    t[0] = 0.0;
    let eta = crate::glm::linpred(&t, z);
    let b = eta.iter().map(|e| (2.0 * e).exp()).sum::<f64>() / (2.0 * sigma2);
    Some((a, b))
}

/// Draws `ξ ~ Gamma(a, b)` and returns `½ log ξ`, or `None` when skipped.
pub fn update_theta0<R: Rng + ?Sized>(
    theta: &[f64],
    counts: &[u64],
    sigma2: f64,
    z: &DMatrix<f64>,
    rng: &mut R,
) -> Option<f64> {
    let (a, b) = theta0_conditional(theta, counts, sigma2, z)?;
    let xi = Gamma::new(a, 1.0 / b).ok()?.sample(rng);
    Some(0.5 * xi.ln())
}

// ---------------------------------------------------------------------------
// Block partition

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    /// `steps[s]` lists the blocks updated concurrently in step `s`; each
    /// block is a sorted voxel list.
    pub steps: Vec<Vec<Vec<usize>>>,
    pub radius: usize,
    pub cycle: u64,
}

/// Voxels within graph distance `r` of `center`, sorted.
pub fn ball(graph: &VoxelGraph, center: usize, r: usize) -> Vec<usize> {
    let mut dist = std::collections::BTreeMap::new();
    dist.insert(center, 0usize);
    let mut frontier = vec![center];
    for d in 1..=r {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in &graph.neighbors[v] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(w) {
                    e.insert(d);
                    next.push(w);
                }
            }
        }
        frontier = next;
    }
    dist.into_keys().collect()
}

/// Greedy packing of balls of radius `r`: candidate centers are visited in
/// voxel order rotated by `cycle·(r+1)`; a ball is taken when it is centered
/// on a voxel not yet covered in this cycle and neither overlaps nor touches
/// a ball already chosen in the current step. Steps are added until every
/// voxel is covered.
pub fn partition_blocks(graph: &VoxelGraph, r: usize, cycle: u64) -> BlockPartition {
    let n = graph.len();
    let mut covered = vec![false; n];
    let mut n_covered = 0;
    let mut steps = Vec::new();
    let offset = if n == 0 { 0 } else { ((cycle as u128 * (r as u128 + 1)) % n as u128) as usize };
    let balls: Vec<Vec<usize>> = (0..n).map(|c| ball(graph, c, r)).collect();
    while n_covered < n {
        let mut forbidden = vec![false; n];
        let mut blocks = Vec::new();
        for k in 0..n {
            let c = (k + offset) % n;
            if covered[c] {
                continue;
            }
            let b = &balls[c];
            if b.iter().any(|&v| forbidden[v]) {
                continue;
            }
            for &v in b {
                forbidden[v] = true;
                for &w in &graph.neighbors[v] {
                    forbidden[w] = true;
                }
            }
            blocks.push(b.clone());
        }
        for b in &blocks {
            for &v in b {
                if !covered[v] {
                    covered[v] = true;
                    n_covered += 1;
                }
            }
        }
        steps.push(blocks);
    }
    BlockPartition { steps, radius: r, cycle }
}

// ---------------------------------------------------------------------------
// Banded Cholesky

/// Cholesky factor of a symmetric positive-definite band matrix, stored
/// densely but computed only inside the band.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// `a` must vanish outside `|i − j| ≤ bw`.
    pub fn new(a: &DMatrix<f64>, bw: usize) -> Result<Self> {
        let n = a.nrows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = a[(i, j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Singular("block precision is not positive definite".into()));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Self { n, bw, l })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * n + k] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// Solves `Lᵀ x = b`.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..(i + 1 + self.bw).min(n) {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// `Lᵀ x`.
    pub fn mul_upper(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| (i..(i + 1 + self.bw).min(n)).map(|k| self.l[k * n + i] * x[k]).sum())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Block θ update

/// Per-voxel likelihood seen by the block update: its exact log value and a
/// Gaussian (Laplace) approximation obtained from a given starting point.
pub trait BlockLikelihood {
    /// `k` indexes the voxels of the block in order.
    fn log_likelihood(&self, k: usize, theta: &[f64]) -> f64;
    fn laplace(&self, k: usize, start: &[f64], fixed_s0: bool) -> std::result::Result<LaplaceProposal, ScoringFailure>;
}

/// Poisson-GLM likelihoods of the voxels in one block, given counts.
pub struct GlmBlockLikelihood<'a> {
    pub z: &'a DMatrix<f64>,
    pub counts: Vec<Vec<u64>>,
    pub sigma2: Vec<f64>,
    pub scoring: ScoringOptions,
}

impl BlockLikelihood for GlmBlockLikelihood<'_> {
    fn log_likelihood(&self, k: usize, theta: &[f64]) -> f64 {
        log_conditional_unchecked(theta, &self.counts[k], self.sigma2[k], self.z)
    }

    fn laplace(&self, k: usize, start: &[f64], fixed_s0: bool) -> std::result::Result<LaplaceProposal, ScoringFailure> {
        let opts = ScoringOptions { fixed_s0, ..self.scoring };
        scoring_unchecked(start, &self.counts[k], self.sigma2[k], self.z, &opts).map(|(p, _)| p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivityMode {
    /// Proposals with a non-positive diffusivity are rejected.
    Constrained,
    /// No constraint; the fraction of positive draws is reported.
    Counting,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockOptions {
    pub double_scoring: bool,
    /// Proposal covariance multiplier.
    pub inflation: f64,
    pub positivity: PositivityMode,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self { double_scoring: true, inflation: 1.0, positivity: PositivityMode::Constrained }
    }
}

/// Read-only view of the field around one block.
pub struct BlockContext<'a> {
    pub block: &'a [usize],
    pub field: &'a ParameterField,
    pub graph: &'a VoxelGraph,
    /// `blockdiag(ρ, Ω_D)`.
    pub omega: &'a DMatrix<f64>,
    pub spec: ModelSpec,
}

impl BlockContext<'_> {
    fn local_index(&self, v: usize) -> Option<usize> {
        self.block.binary_search(&v).ok()
    }

    /// Exact log target (likelihood plus pairwise prior on edges touching
    /// the block) for candidate block values.
    pub fn log_target(&self, lik: &dyn BlockLikelihood, values: &[Vec<f64>]) -> f64 {
        let p = self.field.p;
        let mut total = 0.0;
        for (k, th) in values.iter().enumerate() {
            total += lik.log_likelihood(k, th);
        }
        let mut diff = vec![0.0; p];
        let mut energy = 0.0;
        for (k, &v) in self.block.iter().enumerate() {
            for &w in &self.graph.neighbors[v] {
                let other: &[f64] = match self.local_index(w) {
                    // Count interior edges once.
                    Some(j) if j < k => continue,
                    Some(j) if j == k => continue,
                    Some(j) => &values[j],
                    None => self.field.get(w),
                };
                for i in 0..p {
                    diff[i] = values[k][i] - other[i];
                }
                energy += quad_form(self.omega, &diff);
            }
        }
        total - 0.5 * energy
    }
}

/// The joint Gaussian proposal of a block.
pub struct BlockGaussian {
    /// `(local voxel, coordinate)` of each free scalar, in factor order.
    free: Vec<(usize, usize)>,
    mean: Vec<f64>,
    chol: BandCholesky,
    inflation: f64,
    /// Values of the coordinates held fixed (θ₀ of fixed-S₀ voxels).
    fixed_values: Vec<(usize, f64)>,
}

/// Axis order for voxel sorting that minimizes the block bandwidth.
fn block_order(ctx: &BlockContext) -> (Vec<usize>, usize) {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut best: Option<(Vec<usize>, usize)> = None;
    for perm in perms {
        let mut order: Vec<usize> = (0..ctx.block.len()).collect();
        order.sort_by_key(|&k| {
            let c = ctx.graph.coords[ctx.block[k]];
            // perm[0] is the slowest axis.
            (c[perm[0]], c[perm[1]], c[perm[2]])
        });
        let mut pos = vec![0usize; order.len()];
        for (i, &k) in order.iter().enumerate() {
            pos[k] = i;
        }
        let mut bw = 0;
        for (k, &v) in ctx.block.iter().enumerate() {
            for &w in &ctx.graph.neighbors[v] {
                if let Some(j) = ctx.local_index(w) {
                    bw = bw.max(pos[k].abs_diff(pos[j]));
                }
            }
        }
        if best.as_ref().is_none_or(|(_, b)| bw < *b) {
            best = Some((order, bw));
        }
    }
    best.expect("six candidate orders")
}

impl BlockGaussian {
    /// Builds `Ψ` and `μ` from per-voxel Laplace approximations.
    pub fn new(ctx: &BlockContext, props: &[LaplaceProposal], inflation: f64) -> Result<Self> {
        let p = ctx.field.p;
        let (order, bw_vox) = block_order(ctx);
        let mut free = Vec::new();
        let mut fixed_values = Vec::new();
        let mut slots: Vec<Vec<usize>> = vec![vec![usize::MAX; p]; ctx.block.len()];
        for &k in &order {
            for j in 0..p {
                if j == 0 && props[k].fixed_s0 {
                    fixed_values.push((k, props[k].mode[0]));
                    continue;
                }
                slots[k][j] = free.len();
                free.push((k, j));
            }
        }
        let n = free.len();
        let mut psi = DMatrix::zeros(n, n);
        let mut xi = vec![0.0; n];
        for (k, &v) in ctx.block.iter().enumerate() {
            let prop = &props[k];
            let o = usize::from(prop.fixed_s0);
            let deg = ctx.graph.degree(v) as f64;
            // Diagonal block: deg·Ω + Î.
            for a in 0..p {
                for b in 0..p {
                    let mut val = deg * ctx.omega[(a, b)];
                    if a >= o && b >= o {
                        val += prop.precision[(a - o, b - o)];
                    }
                    add_entry(&mut psi, &mut xi, &slots[k], &slots[k], a, b, val, props, k);
                }
            }
            // Likelihood part of ξ: Î θ̂ over the free coordinates.
            let k_free = prop.precision.nrows();
            for a in 0..k_free {
                let s: f64 = (0..k_free).map(|b| prop.precision[(a, b)] * prop.mode[b + o]).sum();
                if slots[k][a + o] != usize::MAX {
                    xi[slots[k][a + o]] += s;
                }
            }
            for &w in &ctx.graph.neighbors[v] {
                match ctx.local_index(w) {
                    Some(j) => {
                        for a in 0..p {
                            for b in 0..p {
                                let val = -ctx.omega[(a, b)];
                                add_entry(&mut psi, &mut xi, &slots[k], &slots[j], a, b, val, props, j);
                            }
                        }
                    }
                    None => {
                        let th = ctx.field.get(w);
                        for a in 0..p {
                            if slots[k][a] == usize::MAX {
                                continue;
                            }
                            let s: f64 = (0..p).map(|b| ctx.omega[(a, b)] * th[b]).sum();
                            xi[slots[k][a]] += s;
                        }
                    }
                }
            }
        }
        let bw = (bw_vox + 1) * p;
        let chol = BandCholesky::new(&psi, bw)?;
        let mean = chol.solve_upper(&chol.solve_lower(&xi));
        Ok(Self { free, mean, chol, inflation, fixed_values })
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    /// Draws block values, starting from `template` for fixed coordinates.
    pub fn sample<R: Rng + ?Sized>(&self, template: &[Vec<f64>], rng: &mut R) -> Vec<Vec<f64>> {
        let e: Vec<f64> = (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = self.chol.solve_upper(&e);
        let mut out = template.to_vec();
        let s = self.inflation.sqrt();
        for (i, &(k, j)) in self.free.iter().enumerate() {
            out[k][j] = self.mean[i] + s * x[i];
        }
        for &(k, v) in &self.fixed_values {
            out[k][0] = v;
        }
        out
    }

    /// Log density of block values; −∞ when a fixed coordinate disagrees.
    pub fn log_density(&self, values: &[Vec<f64>]) -> f64 {
        if self.fixed_values.iter().any(|&(k, v)| values[k][0] != v) {
            return f64::NEG_INFINITY;
        }
        let d: Vec<f64> = self
            .free
            .iter()
            .enumerate()
            .map(|(i, &(k, j))| values[k][j] - self.mean[i])
            .collect();
        let u = self.chol.mul_upper(&d);
        let q: f64 = u.iter().map(|x| x * x).sum::<f64>() / self.inflation;
        let n = self.dim() as f64;
        0.5 * (self.chol.log_det() - n * self.inflation.ln()) - 0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * q
    }

    pub fn mean_values(&self, template: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = template.to_vec();
        for (i, &(k, j)) in self.free.iter().enumerate() {
            out[k][j] = self.mean[i];
        }
        for &(k, v) in &self.fixed_values {
            out[k][0] = v;
        }
        out
    }
}

/// Adds `val` at (row coordinate `a` of voxel slots `rs`, column coordinate
/// `b` of `cs`); a fixed column coordinate moves to the right-hand side.
#[allow(clippy::too_many_arguments)]
fn add_entry(
    psi: &mut DMatrix<f64>,
    xi: &mut [f64],
    rs: &[usize],
    cs: &[usize],
    a: usize,
    b: usize,
    val: f64,
    props: &[LaplaceProposal],
    col_voxel: usize,
) {
    let (r, c) = (rs[a], cs[b]);
    if r == usize::MAX {
        return;
    }
    if c == usize::MAX {
        // Column coordinate is a fixed θ₀: condition on it.
        xi[r] -= val * props[col_voxel].mode[0];
        return;
    }
    psi[(r, c)] += val;
}

/// Result of one block proposal.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockOutcome {
    Accepted { values: Vec<Vec<f64>>, fixed_s0: Vec<bool>, log_ratio: f64 },
    Rejected { fixed_s0: Vec<bool>, log_ratio: f64 },
    Skipped { reason: String },
}

/// Forward Laplace approximations for every voxel of the block, falling back
/// to fixed `S₀` per voxel; `None` if some voxel fails both ways.
fn block_laplace(
    lik: &dyn BlockLikelihood,
    starts: &[Vec<f64>],
    force_fixed: Option<&[bool]>,
) -> std::result::Result<Vec<LaplaceProposal>, String> {
    let mut out = Vec::with_capacity(starts.len());
    for (k, s) in starts.iter().enumerate() {
        let prop = match force_fixed {
            Some(f) => lik.laplace(k, s, f[k]).map_err(|e| e.reason)?,
            None => match lik.laplace(k, s, false) {
                Ok(p) => p,
                Err(_) => lik.laplace(k, s, true).map_err(|e| e.reason)?,
            },
        };
        out.push(prop);
    }
    Ok(out)
}

/// Proposes new values for a block and returns the log Hastings ratio
/// together with the proposal, without the accept/reject step.
pub fn propose_block<R: Rng + ?Sized>(
    ctx: &BlockContext,
    lik: &dyn BlockLikelihood,
    opts: &BlockOptions,
    rng: &mut R,
) -> std::result::Result<(Vec<Vec<f64>>, Vec<bool>, f64), String> {
    let current: Vec<Vec<f64>> = ctx.block.iter().map(|&v| ctx.field.get(v).to_vec()).collect();
    let fwd_props = block_laplace(lik, &current, None)?;
    let fixed: Vec<bool> = fwd_props.iter().map(|p| p.fixed_s0).collect();
    let fwd = BlockGaussian::new(ctx, &fwd_props, opts.inflation).map_err(|e| e.to_string())?;
    let proposed = fwd.sample(&current, rng);
    if opts.positivity == PositivityMode::Constrained
        && proposed
            .iter()
            .any(|th| positivity_unchecked(&ctx.spec, &th[1..]).verdict == Positivity::Negative)
    {
        return Ok((proposed, fixed, f64::NEG_INFINITY));
    }
    let log_q_fwd = fwd.log_density(&proposed);
    let log_q_bwd = if opts.double_scoring {
        // Re-score from the proposal. The reverse move would choose its
        // fixed-S₀ set from the proposed state; if that set differs the
        // reverse density is zero.
        let bwd_free = block_laplace(lik, &proposed, None);
        match bwd_free {
            Ok(props) if props.iter().map(|p| p.fixed_s0).eq(fixed.iter().copied()) => {
                match BlockGaussian::new(ctx, &props, opts.inflation) {
                    Ok(b) => b.log_density(&current),
                    Err(_) => f64::NEG_INFINITY,
                }
            }
            _ => f64::NEG_INFINITY,
        }
    } else {
        fwd.log_density(&current)
    };
    let ratio = ctx.log_target(lik, &proposed) - ctx.log_target(lik, &current) + log_q_bwd - log_q_fwd;
    Ok((proposed, fixed, if ratio.is_nan() { f64::NEG_INFINITY } else { ratio }))
}

/// Block Metropolis–Hastings update with the Poisson-GLM likelihood. Counts
/// of the block voxels are redrawn first.
pub fn update_theta_block<R: Rng + ?Sized>(
    ctx: &BlockContext,
    problem: &Problem,
    sigma2: &[f64],
    scoring: &ScoringOptions,
    opts: &BlockOptions,
    rng: &mut R,
) -> BlockOutcome {
    let counts: Vec<Vec<u64>> = ctx
        .block
        .iter()
        .map(|&v| update_counts(problem.y_of(v), ctx.field.get(v), sigma2[v], &problem.z, rng))
        .collect();
    let lik = GlmBlockLikelihood {
        z: &problem.z,
        counts,
        sigma2: ctx.block.iter().map(|&v| sigma2[v]).collect(),
        scoring: *scoring,
    };
    match propose_block(ctx, &lik, opts, rng) {
        Err(reason) => BlockOutcome::Skipped { reason },
        Ok((values, fixed_s0, log_ratio)) => {
            let u: f64 = rng.sample(StandardUniform);
            if log_ratio > f64::NEG_INFINITY && u.ln() < log_ratio {
                BlockOutcome::Accepted { values, fixed_s0, log_ratio }
            } else {
                BlockOutcome::Rejected { fixed_s0, log_ratio }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Hyperparameters

/// Edge differences `θ(v) − θ(w)` restricted to the tensor coordinates.
fn edge_diffs(field: &ParameterField, graph: &VoxelGraph) -> Vec<Vec<f64>> {
    graph
        .edges
        .iter()
        .map(|&(v, w)| field.get(v)[1..].iter().zip(&field.get(w)[1..]).map(|(a, b)| a - b).collect())
        .collect()
}

/// Shapes and rates of the Gamma conditionals of `(δ, η)`.
pub fn hyper_2nd_conditional(field: &ParameterField, graph: &VoxelGraph) -> [(f64, f64); 2] {
    let nv = graph.len() as f64;
    let (mut r_delta, mut r_eta) = (0.0, 0.0);
    for d in edge_diffs(field, graph) {
        let t = Tensor2::from_slice(&d);
        let m = t.matrix();
        let tr = m.trace();
        let tr2 = (m * m).trace();
        r_delta += tr * tr / 6.0;
        r_eta += 0.5 * tr2 - tr * tr / 6.0;
    }
    [(0.5 * nv, r_delta), (2.5 * nv, r_eta.max(0.0))]
}

fn draw_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Option<f64> {
    if !(rate > 0.0 && shape > 0.0) {
        return None;
    }
    Gamma::new(shape, 1.0 / rate).ok().map(|g| g.sample(rng))
}

pub fn update_hyper_2nd<R: Rng + ?Sized>(field: &ParameterField, graph: &VoxelGraph, rng: &mut R) -> Option<IsoPrecision2> {
    let [(sd, rd), (se, re)] = hyper_2nd_conditional(field, graph);
    let delta = draw_gamma(sd, rd, rng)?;
    let eta = draw_gamma(se, re, rng)?;
    IsoPrecision2::from_eta_delta(eta, delta).ok()
}

/// Shapes and rates of the Gamma conditionals of `(α, β, δ)`.
pub fn hyper_4th_conditional(field: &ParameterField, graph: &VoxelGraph) -> [(f64, f64); 3] {
    let nv = graph.len() as f64;
    let basis = omega_4th_abd_basis();
    let mut rates = [0.0; 3];
    for d in edge_diffs(field, graph) {
        for (r, b) in rates.iter_mut().zip(&basis) {
            *r += 0.5 * quad_form(b, &d);
        }
    }
    [(4.5 * nv, rates[0].max(0.0)), (2.5 * nv, rates[1].max(0.0)), (0.5 * nv, rates[2].max(0.0))]
}

pub fn update_hyper_4th<R: Rng + ?Sized>(field: &ParameterField, graph: &VoxelGraph, rng: &mut R) -> Option<IsoPrecision4> {
    let c = hyper_4th_conditional(field, graph);
    let alpha = draw_gamma(c[0].0, c[0].1, rng)?;
    let beta = draw_gamma(c[1].0, c[1].1, rng)?;
    let delta = draw_gamma(c[2].0, c[2].1, rng)?;
    IsoPrecision4::from_alpha_beta_delta(alpha, beta, delta).ok()
}

/// Shapes and rates of the Gamma conditionals of `a₂ℓ⁻²`, one per degree.
pub fn hyper_sh_conditional(field: &ParameterField, graph: &VoxelGraph, order: usize) -> Vec<(f64, f64)> {
    let nv = graph.len() as f64;
    let idx = crate::design::sh_indices(order);
    let mut rates = vec![0.0; order + 1];
    for d in edge_diffs(field, graph) {
        for (c, (l, _)) in d.iter().zip(&idx) {
            rates[l / 2] += 0.5 * c * c;
        }
    }
    rates
        .into_iter()
        .enumerate()
        .map(|(k, r)| ((2.0 * k as f64 + 0.5) * nv, r))
        .collect()
}

/// Draws every degree independently; degrees with zero rate keep their value.
pub fn update_hyper_sh<R: Rng + ?Sized>(
    field: &ParameterField,
    graph: &VoxelGraph,
    current: &PowerSpectrum,
    rng: &mut R,
) -> PowerSpectrum {
    let cond = hyper_sh_conditional(field, graph, current.a2l_sq.len() - 1);
    let mut out = current.clone();
    for (k, (shape, rate)) in cond.into_iter().enumerate() {
        if let Some(prec) = draw_gamma(shape, rate, rng) {
            out.a2l_sq[k] = 1.0 / prec;
        } else {
            log::warn!("spectrum degree {} has a zero rate; keeping a{}^2", 2 * k, 2 * k);
        }
    }
    out
}

/// One hyperparameter Gibbs step for any family; `None` means unchanged.
pub fn update_hyper<R: Rng + ?Sized>(hyper: &Hyper, field: &ParameterField, graph: &VoxelGraph, rng: &mut R) -> Hyper {
    match hyper {
        Hyper::None => Hyper::None,
        Hyper::Iso2(_) => match update_hyper_2nd(field, graph, rng) {
            Some(p) => Hyper::Iso2(p),
            None => {
                log::warn!("2nd-order hyperparameter rates vanish; update skipped");
                hyper.clone()
            }
        },
        Hyper::Iso4(_) => match update_hyper_4th(field, graph, rng) {
            Some(p) => Hyper::Iso4(p),
            None => {
                log::warn!("4th-order hyperparameter rates vanish; update skipped");
                hyper.clone()
            }
        },
        Hyper::Spectrum(s) => Hyper::Spectrum(update_hyper_sh(field, graph, s, rng)),
    }
}

/// Hyperparameters at their conditional means given a field, e.g. the WLS
/// initializer. Falls back to unit precisions where a rate vanishes.
pub fn initial_hyper(spec: &ModelSpec, field: &ParameterField, graph: &VoxelGraph) -> Result<Hyper> {
    let mean = |(s, r): (f64, f64)| if r > 0.0 { s / r } else { 1.0 };
    match spec.family {
        Family::Intercept => Ok(Hyper::None),
        Family::Tensor2 => {
            let [d, e] = hyper_2nd_conditional(field, graph);
            Ok(Hyper::Iso2(IsoPrecision2::from_eta_delta(mean(e), mean(d))?))
        }
        Family::Tensor4 => {
            let [a, b, d] = hyper_4th_conditional(field, graph);
            Ok(Hyper::Iso4(IsoPrecision4::from_alpha_beta_delta(mean(a), mean(b), mean(d))?))
        }
        Family::Sh { order } => {
            let a2 = hyper_sh_conditional(field, graph, order).into_iter().map(|c| 1.0 / mean(c)).collect();
            Ok(Hyper::Spectrum(PowerSpectrum::new(a2, 0.0)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Chain driver

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BurnIn {
    /// First thinned cycle after which the log-posterior over the trailing
    /// window shows no trend (|t| < 2 for the regression slope).
    Auto,
    Fixed(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperMode {
    Estimated,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub cycles: u64,
    pub burn_in: BurnIn,
    pub thin: u64,
    pub block_radius: usize,
    pub positivity: PositivityMode,
    /// Precision of pairwise θ₀ differences; 0 gives a flat prior.
    pub rho: f64,
    pub hyper_mode: HyperMode,
    pub workers: usize,
    pub double_scoring: bool,
    pub inflation: f64,
    pub scoring: ScoringOptions,
    /// Run the Gamma θ₀ update for every voxel each cycle, not only for
    /// voxels whose block update held θ₀ fixed.
    pub theta0_every_cycle: bool,
    pub seed: u64,
    /// Keep thinned post-burn-in draws of θ and σ².
    pub store_draws: bool,
    /// Trailing window (cycles) of the automatic burn-in rule.
    pub burn_in_window: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            cycles: 2000,
            burn_in: BurnIn::Auto,
            thin: 10,
            block_radius: 2,
            positivity: PositivityMode::Constrained,
            rho: 0.0,
            hyper_mode: HyperMode::Estimated,
            workers: 1,
            double_scoring: true,
            inflation: 1.0,
            scoring: ScoringOptions::default(),
            theta0_every_cycle: false,
            seed: 1,
            store_draws: true,
            burn_in_window: 500,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thin must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if !(self.inflation.is_finite() && self.inflation > 0.0) {
            return Err(Error::Config("inflation must be > 0".into()));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::Config("rho must be >= 0".into()));
        }
        if !(self.scoring.tol > 0.0) || self.scoring.max_iter == 0 {
            return Err(Error::Config("scoring tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub cycle: u64,
    pub log_likelihood: f64,
    pub log_prior: f64,
    pub hyper: Vec<f64>,
    pub acceptance: f64,
}

/// Posterior summaries. Vectors over voxels are in voxel order; `theta_*`
/// are voxel-major with `p` entries per voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub spec: ModelSpec,
    pub n_voxels: usize,
    pub p: usize,
    pub cycles: u64,
    pub burn_in: u64,
    /// Post-burn-in cycles averaged into the means (every cycle, not only thinned ones).
    pub n_samples: u64,
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
    pub sigma2_mean: Vec<f64>,
    pub sigma2_sd: Vec<f64>,
    pub hyper_names: Vec<String>,
    pub hyper_mean: Vec<f64>,
    pub hyper_sd: Vec<f64>,
    /// Accepted / attempted block proposals touching each voxel.
    pub acceptance: Vec<f64>,
    /// Fraction of thinned post-burn-in draws with positive diffusivity.
    pub positive_fraction: Vec<f64>,
    pub skipped_blocks: u64,
    pub dic: Option<DicReport>,
    pub final_state: ChainState,
}

/// Thinned post-burn-in draws.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Draws {
    pub cycles: Vec<u64>,
    /// One field per draw, voxel-major.
    pub theta: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub summary: ChainSummary,
    pub trace: Vec<TraceRow>,
    pub draws: Draws,
}

#[derive(Default, Clone)]
struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self { n: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    fn sd(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.mean.len()];
        }
        self.m2.iter().map(|m| (m / (self.n - 1) as f64).sqrt()).collect()
    }
}

/// Slope t-statistic of `y` against its index.
fn trend_t(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 3 {
        return f64::INFINITY;
    }
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - xm;
        sxx += dx * dx;
        sxy += dx * (v - ym);
    }
    let slope = sxy / sxx;
    let resid: f64 = y
        .iter()
        .enumerate()
        .map(|(i, v)| (v - ym - slope * (i as f64 - xm)).powi(2))
        .sum();
    let se = (resid / (n - 2.0) / sxx).sqrt();
    if se == 0.0 {
        return if slope == 0.0 { 0.0 } else { f64::INFINITY };
    }
    slope / se
}

fn hyper_log_prior(hyper: &Hyper, nv: f64) -> f64 {
    match hyper {
        Hyper::None => 0.0,
        Hyper::Iso2(p) => 0.5 * nv * (5.0 * p.eta.ln() + p.delta().ln()) - p.eta.ln() - p.delta().ln(),
        Hyper::Iso4(p) => {
            0.5 * nv * (9.0 * p.alpha().ln() + 5.0 * p.beta().ln() + p.delta().ln())
                - p.alpha().ln()
                - p.beta().ln()
                - p.delta().ln()
        }
        Hyper::Spectrum(s) => s
            .a2l_sq
            .iter()
            .enumerate()
            .map(|(k, a)| -(2.0 * k as f64 + 0.5) * nv * a.ln() + a.ln())
            .sum(),
    }
}

/// Runs the chain from `init`.
pub fn run_chain(problem: &Problem, init: ChainState, config: &SamplerConfig) -> Result<ChainOutput> {
    config.validate()?;
    init.validate(problem)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_chain_inner(problem, init, config))
}

fn run_chain_inner(problem: &Problem, init: ChainState, config: &SamplerConfig) -> Result<ChainOutput> {
    let nv = problem.n_voxels();
    let p = problem.spec.n_params();
    let seed = config.seed;
    let mut state = init;
    state.rng_seed = seed;
    let start_cycle = state.cycle;
    let block_opts = BlockOptions {
        double_scoring: config.double_scoring,
        inflation: config.inflation,
        positivity: config.positivity,
    };
    let hyper_names: Vec<String> = state.hyper.named_values().into_iter().map(|(n, _)| n).collect();

    let mut attempts = vec![0u64; nv];
    let mut accepts = vec![0u64; nv];
    let mut skipped = 0u64;
    let mut theta_acc = Welford::new(nv * p);
    let mut sigma_acc = Welford::new(nv);
    let mut hyper_acc = Welford::new(hyper_names.len());
    let mut positive = vec![0u64; nv];
    let mut n_thinned = 0u64;
    let mut dic_acc = DicAccumulator::new(nv * p, nv);
    let mut trace = Vec::new();
    let mut draws = Draws::default();
    let mut logpost_hist: Vec<f64> = Vec::new();
    let mut burn_in_end: Option<u64> = match config.burn_in {
        BurnIn::Fixed(b) => Some(start_cycle + b),
        BurnIn::Auto => None,
    };
    let auto_cap = start_cycle + config.cycles / 2;
    let window_points = ((config.burn_in_window.min(config.cycles.max(1) / 4).max(10)) / config.thin).max(3) as usize;

    for cycle in start_cycle..start_cycle + config.cycles {
        let omega = field_omega(&state.hyper, &problem.spec, config.rho)?;
        let partition = partition_blocks(&problem.graph, config.block_radius, cycle);
        let mut held_fixed = vec![false; nv];
        let mut cyc_attempts = 0u64;
        let mut cyc_accepts = 0u64;
        for (s, blocks) in partition.steps.iter().enumerate() {
            let outcomes: Vec<BlockOutcome> = blocks
                .par_iter()
                .enumerate()
                .map(|(b, block)| {
                    let mut rng = stream(seed, cycle, STREAM_BLOCK, s as u64, b as u64);
                    let ctx = BlockContext {
                        block,
                        field: &state.theta,
                        graph: &problem.graph,
                        omega: &omega,
                        spec: problem.spec,
                    };
                    update_theta_block(&ctx, problem, &state.sigma2, &config.scoring, &block_opts, &mut rng)
                })
                .collect();
            for (block, outcome) in blocks.iter().zip(outcomes) {
                match outcome {
                    BlockOutcome::Accepted { values, fixed_s0, .. } => {
                        cyc_attempts += 1;
                        cyc_accepts += 1;
                        for ((&v, vals), f) in block.iter().zip(values).zip(fixed_s0) {
                            state.theta.get_mut(v).copy_from_slice(&vals);
                            attempts[v] += 1;
                            accepts[v] += 1;
                            held_fixed[v] |= f;
                        }
                    }
                    BlockOutcome::Rejected { fixed_s0, .. } => {
                        cyc_attempts += 1;
                        for (&v, f) in block.iter().zip(fixed_s0) {
                            attempts[v] += 1;
                            held_fixed[v] |= f;
                        }
                    }
                    BlockOutcome::Skipped { reason } => {
                        skipped += 1;
                        log::debug!("cycle {cycle}: block skipped: {reason}");
                        for &v in block {
                            held_fixed[v] = true;
                        }
                    }
                }
            }
        }

        // Per-voxel counts, θ₀ and σ².
        let voxel_updates: Vec<(Option<f64>, f64)> = (0..nv)
            .into_par_iter()
            .map(|v| {
                let mut rng = stream(seed, cycle, STREAM_VOXEL, v as u64, 0);
                let y = problem.y_of(v);
                let mut th = state.theta.get(v).to_vec();
                let s2 = state.sigma2[v];
                let counts = update_counts(y, &th, s2, &problem.z, &mut rng);
                let mut new_t0 = None;
                if held_fixed[v] || config.theta0_every_cycle {
                    if let Some(t0) = update_theta0(&th, &counts, s2, &problem.z, &mut rng) {
                        // With ρ > 0 the Gamma draw is an independence
                        // proposal corrected by the prior ratio.
                        let accept = if config.rho > 0.0 {
                            let old = th[0];
                            let e = |x: f64| {
                                problem.graph.neighbors[v]
                                    .iter()
                                    .map(|&w| (x - state.theta.get(w)[0]).powi(2))
                                    .sum::<f64>()
                            };
                            let log_r = -0.5 * config.rho * (e(t0) - e(old));
                            let u: f64 = rng.sample(StandardUniform);
                            u.ln() < log_r
                        } else {
                            true
                        };
                        if accept {
                            th[0] = t0;
                            new_t0 = Some(t0);
                        }
                    }
                }
                let s2_new = update_sigma2(y, &th, &counts, &problem.z, &mut rng).unwrap_or(s2);
                (new_t0, s2_new)
            })
            .collect();
        for (v, (t0, s2)) in voxel_updates.into_iter().enumerate() {
            if let Some(t0) = t0 {
                state.theta.get_mut(v)[0] = t0;
            }
            state.sigma2[v] = s2;
        }
        if !state.theta.data.iter().all(|x| x.is_finite()) || !state.sigma2.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Numeric(format!("non-finite state at cycle {cycle}")));
        }

        if config.hyper_mode == HyperMode::Estimated {
            let mut rng = stream(seed, cycle, STREAM_HYPER, 0, 0);
            state.hyper = update_hyper(&state.hyper, &state.theta, &problem.graph, &mut rng);
        }
        state.cycle = cycle + 1;

        let burned = burn_in_end.is_some_and(|b| cycle >= b);
        if burned {
            theta_acc.push(&state.theta.data);
            sigma_acc.push(&state.sigma2);
            let hv: Vec<f64> = state.hyper.named_values().into_iter().map(|(_, v)| v).collect();
            hyper_acc.push(&hv);
        }

        let is_thinned = (cycle + 1 - start_cycle) % config.thin == 0;
        if is_thinned {
            let voxel_ll: Vec<f64> = (0..nv)
                .into_par_iter()
                .map(|v| problem.voxel_log_likelihood(v, state.theta.get(v), state.sigma2[v]))
                .collect();
            let ll: f64 = voxel_ll.iter().sum();
            let energy = crate::priors::field_prior_energy(&state.theta, &problem.graph, &omega)?;
            let lp = -energy + hyper_log_prior(&state.hyper, nv as f64)
                - state.sigma2.iter().map(|s| s.ln()).sum::<f64>();
            trace.push(TraceRow {
                cycle: cycle + 1,
                log_likelihood: ll,
                log_prior: lp,
                hyper: state.hyper.named_values().into_iter().map(|(_, v)| v).collect(),
                acceptance: if cyc_attempts == 0 { 0.0 } else { cyc_accepts as f64 / cyc_attempts as f64 },
            });
            logpost_hist.push(ll + lp);
            if burned {
                n_thinned += 1;
                dic_acc.push(&state.theta.data, &state.sigma2, -2.0 * ll);
                for v in 0..nv {
                    if positivity_unchecked(&problem.spec, &state.theta.get(v)[1..]).verdict == Positivity::Positive {
                        positive[v] += 1;
                    }
                }
                if config.store_draws {
                    draws.cycles.push(cycle + 1);
                    draws.theta.push(state.theta.data.clone());
                    draws.sigma2.push(state.sigma2.clone());
                }
            } else if burn_in_end.is_none() {
                let done = logpost_hist.len() >= window_points
                    && trend_t(&logpost_hist[logpost_hist.len() - window_points..]).abs() < 2.0;
                if done || cycle + 1 >= auto_cap {
                    burn_in_end = Some(cycle + 1);
                }
            }
        }
    }

    let burn_in = burn_in_end.unwrap_or(start_cycle + config.cycles).saturating_sub(start_cycle).min(config.cycles);
    let (theta_mean, theta_sd, sigma2_mean, sigma2_sd, hyper_mean, hyper_sd) = if theta_acc.n == 0 {
        let hv: Vec<f64> = state.hyper.named_values().into_iter().map(|(_, v)| v).collect();
        let hz = vec![0.0; hv.len()];
        (state.theta.data.clone(), vec![0.0; nv * p], state.sigma2.clone(), vec![0.0; nv], hv, hz)
    } else {
        (
            theta_acc.mean.clone(),
            theta_acc.sd(),
            sigma_acc.mean.clone(),
            sigma_acc.sd(),
            hyper_acc.mean.clone(),
            hyper_acc.sd(),
        )
    };
    let dic = dic_acc.finish(problem);
    let summary = ChainSummary {
        spec: problem.spec,
        n_voxels: nv,
        p,
        cycles: config.cycles,
        burn_in,
        n_samples: theta_acc.n,
        theta_mean,
        theta_sd,
        sigma2_mean,
        sigma2_sd,
        hyper_names,
        hyper_mean,
        hyper_sd,
        acceptance: attempts
            .iter()
            .zip(&accepts)
            .map(|(&a, &c)| if a == 0 { 0.0 } else { c as f64 / a as f64 })
            .collect(),
        positive_fraction: positive
            .iter()
            .map(|&c| if n_thinned == 0 { 0.0 } else { c as f64 / n_thinned as f64 })
            .collect(),
        skipped_blocks: skipped,
        dic,
        final_state: state,
    };
    Ok(ChainOutput { summary, trace, draws })
}

/// Principal direction of the posterior-mean tensor of voxel `v`
/// (Tensor2 summaries only).
pub fn posterior_principal_direction(summary: &ChainSummary, v: usize) -> Vector3<f64> {
    let p = summary.p;
    Tensor2::from_slice(&summary.theta_mean[v * p + 1..(v + 1) * p]).principal_direction()
}

/// Mean of a vector-valued quantity over draws; convenience for reports.
pub fn draws_mean(draws: &[Vec<f64>]) -> Vec<f64> {
    if draws.is_empty() {
        return vec![];
    }
    let mut m = vec![0.0; draws[0].len()];
    for d in draws {
        for (a, b) in m.iter_mut().zip(d) {
            *a += b;
        }
    }
    let n = draws.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn band_cholesky_matches_dense() {
        let n = 7;
        let a = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 4.0,
            1 => -1.0,
            2 => 0.5,
            _ => 0.0,
        });
        let bc = BandCholesky::new(&a, 2).unwrap();
        let dense = nalgebra::Cholesky::new(a.clone()).unwrap();
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let x = bc.solve_upper(&bc.solve_lower(&b));
        let xd = dense.solve(&DVector::from_vec(b));
        for i in 0..n {
            assert!((x[i] - xd[i]).abs() < 1e-12);
        }
        assert!((bc.log_det() - a.determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn ball_radius() {
        let g = VoxelGraph::full([5, 5, 1]);
        assert_eq!(ball(&g, 12, 0), vec![12]);
        assert_eq!(ball(&g, 12, 1), vec![7, 11, 12, 13, 17]);
        assert_eq!(ball(&g, 12, 2).len(), 13);
    }

    #[test]
    fn sigma2_parameters() {
        let z = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(sigma2_conditional(&[1.0], &[0.0], &[0], &z).unwrap(), (1.0, 1.0));
        assert_eq!(sigma2_conditional(&[1.0], &[0.0], &[2], &z).unwrap().0, 5.0);
        assert!(sigma2_conditional(&[], &[0.0], &[], &DMatrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn trend_detection() {
        let flat: Vec<f64> = (0..50).map(|i| ((i * 7919) % 13) as f64).collect();
        assert!(trend_t(&flat).abs() < 2.0);
        let rising: Vec<f64> = (0..50).map(|i| i as f64 + ((i * 7919) % 3) as f64).collect();
        assert!(trend_t(&rising).abs() > 2.0);
    }
}
