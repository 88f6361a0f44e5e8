//! Isotropic Gaussian tensor priors and pairwise-difference field priors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix6};
use serde::{Deserialize, Serialize};

use crate::design::{dhat, sh_indices, Family, ModelSpec, Tensor2, Tensor4, T4_PRINTED_ORDER};
use crate::error::{domain, Error, Result};

/// Precision parameters of the isotropic 2nd-order prior
/// `exp(−½(η tr D² + λ (tr D)²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoPrecision2 {
    pub eta: f64,
    pub lambda: f64,
}

impl IsoPrecision2 {
    pub fn new(eta: f64, lambda: f64) -> Result<Self> {
        let p = Self { eta, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return domain(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.lambda.is_finite() && self.lambda > -self.eta / 3.0) {
            return domain(format!("lambda must exceed -eta/3, got {}", self.lambda));
        }
        Ok(())
    }

    /// `δ = η + 3λ`, the precision of `tr D / √3`.
    pub fn delta(&self) -> f64 {
        self.eta + 3.0 * self.lambda
    }

    /// Inverse of [`IsoPrecision2::delta`]: `λ = (δ − η)/3`.
    pub fn from_eta_delta(eta: f64, delta: f64) -> Result<Self> {
        Self::new(eta, (delta - eta) / 3.0)
    }
}

/// Precision parameters of the isotropic 4th-order prior. The exponent is
/// `−½ θ_D Ω θ_Dᵀ = −½(η tr D̂² + λ (tr D̂)² + 2γ g(D))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoPrecision4 {
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
}

impl IsoPrecision4 {
    pub fn new(eta: f64, lambda: f64, gamma: f64) -> Result<Self> {
        let p = Self { eta, lambda, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { eta, lambda, gamma } = *self;
        if ![eta, lambda, gamma].iter().all(|x| x.is_finite()) {
            return domain("precision parameters must be finite");
        }
        if !(eta > 0.0) {
            return domain(format!("eta must be > 0, got {eta}"));
        }
        if !(gamma < 0.75 * eta && gamma > -eta) {
            return domain(format!("gamma must lie in (-eta, 3 eta/4), got {gamma}"));
        }
        if !(lambda > -(eta / 5.0 + 8.0 * gamma / 15.0)) {
            return domain(format!("lambda must exceed -(eta/5 + 8 gamma/15), got {lambda}"));
        }
        Ok(())
    }

    /// `α = γ + η`, precision of the degree-4 harmonic part.
    pub fn alpha(&self) -> f64 {
        self.gamma + self.eta
    }

    /// `β = 3η − 4γ`, precision of the degree-2 harmonic part.
    pub fn beta(&self) -> f64 {
        3.0 * self.eta - 4.0 * self.gamma
    }

    /// `δ = 3η + 8γ + 15λ`, precision of the degree-0 harmonic part.
    pub fn delta(&self) -> f64 {
        3.0 * self.eta + 8.0 * self.gamma + 15.0 * self.lambda
    }

    /// Inverts `(α, β, δ)` back to `(η, λ, γ)`.
    pub fn from_alpha_beta_delta(alpha: f64, beta: f64, delta: f64) -> Result<Self> {
        let (eta, lambda, gamma) = abd_to_elg(alpha, beta, delta);
        Self::new(eta, lambda, gamma)
    }
}

pub(crate) fn abd_to_elg(alpha: f64, beta: f64, delta: f64) -> (f64, f64, f64) {
    (
        (beta + 4.0 * alpha) / 7.0,
        (7.0 * delta + 5.0 * beta - 36.0 * alpha) / 105.0,
        (3.0 * alpha - beta) / 7.0,
    )
}

/// Angular power spectrum `a₀², a₂², …, a₂ₙ²` and the θ₀ smoothing
/// precision `rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub a2l_sq: Vec<f64>,
    pub rho: f64,
}

impl PowerSpectrum {
    pub fn new(a2l_sq: Vec<f64>, rho: f64) -> Result<Self> {
        let s = Self { a2l_sq, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a2l_sq.is_empty() || !self.a2l_sq.iter().all(|a| a.is_finite() && *a > 0.0) {
            return domain("power spectrum entries must be finite and > 0");
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return domain("rho must be finite and >= 0");
        }
        Ok(())
    }
}

/// Regularization hyperparameters for one model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hyper {
    /// Intercept-only models carry no tensor prior.
    None,
    Iso2(IsoPrecision2),
    Iso4(IsoPrecision4),
    Spectrum(PowerSpectrum),
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        match self {
            Hyper::None => Ok(()),
            Hyper::Iso2(p) => p.validate(),
            Hyper::Iso4(p) => p.validate(),
            Hyper::Spectrum(s) => s.validate(),
        }
    }

    /// Checks that the hyperparameter kind fits the model family.
    pub fn check_family(&self, spec: &ModelSpec) -> Result<()> {
        let ok = match (self, spec.family) {
            (Hyper::None, Family::Intercept) => true,
            (Hyper::Iso2(_), Family::Tensor2) => true,
            (Hyper::Iso4(_), Family::Tensor4) => true,
            (Hyper::Spectrum(s), Family::Sh { order }) => s.a2l_sq.len() == order + 1,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("hyperparameters {self:?} do not fit model {:?}", spec.family)))
        }
    }

    /// Named scalar values in a fixed order, for traces and summaries.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        match self {
            Hyper::None => vec![],
            Hyper::Iso2(p) => vec![("eta".into(), p.eta), ("lambda".into(), p.lambda)],
            Hyper::Iso4(p) => vec![
                ("eta".into(), p.eta),
                ("lambda".into(), p.lambda),
                ("gamma".into(), p.gamma),
            ],
            Hyper::Spectrum(s) => s
                .a2l_sq
                .iter()
                .enumerate()
                .map(|(k, a)| (format!("a{}_sq", 2 * k), *a))
                .collect(),
        }
    }
}

/// `Ω_D` for `(D11, D22, D33, D12, D13, D23)`.
pub fn omega_2nd(p: &IsoPrecision2) -> Result<Matrix6<f64>> {
    p.validate()?;
    Ok(omega_2nd_linear(p.eta, p.lambda))
}

pub(crate) fn omega_2nd_linear(eta: f64, lambda: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = lambda;
        }
        m[(i, i)] += eta;
        m[(i + 3, i + 3)] = 2.0 * eta;
    }
    m
}

/// The two printed blocks: `Ω′` over (1111, 2222, 3333, 1122, 1133, 2233)
/// and `Ω″` over (1112, 1113, 1222, 2223, 1333, 2333, 1123, 1223, 1233).
pub fn omega_4th_blocks(p: &IsoPrecision4) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    p.validate()?;
    Ok(omega_4th_blocks_linear(p.eta, p.lambda, p.gamma))
}

fn omega_4th_blocks_linear(e: f64, l: f64, g: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (a, b, c) = (e + l, l + g, 2.0 * l);
    let (h, f, k) = (2.0 * l + 2.0 * g, 6.0 * e + 6.0 * g + 4.0 * l, 4.0 * l + 2.0 * g);
    #[rustfmt::skip]
    let o1 = DMatrix::from_row_slice(6, 6, &[
        a, b, b, c, c, h,
        b, a, b, c, h, c,
        b, b, a, h, c, c,
        c, c, h, f, k, k,
        c, h, c, k, f, k,
        h, c, c, k, k, f,
    ]);
    let (ee, gg, ff) = (4.0 * e, -4.0 * g, 12.0 * e + 8.0 * g);
    #[rustfmt::skip]
    let o2 = DMatrix::from_row_slice(9, 9, &[
        ee, 0., gg, 0., 0., 0., 0., 0., gg,
        0., ee, 0., 0., gg, 0., 0., gg, 0.,
        gg, 0., ee, 0., 0., 0., 0., 0., gg,
        0., 0., 0., ee, 0., gg, gg, 0., 0.,
        0., gg, 0., 0., ee, 0., 0., gg, 0.,
        0., 0., 0., gg, 0., ee, gg, 0., 0.,
        0., 0., 0., gg, 0., gg, ff, 0., 0.,
        0., gg, 0., 0., gg, 0., 0., ff, 0.,
        gg, 0., gg, 0., 0., 0., 0., 0., ff,
    ]);
    (o1, o2)
}

/// `Ω` for the 15 coefficients in the tensor layout of [`crate::design`].
pub fn omega_4th(p: &IsoPrecision4) -> Result<DMatrix<f64>> {
    p.validate()?;
    Ok(omega_4th_linear(p.eta, p.lambda, p.gamma))
}

pub(crate) fn omega_4th_linear(e: f64, l: f64, g: f64) -> DMatrix<f64> {
    let (o1, o2) = omega_4th_blocks_linear(e, l, g);
    let mut m = DMatrix::zeros(15, 15);
    for i in 0..15 {
        for j in 0..15 {
            let v = match (i < 6, j < 6) {
                (true, true) => o1[(i, j)],
                (false, false) => o2[(i - 6, j - 6)],
                _ => 0.0,
            };
            m[(T4_PRINTED_ORDER[i], T4_PRINTED_ORDER[j])] = v;
        }
    }
    m
}

/// `Ω` expressed in the `(α, β, δ)` basis: `Ω = αΩ_α + βΩ_β + δΩ_δ`.
pub fn omega_4th_abd_basis() -> [DMatrix<f64>; 3] {
    [
        omega_4th_linear(4.0 / 7.0, -36.0 / 105.0, 3.0 / 7.0),
        omega_4th_linear(1.0 / 7.0, 5.0 / 105.0, -1.0 / 7.0),
        omega_4th_linear(0.0, 7.0 / 105.0, 0.0),
    ]
}

/// Rotation invariant quadratic polynomial of a 4th-order tensor.
pub fn g_invariant(d: &Tensor4) -> f64 {
    let c = |s: &str| {
        let idx: Vec<usize> = s.bytes().map(|b| (b - b'1') as usize).collect();
        d.get(idx[0], idx[1], idx[2], idx[3])
    };
    let (d1111, d2222, d3333) = (c("1111"), c("2222"), c("3333"));
    let (d1122, d1133, d2233) = (c("1122"), c("1133"), c("2233"));
    let (d1123, d1223, d1233) = (c("1123"), c("1223"), c("1233"));
    let (d1112, d1113, d1222) = (c("1112"), c("1113"), c("1222"));
    let (d2223, d1333, d2333) = (c("2223"), c("1333"), c("2333"));
    d1111 * (d2222 + d3333)
        + d2222 * d3333
        + 3.0 * (d1122 * d1122 + d1133 * d1133 + d2233 * d2233)
        + 2.0 * (d1122 * d3333 + d1133 * d2222 + d2233 * d1111 + d1122 * (d1133 + d2233) + d2233 * d1133)
        + 4.0
            * (d1233 * (d1233 - d1222 - d1112)
                + d1223 * (d1223 - d1113 - d1333)
                + d1123 * (d1123 - d2333 - d2223)
                - d1222 * d1112
                - d1113 * d1333
                - d2223 * d2333)
}

/// Precision matrix of the tensor part for any family.
pub fn omega_for(hyper: &Hyper, spec: &ModelSpec) -> Result<DMatrix<f64>> {
    hyper.validate()?;
    hyper.check_family(spec)?;
    Ok(match hyper {
        Hyper::None => DMatrix::zeros(0, 0),
        Hyper::Iso2(p) => {
            let m = omega_2nd_linear(p.eta, p.lambda);
            DMatrix::from_fn(6, 6, |i, j| m[(i, j)])
        }
        Hyper::Iso4(p) => omega_4th_linear(p.eta, p.lambda, p.gamma),
        Hyper::Spectrum(s) => spectrum_diagonal(s, spec),
    })
}

fn spectrum_diagonal(s: &PowerSpectrum, spec: &ModelSpec) -> DMatrix<f64> {
    let Family::Sh { order } = spec.family else {
        unreachable!("family checked by caller")
    };
    let idx = sh_indices(order);
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| {
        if i == j {
            1.0 / s.a2l_sq[idx[i].0 / 2]
        } else {
            0.0
        }
    })
}

/// `blockdiag(ρ, Ω_D)`, the precision of pairwise differences of `θ`.
pub fn field_omega(hyper: &Hyper, spec: &ModelSpec, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho.is_finite() && rho >= 0.0) {
        return domain("rho must be finite and >= 0");
    }
    let od = omega_for(hyper, spec)?;
    let p = spec.n_params();
    let mut m = DMatrix::zeros(p, p);
    m[(0, 0)] = rho;
    m.view_mut((1, 1), (p - 1, p - 1)).copy_from(&od);
    Ok(m)
}

/// Exact log density of the isotropic zero-mean Gaussian prior of a single
/// tensor, with the closed-form normalizing constants.
pub fn iso_log_density(spec: &ModelSpec, coeffs: &[f64], hyper: &Hyper) -> Result<f64> {
    spec.check_len(coeffs)?;
    let omega = omega_for(hyper, spec)?;
    let x = nalgebra::DVector::from_column_slice(coeffs);
    let quad = (x.transpose() * &omega * &x)[(0, 0)];
    let log_norm = match hyper {
        Hyper::None => 0.0,
        Hyper::Iso2(p) => {
            2.5 * p.eta.ln() + 0.5 * p.delta().ln() - 3.0 * (PI * std::f64::consts::SQRT_2).ln()
        }
        Hyper::Iso4(p) => {
            3.0 * 2f64.ln()
                + 0.5 * (9.0 * p.alpha().ln() + 5.0 * p.beta().ln() + p.delta().ln() - 15.0 * PI.ln())
        }
        Hyper::Spectrum(_) => {
            let logdet: f64 = omega.diagonal().iter().map(|v| v.ln()).sum();
            -0.5 * coeffs.len() as f64 * (2.0 * PI).ln() + 0.5 * logdet
        }
    };
    Ok(log_norm - 0.5 * quad)
}

/// Linear correspondences from the angular power spectrum to the tensor
/// precision parameters (orders 2 and 4).
pub fn spectrum_to_precision(s: &PowerSpectrum, spec: &ModelSpec) -> Result<Hyper> {
    s.validate()?;
    let inv: Vec<f64> = s.a2l_sq.iter().map(|a| 1.0 / a).collect();
    match spec.family {
        Family::Tensor2 => {
            if inv.len() != 2 {
                return Err(Error::Dimension { expected: 2, got: inv.len() });
            }
            let eta = 8.0 * PI / 15.0 * inv[1];
            let lambda = 4.0 * PI / 9.0 * inv[0] - 8.0 * PI / 45.0 * inv[1];
            Ok(Hyper::Iso2(IsoPrecision2::new(eta, lambda)?))
        }
        Family::Tensor4 => {
            if inv.len() != 3 {
                return Err(Error::Dimension { expected: 3, got: inv.len() });
            }
            let eta = 48.0 * PI / 245.0 * inv[1] + 128.0 * PI / 2205.0 * inv[2];
            let lambda = 4.0 * PI / 25.0 * inv[0] + 16.0 * PI / 245.0 * inv[1] - 128.0 * PI / 3675.0 * inv[2];
            let gamma = -48.0 * PI / 245.0 * inv[1] + 32.0 * PI / 735.0 * inv[2];
            Ok(Hyper::Iso4(IsoPrecision4::new(eta, lambda, gamma)?))
        }
        _ => Err(Error::NotApplicable("spectrum correspondences exist for Tensor2 and Tensor4".into())),
    }
}

// ---------------------------------------------------------------------------
// Voxel graph and field energy

/// Masked voxels of a 3-D grid with 6-neighbour adjacency. Voxels are
/// numbered in mask order with `x` fastest, then `y`, then `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGraph {
    pub dims: [usize; 3],
    pub coords: Vec<[usize; 3]>,
    pub neighbors: Vec<Vec<usize>>,
    /// Unordered edges `(v, w)` with `v < w`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl VoxelGraph {
    /// `mask` is indexed as `x + nx·(y + ny·z)`.
    pub fn from_mask(dims: [usize; 3], mask: &[bool]) -> Result<Self> {
        let total = dims[0] * dims[1] * dims[2];
        if mask.len() != total {
            return Err(Error::Dimension { expected: total, got: mask.len() });
        }
        let mut id = vec![usize::MAX; total];
        let mut coords = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let flat = x + dims[0] * (y + dims[1] * z);
                    if mask[flat] {
                        id[flat] = coords.len();
                        coords.push([x, y, z]);
                    }
                }
            }
        }
        let mut neighbors = vec![Vec::new(); coords.len()];
        let mut edges = Vec::new();
        for (v, c) in coords.iter().enumerate() {
            for axis in 0..3 {
                for step in [-1i64, 1] {
                    let n = c[axis] as i64 + step;
                    if n < 0 || n >= dims[axis] as i64 {
                        continue;
                    }
                    let mut nc = *c;
                    nc[axis] = n as usize;
                    let w = id[nc[0] + dims[0] * (nc[1] + dims[1] * nc[2])];
                    if w != usize::MAX {
                        neighbors[v].push(w);
                        if v < w {
                            edges.push((v, w));
                        }
                    }
                }
            }
            neighbors[v].sort_unstable();
        }
        edges.sort_unstable();
        Ok(Self { dims, coords, neighbors, edges })
    }

    /// Full grid without holes.
    pub fn full(dims: [usize; 3]) -> Self {
        Self::from_mask(dims, &vec![true; dims[0] * dims[1] * dims[2]]).expect("mask length matches")
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }
}

/// Per-voxel parameter vectors stored contiguously, `p` values per voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterField {
    pub p: usize,
    pub data: Vec<f64>,
}

impl ParameterField {
    pub fn zeros(n_voxels: usize, p: usize) -> Self {
        Self { p, data: vec![0.0; n_voxels * p] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in rows {
            if r.len() != p {
                return Err(Error::Dimension { expected: p, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { p, data })
    }

    pub fn n_voxels(&self) -> usize {
        if self.p == 0 {
            0
        } else {
            self.data.len() / self.p
        }
    }

    pub fn get(&self, v: usize) -> &[f64] {
        &self.data[v * self.p..(v + 1) * self.p]
    }

    pub fn get_mut(&mut self, v: usize) -> &mut [f64] {
        &mut self.data[v * self.p..(v + 1) * self.p]
    }
}

/// `½ Σ_{v∼w} (θ(v) − θ(w)) Ω (θ(v) − θ(w))ᵀ` over the graph edges.
pub fn field_prior_energy(field: &ParameterField, graph: &VoxelGraph, omega: &DMatrix<f64>) -> Result<f64> {
    if field.n_voxels() != graph.len() {
        return Err(Error::Dimension { expected: graph.len(), got: field.n_voxels() });
    }
    if omega.nrows() != field.p || omega.ncols() != field.p {
        return Err(Error::Dimension { expected: field.p, got: omega.nrows() });
    }
    let p = field.p;
    let mut diff = vec![0.0; p];
    let mut total = 0.0;
    for &(v, w) in &graph.edges {
        let (a, b) = (field.get(v), field.get(w));
        for k in 0..p {
            diff[k] = a[k] - b[k];
        }
        total += quad_form(omega, &diff);
    }
    Ok(0.5 * total)
}

pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let p = x.len();
    let mut s = 0.0;
    for j in 0..p {
        if x[j] == 0.0 {
            continue;
        }
        let mut col = 0.0;
        for i in 0..p {
            col += m[(i, j)] * x[i];
        }
        s += col * x[j];
    }
    s
}

/// `η tr D² + λ (tr D)²` for a 2nd-order tensor (the trace form).
pub fn trace_form_2nd(d: &Tensor2, p: &IsoPrecision2) -> f64 {
    let m = d.matrix();
    p.eta * (m * m).trace() + p.lambda * m.trace().powi(2)
}

/// `η tr D̂² + λ (tr D̂)² + 2γ g(D)` for a 4th-order tensor.
pub fn trace_form_4th(d: &Tensor4, p: &IsoPrecision4) -> f64 {
    let h = dhat(d);
    p.eta * (h * h).trace() + p.lambda * h.trace().powi(2) + 2.0 * p.gamma * g_invariant(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_2nd_lambda_zero() {
        let m = omega_2nd(&IsoPrecision2::new(1.0, 0.0).unwrap()).unwrap();
        assert_eq!(m, Matrix6::from_diagonal(&nalgebra::Vector6::new(1., 1., 1., 2., 2., 2.)));
        assert!(IsoPrecision2::new(1.0, -0.4).is_err());
        assert!(IsoPrecision2::new(0.0, 1.0).is_err());
    }

    #[test]
    fn omega_4th_pure_eta() {
        let m = omega_4th(&IsoPrecision4::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        let want = [1., 1., 1., 6., 6., 6., 12., 12., 12., 4., 4., 4., 4., 4., 4.];
        for i in 0..15 {
            for j in 0..15 {
                let w = if i == j { want[i] } else { 0.0 };
                assert_eq!(m[(i, j)], w, "({i},{j})");
            }
        }
    }

    #[test]
    fn g_examples() {
        assert_eq!(g_invariant(&Tensor4::zero()), 0.0);
        let mut d = Tensor4::zero();
        d.0[0] = 1.0;
        d.0[1] = 1.0;
        assert_eq!(g_invariant(&d), 1.0);
    }

    #[test]
    fn abd_round_trip_example() {
        let p = IsoPrecision4::from_alpha_beta_delta(7.0, 7.0, 7.0).unwrap();
        assert!((p.eta - 5.0).abs() < 1e-14);
        assert!((p.gamma - 2.0).abs() < 1e-14);
        assert!((p.lambda + 1.6).abs() < 1e-14);
        assert!((p.alpha() - 7.0).abs() < 1e-13);
        assert!((p.beta() - 7.0).abs() < 1e-13);
        assert!((p.delta() - 7.0).abs() < 1e-13);
    }

    #[test]
    fn two_voxel_energy() {
        let g = VoxelGraph::full([2, 1, 1]);
        assert_eq!(g.edges, vec![(0, 1)]);
        let mut f = ParameterField::zeros(2, 7);
        f.get_mut(0)[1] = 1.0;
        let om = field_omega(&Hyper::Iso2(IsoPrecision2::new(1.0, 0.0).unwrap()), &ModelSpec::tensor2(), 0.0).unwrap();
        assert!((field_prior_energy(&f, &g, &om).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn graph_respects_mask() {
        let mask = [true, false, true, true];
        let g = VoxelGraph::from_mask([2, 2, 1], &mask).unwrap();
        assert_eq!(g.len(), 3);
        // (0,0) - (0,1) and (0,1) - (1,1)
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
        assert!(g.neighbors.iter().enumerate().all(|(v, n)| !n.contains(&v)));
    }
}
