//! Gradient schemes, model families, design rows and tensor algebra.
//!
//! Parameter vectors are laid out as `θ = (log S₀, θ_D)`. The tensor part is
//! ordered as follows:
//!
//! * `Tensor2`: `D11, D22, D33, D12, D13, D23`;
//! * `Tensor4`: `D1111, D2222, D3333, D1122, D1133, D2233, D1123, D1223,
//!   D1233, D1112, D1113, D1222, D2223, D1333, D2333`;
//! * `Sh(n)`: `(ℓ, m)` lexicographic, `ℓ = 0, 2, …, 2n`, `m = −ℓ..=ℓ`.
//!
//! The signal model is `S(u, b) = S₀ exp(−b d(u))` where `d` is the
//! diffusivity function of the tensor or SH expansion.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Factor applied to b-values (s/mm²) when design rows are built, so tensor
/// coefficients come out in 10⁻³ mm²/s.
pub const B_SCALE: f64 = 1e-3;

/// Allowed deviation from unit norm for directions read from text.
const DIRECTION_RENORM_TOL: f64 = 1e-2;
const UNIT_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Gradient schemes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEntry {
    pub u: [f64; 3],
    /// b-value in s/mm².
    pub b: f64,
    pub repeats: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientScheme {
    pub entries: Vec<GradientEntry>,
}

/// The 32 gradient directions of the reference acquisition.
pub const REFERENCE_DIRECTIONS: [[f64; 3]; 32] = [
    [-0.5000, -0.5000, -0.7071],
    [-0.5000, -0.5000, 0.7071],
    [0.7071, -0.7071, -0.0000],
    [-0.6533, -0.2706, -0.7071],
    [-0.2087, -0.6756, -0.7071],
    [0.0197, -0.7068, -0.7071],
    [0.4212, -0.5679, -0.7071],
    [0.6899, -0.1549, -0.7071],
    [-0.6535, -0.2707, -0.7069],
    [-0.2929, -0.7071, -0.6436],
    [0.2945, -0.7064, -0.6436],
    [0.5150, -0.4861, -0.7061],
    [0.7071, -0.2929, -0.6436],
    [-0.7071, -0.4725, -0.5261],
    [-0.4725, -0.7071, -0.5261],
    [0.5555, -0.6439, -0.5261],
    [0.7071, -0.4725, -0.5261],
    [-0.7071, -0.7071, -0.0002],
    [-0.7071, -0.4725, 0.5261],
    [0.7071, -0.4725, 0.5261],
    [0.4725, -0.7071, 0.5261],
    [-0.7071, -0.7071, 0.0078],
    [-0.6364, -0.4252, 0.6436],
    [-0.7060, -0.7060, 0.0547],
    [-0.2929, -0.7071, 0.6436],
    [0.2929, -0.7071, 0.6436],
    [0.7071, -0.7071, 0.0078],
    [0.7071, -0.2929, 0.6436],
    [-0.7063, -0.7063, 0.0489],
    [0.0347, -0.7063, 0.7071],
    [0.7071, -0.7071, 0.0115],
    [0.7071, 0.0000, 0.7071],
];

/// b-values (s/mm²) of the reference acquisition.
pub const REFERENCE_B_VALUES: [f64; 16] = [
    0.0, 62.0, 249.0, 560.0, 996.0, 1556.0, 2240.0, 3049.0, 3982.0, 5040.0, 6222.0, 7529.0,
    8960.0, 10516.0, 12196.0, 14000.0,
];

impl GradientScheme {
    /// Validates every entry; directions within 1e-2 of unit length are
    /// renormalized, b = 0 entries get a zero direction.
    pub fn new(entries: Vec<GradientEntry>) -> Result<Self> {
        let mut out = Vec::with_capacity(entries.len());
        for (i, mut e) in entries.into_iter().enumerate() {
            if !(e.b.is_finite() && e.b >= 0.0) {
                return domain(format!("entry {i}: b must be finite and >= 0, got {}", e.b));
            }
            if e.repeats == 0 {
                return domain(format!("entry {i}: repeat count must be positive"));
            }
            if e.b == 0.0 {
                e.u = [0.0; 3];
            } else {
                let n = norm3(&e.u);
                if !n.is_finite() || (n - 1.0).abs() > DIRECTION_RENORM_TOL {
                    return domain(format!("entry {i}: direction norm {n} is not close to 1"));
                }
                // Leave already-normalized input untouched so text round
                // trips are exact.
                if (n - 1.0).abs() > 4.0 * f64::EPSILON {
                    e.u = [e.u[0] / n, e.u[1] / n, e.u[2] / n];
                }
            }
            out.push(e);
        }
        Ok(Self { entries: out })
    }

    /// The reference protocol for one of the four acquisition slices
    /// (1-based): 16 b-values, 32 directions for every b > 0, 2 or 3 repeats.
    pub fn reference(slice: usize) -> Result<Self> {
        if !(1..=4).contains(&slice) {
            return domain(format!("reference slice must be 1..=4, got {slice}"));
        }
        let mut entries = Vec::new();
        for (k, &b) in REFERENCE_B_VALUES.iter().enumerate() {
            let repeats = match slice {
                1 | 2 => 3,
                3 if k <= 4 => 3,
                3 => 2,
                _ => 2,
            };
            if b == 0.0 {
                entries.push(GradientEntry { u: [0.0; 3], b, repeats });
            } else {
                for u in REFERENCE_DIRECTIONS {
                    entries.push(GradientEntry { u, b, repeats });
                }
            }
        }
        Self::new(entries)
    }

    /// 32 reference directions at each of the given b-values, one repeat each.
    pub fn shells(b_values: &[f64]) -> Result<Self> {
        let mut entries = Vec::new();
        for &b in b_values {
            for u in REFERENCE_DIRECTIONS {
                entries.push(GradientEntry { u, b, repeats: 1 });
            }
        }
        Self::new(entries)
    }

    /// Total number of acquisitions, counting repeats.
    pub fn n_acquisitions(&self) -> usize {
        self.entries.iter().map(|e| e.repeats as usize).sum()
    }

    /// One `(u, b)` pair per acquisition, repeats expanded in file order.
    pub fn acquisitions(&self) -> Vec<(Vector3<f64>, f64)> {
        let mut out = Vec::with_capacity(self.n_acquisitions());
        for e in &self.entries {
            for _ in 0..e.repeats {
                out.push((Vector3::from(e.u), e.b));
            }
        }
        out
    }

    /// Parses the whitespace-separated table `ux uy uz b repeats`; blank
    /// lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: String| Error::Parse { line: lineno + 1, msg };
            if fields.len() != 5 {
                return Err(parse_err(format!("expected 5 columns, found {}", fields.len())));
            }
            let mut v = [0.0; 4];
            for k in 0..4 {
                v[k] = fields[k]
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("column {}: {e}", k + 1)))?;
            }
            let repeats = fields[4]
                .parse::<u32>()
                .map_err(|e| parse_err(format!("column 5: {e}")))?;
            entries.push(GradientEntry { u: [v[0], v[1], v[2]], b: v[3], repeats });
        }
        Self::new(entries).map_err(|e| match e {
            Error::Domain(msg) => Error::Parse { line: 0, msg },
            other => other,
        })
    }

    /// Text form accepted by [`GradientScheme::parse`]; floats are printed in
    /// shortest round-trip form so the conversion is lossless.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# ux uy uz b repeats\n");
        for e in &self.entries {
            let _ = writeln!(s, "{:?} {:?} {:?} {:?} {}", e.u[0], e.u[1], e.u[2], e.b, e.repeats);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn norm3(u: &[f64; 3]) -> f64 {
    (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
}

fn check_unit(u: &Vector3<f64>, b: f64) -> Result<()> {
    if !u.iter().all(|x| x.is_finite()) || !b.is_finite() || b < 0.0 {
        return domain("direction and b-value must be finite with b >= 0");
    }
    if b > 0.0 && (u.norm() - 1.0).abs() > UNIT_TOL {
        return domain(format!("direction must be unit length, |u| = {}", u.norm()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Model families

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `log S₀` only; no diffusion term.
    Intercept,
    Tensor2,
    Tensor4,
    /// Even spherical harmonics up to degree `2·order`.
    Sh { order: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        Self { family }
    }

    pub fn tensor2() -> Self {
        Self::new(Family::Tensor2)
    }

    pub fn tensor4() -> Self {
        Self::new(Family::Tensor4)
    }

    pub fn sh(order: usize) -> Self {
        Self::new(Family::Sh { order })
    }

    pub fn intercept() -> Self {
        Self::new(Family::Intercept)
    }

    /// Number of diffusion coefficients `d` (the parameter has `1 + d`).
    pub fn dim(&self) -> usize {
        match self.family {
            Family::Intercept => 0,
            Family::Tensor2 => 6,
            Family::Tensor4 => 15,
            Family::Sh { order } => (2 * order + 1) * (order + 1),
        }
    }

    pub fn n_params(&self) -> usize {
        1 + self.dim()
    }

    /// Design row for direction `u` and b-value `b` in s/mm²; the b-value is
    /// multiplied by [`B_SCALE`].
    pub fn design_row(&self, u: &Vector3<f64>, b: f64) -> Result<Vec<f64>> {
        check_unit(u, b)?;
        let bs = b * B_SCALE;
        Ok(match self.family {
            Family::Intercept => vec![1.0],
            Family::Tensor2 => build_design_row_2nd(&(u * (2.0 * bs).sqrt()))?.to_vec(),
            Family::Tensor4 => build_design_row_4th(u, bs)?.to_vec(),
            Family::Sh { order } => build_design_row_sh(u, bs, order)?,
        })
    }

    /// The `m × (1+d)` design matrix, one row per acquisition.
    pub fn design_matrix(&self, scheme: &GradientScheme) -> Result<DMatrix<f64>> {
        let acq = scheme.acquisitions();
        let p = self.n_params();
        let mut z = DMatrix::zeros(acq.len(), p);
        for (i, (u, b)) in acq.iter().enumerate() {
            let row = self.design_row(u, *b)?;
            for j in 0..p {
                z[(i, j)] = row[j];
            }
        }
        Ok(z)
    }

    /// Diffusivity `d(u)` for the tensor part `coeffs` (length `d`).
    pub fn diffusivity(&self, coeffs: &[f64], u: &Vector3<f64>) -> Result<f64> {
        self.check_len(coeffs)?;
        Ok(self.diffusivity_unchecked(coeffs, u))
    }

    pub(crate) fn diffusivity_unchecked(&self, coeffs: &[f64], u: &Vector3<f64>) -> f64 {
        match self.family {
            Family::Intercept => 0.0,
            Family::Tensor2 => Tensor2::from_slice(coeffs).eval(u),
            Family::Tensor4 => Tensor4::from_slice(coeffs).eval(u),
            Family::Sh { order } => sh_eval(coeffs, order, u),
        }
    }

    pub(crate) fn check_len(&self, coeffs: &[f64]) -> Result<()> {
        if coeffs.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: coeffs.len() });
        }
        Ok(())
    }
}

/// `(1, −qx²/2, −qy²/2, −qz²/2, −qx qy, −qx qz, −qy qz)`.
pub fn build_design_row_2nd(q: &Vector3<f64>) -> Result<[f64; 7]> {
    if !q.iter().all(|x| x.is_finite()) {
        return domain("q must be finite");
    }
    let (x, y, z) = (q[0], q[1], q[2]);
    Ok([1.0, -0.5 * x * x, -0.5 * y * y, -0.5 * z * z, -x * y, -x * z, -y * z])
}

/// `(1, −b·(multiplicity × monomial))` over the 15 tensor coefficients.
pub fn build_design_row_4th(u: &Vector3<f64>, b: f64) -> Result<[f64; 16]> {
    check_unit(u, b)?;
    let mut row = [0.0; 16];
    row[0] = 1.0;
    if b == 0.0 {
        return Ok(row);
    }
    for (k, idx) in T4_INDEX.iter().enumerate() {
        let mono: f64 = idx.iter().map(|&i| u[i]).product();
        row[k + 1] = -b * T4_MULT[k] * mono;
    }
    Ok(row)
}

/// `(1, −b Y_{ℓ,m}(u))` over even degrees `ℓ ≤ 2n`.
pub fn build_design_row_sh(u: &Vector3<f64>, b: f64, n: usize) -> Result<Vec<f64>> {
    check_unit(u, b)?;
    let d = (2 * n + 1) * (n + 1);
    let mut row = vec![0.0; 1 + d];
    row[0] = 1.0;
    if b == 0.0 {
        return Ok(row);
    }
    for (k, (l, m)) in sh_indices(n).into_iter().enumerate() {
        row[k + 1] = -b * real_sh_unchecked(l, m, u);
    }
    Ok(row)
}

/// `(ℓ, m)` pairs in coefficient order for SH order `n`.
pub fn sh_indices(n: usize) -> Vec<(usize, i64)> {
    let mut out = Vec::new();
    for half in 0..=n {
        let l = 2 * half;
        for m in -(l as i64)..=(l as i64) {
            out.push((l, m));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Spherical harmonics

/// Real orthonormal spherical harmonic without the Condon–Shortley phase:
/// `√2 N_ℓ|m| Q_ℓ^|m|(z) Re/Im (x+iy)^|m|` for `m ≷ 0`, `N_ℓ0 Q_ℓ^0(z)` for
/// `m = 0`, where `Q_ℓ^m = P_ℓ^m / sinᵐ` is the phase-free associated
/// Legendre function with the `sinᵐ` factor removed.
pub fn real_spherical_harmonic(l: usize, m: i64, u: &Vector3<f64>) -> Result<f64> {
    if l % 2 == 1 {
        return domain(format!("only even degrees are supported, got l={l}"));
    }
    if m.unsigned_abs() as usize > l {
        return domain(format!("order m={m} out of range for l={l}"));
    }
    if !u.iter().all(|x| x.is_finite()) || (u.norm() - 1.0).abs() > UNIT_TOL {
        return domain("direction must be a finite unit vector");
    }
    Ok(real_sh_unchecked(l, m, u))
}

pub(crate) fn real_sh_unchecked(l: usize, m: i64, u: &Vector3<f64>) -> f64 {
    let am = m.unsigned_abs() as usize;
    let z = u[2];
    // Q_m^m = (2m-1)!!, Q_{m+1}^m = z (2m+1) Q_m^m, three-term recurrence.
    let mut q_mm = 1.0;
    for k in 1..=am {
        q_mm *= (2 * k - 1) as f64;
    }
    let q = if l == am {
        q_mm
    } else {
        let mut prev = q_mm;
        let mut cur = z * (2 * am + 1) as f64 * q_mm;
        for ll in (am + 2)..=l {
            let next = ((2 * ll - 1) as f64 * z * cur - (ll + am - 1) as f64 * prev) / (ll - am) as f64;
            prev = cur;
            cur = next;
        }
        cur
    };
    let mut ratio = 1.0;
    for k in (l - am + 1)..=(l + am) {
        ratio /= k as f64;
    }
    let norm = ((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt();
    if m == 0 {
        return norm * q;
    }
    // (x + iy)^|m|
    let (mut re, mut im) = (1.0, 0.0);
    for _ in 0..am {
        let (r, i) = (re * u[0] - im * u[1], re * u[1] + im * u[0]);
        re = r;
        im = i;
    }
    let trig = if m > 0 { re } else { im };
    std::f64::consts::SQRT_2 * norm * q * trig
}

fn sh_eval(coeffs: &[f64], order: usize, u: &Vector3<f64>) -> f64 {
    sh_indices(order)
        .into_iter()
        .zip(coeffs)
        .map(|((l, m), c)| c * real_sh_unchecked(l, m, u))
        .sum()
}

/// The matrix `B` with `D = θ B`: rows are SH coefficients in
/// [`sh_indices`] order, columns the tensor coefficients in this module's
/// layout. Order 2 pairs with `Sh(1)`, order 4 with `Sh(2)`.
pub fn tensor_sh_bijection(spec: &ModelSpec) -> Result<DMatrix<f64>> {
    match spec.family {
        Family::Tensor2 => Ok(b_matrix_2nd()),
        Family::Tensor4 => Ok(b_matrix_4th()),
        _ => Err(Error::NotApplicable("the bijection is defined for Tensor2 and Tensor4".into())),
    }
}

fn b_matrix_2nd() -> DMatrix<f64> {
    let c = 0.25 * (15.0 / PI).sqrt();
    let s3 = 3f64.sqrt();
    let s15 = 15f64.sqrt();
    #[rustfmt::skip]
    let rows = [
        [2.0 / s15, 2.0 / s15, 2.0 / s15, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        [-1.0 / s3, -1.0 / s3, 2.0 / s3, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        [1.0, -1.0, 0.0, 0.0, 0.0, 0.0],
    ];
    DMatrix::from_fn(6, 6, |i, j| c * rows[i][j])
}

/// Position in the tensor layout of each column of the printed 4th-order
/// coefficient ordering (1111, 2222, 3333, 1122, 1133, 2233, 1112, 1113,
/// 1222, 2223, 1333, 2333, 1123, 1223, 1233), which the 4th-order `B` and
/// the printed precision blocks use.
pub const T4_PRINTED_ORDER: [usize; 15] = [0, 1, 2, 3, 4, 5, 9, 10, 11, 12, 13, 14, 6, 7, 8];

fn b_matrix_4th() -> DMatrix<f64> {
    let s5 = 5f64.sqrt();
    let s10 = 10f64.sqrt();
    let s15 = 15f64.sqrt();
    let s35 = 35f64.sqrt();
    let s70 = 70f64.sqrt();
    // Sparse rows as (printed column, value); overall factor 1/√π.
    let rows: [&[(usize, f64)]; 15] = [
        &[(0, 0.5), (1, 0.5), (2, 0.5), (3, 1.0 / 6.0), (4, 1.0 / 6.0), (5, 1.0 / 6.0)],
        &[(6, s15 / 8.0), (8, s15 / 8.0), (14, s15 / 24.0)],
        &[(9, s15 / 8.0), (11, s15 / 8.0), (12, s15 / 24.0)],
        &[(0, -s5 / 4.0), (1, -s5 / 4.0), (2, s5 / 2.0), (3, -s5 / 12.0), (4, s5 / 24.0), (5, s5 / 24.0)],
        &[(7, s15 / 8.0), (10, s15 / 8.0), (13, s15 / 24.0)],
        &[(0, s15 / 4.0), (1, -s15 / 4.0), (4, s15 / 24.0), (5, -s15 / 24.0)],
        &[(6, 3.0 * s35 / 16.0), (8, -3.0 * s35 / 16.0)],
        &[(9, -3.0 * s70 / 32.0), (12, 3.0 * s70 / 32.0)],
        &[(6, -3.0 * s5 / 16.0), (8, -3.0 * s5 / 16.0), (14, 3.0 * s5 / 8.0)],
        &[(9, -9.0 * s10 / 32.0), (11, 3.0 * s10 / 8.0), (12, -3.0 * s10 / 32.0)],
        &[(0, 9.0 / 16.0), (1, 9.0 / 16.0), (2, 1.5), (3, 3.0 / 16.0), (4, -0.75), (5, -0.75)],
        &[(7, -9.0 * s10 / 32.0), (10, 3.0 * s10 / 8.0), (13, -3.0 * s10 / 32.0)],
        &[(0, -3.0 * s5 / 8.0), (1, 3.0 * s5 / 8.0), (4, 3.0 * s5 / 8.0), (5, -3.0 * s5 / 8.0)],
        &[(7, 3.0 * s70 / 32.0), (13, -3.0 * s70 / 32.0)],
        &[(0, 3.0 * s35 / 16.0), (1, 3.0 * s35 / 16.0), (3, -3.0 * s35 / 16.0)],
    ];
    let scale = 1.0 / PI.sqrt();
    let mut b = DMatrix::zeros(15, 15);
    for (i, row) in rows.iter().enumerate() {
        for &(col, v) in row.iter() {
            b[(i, T4_PRINTED_ORDER[col])] = scale * v;
        }
    }
    b
}

// ---------------------------------------------------------------------------
// Tensors

/// Symmetric 3×3 tensor stored as `D11, D22, D33, D12, D13, D23`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tensor2(pub [f64; 6]);

impl Tensor2 {
    pub fn from_slice(c: &[f64]) -> Self {
        let mut a = [0.0; 6];
        a.copy_from_slice(&c[..6]);
        Self(a)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let s = 0.5 * (m + m.transpose());
        Self([s[(0, 0)], s[(1, 1)], s[(2, 2)], s[(0, 1)], s[(0, 2)], s[(1, 2)]])
    }

    /// `R diag(eigs) Rᵀ` with the columns of `r` as eigenvectors.
    pub fn from_eigen(eigs: [f64; 3], r: &Matrix3<f64>) -> Self {
        Self::from_matrix(&(r * Matrix3::from_diagonal(&Vector3::from(eigs)) * r.transpose()))
    }

    pub fn isotropic(c: f64) -> Self {
        Self([c, c, c, 0.0, 0.0, 0.0])
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let d = &self.0;
        Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2])
    }

    pub fn eval(&self, u: &Vector3<f64>) -> f64 {
        let d = &self.0;
        d[0] * u[0] * u[0]
            + d[1] * u[1] * u[1]
            + d[2] * u[2] * u[2]
            + 2.0 * (d[3] * u[0] * u[1] + d[4] * u[0] * u[2] + d[5] * u[1] * u[2])
    }

    /// The tensor `R D Rᵀ`, whose diffusivity at `Ru` equals `d(u)`.
    pub fn rotate(&self, r: &Matrix3<f64>) -> Self {
        Self::from_matrix(&(r * self.matrix() * r.transpose()))
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// Eigenvalues in decreasing order with matching eigenvector columns.
    pub fn eigen(&self) -> ([f64; 3], Matrix3<f64>) {
        let e = SymmetricEigen::new(self.matrix());
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
        let vals = [e.eigenvalues[idx[0]], e.eigenvalues[idx[1]], e.eigenvalues[idx[2]]];
        let vecs = Matrix3::from_columns(&[
            e.eigenvectors.column(idx[0]).into_owned(),
            e.eigenvectors.column(idx[1]).into_owned(),
            e.eigenvectors.column(idx[2]).into_owned(),
        ]);
        (vals, vecs)
    }

    /// Unit eigenvector of the largest eigenvalue (sign arbitrary).
    pub fn principal_direction(&self) -> Vector3<f64> {
        self.eigen().1.column(0).into_owned()
    }

    fn scale(&self) -> f64 {
        self.0.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }
}

/// Index quadruples (0-based) of the 15 stored 4th-order coefficients.
pub const T4_INDEX: [[usize; 4]; 15] = [
    [0, 0, 0, 0],
    [1, 1, 1, 1],
    [2, 2, 2, 2],
    [0, 0, 1, 1],
    [0, 0, 2, 2],
    [1, 1, 2, 2],
    [0, 0, 1, 2],
    [0, 1, 1, 2],
    [0, 1, 2, 2],
    [0, 0, 0, 1],
    [0, 0, 0, 2],
    [0, 1, 1, 1],
    [1, 1, 1, 2],
    [0, 2, 2, 2],
    [1, 2, 2, 2],
];

/// Number of distinct index permutations of each stored coefficient.
pub const T4_MULT: [f64; 15] = [1., 1., 1., 6., 6., 6., 12., 12., 12., 4., 4., 4., 4., 4., 4.];

/// Human-readable labels of the stored 4th-order coefficients.
pub const T4_LABELS: [&str; 15] = [
    "1111", "2222", "3333", "1122", "1133", "2233", "1123", "1223", "1233", "1112", "1113", "1222",
    "2223", "1333", "2333",
];

fn t4_position(mut idx: [usize; 4]) -> usize {
    idx.sort_unstable();
    T4_INDEX.iter().position(|&k| k == idx).expect("every sorted quadruple is stored")
}

/// Totally symmetric 4th-order tensor, 15 coefficients in the module layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tensor4(pub [f64; 15]);

impl Tensor4 {
    pub fn from_slice(c: &[f64]) -> Self {
        let mut a = [0.0; 15];
        a.copy_from_slice(&c[..15]);
        Self(a)
    }

    pub fn zero() -> Self {
        Self([0.0; 15])
    }

    /// Tensor whose diffusivity is `c·|u|⁴`.
    pub fn isotropic(c: f64) -> Self {
        let mut a = [0.0; 15];
        a[0] = c;
        a[1] = c;
        a[2] = c;
        a[3] = c / 3.0;
        a[4] = c / 3.0;
        a[5] = c / 3.0;
        Self(a)
    }

    /// Symmetrized outer product of two 2nd-order tensors, `d(u) = d_a(u) d_b(u)`.
    pub fn from_product(a: &Tensor2, b: &Tensor2) -> Self {
        let (ma, mb) = (a.matrix(), b.matrix());
        let mut out = [0.0; 15];
        for (k, idx) in T4_INDEX.iter().enumerate() {
            // Average over the three pairings of four indices.
            let [i, j, l, m] = *idx;
            out[k] = (ma[(i, j)] * mb[(l, m)] + ma[(l, m)] * mb[(i, j)]
                + ma[(i, l)] * mb[(j, m)] + ma[(j, m)] * mb[(i, l)]
                + ma[(i, m)] * mb[(j, l)] + ma[(j, l)] * mb[(i, m)])
                / 6.0;
        }
        Self(out)
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[t4_position([i, j, k, l])]
    }

    pub fn eval(&self, u: &Vector3<f64>) -> f64 {
        T4_INDEX
            .iter()
            .zip(self.0.iter().zip(T4_MULT.iter()))
            .map(|(idx, (c, m))| m * c * idx.iter().map(|&i| u[i]).product::<f64>())
            .sum()
    }

    /// Euclidean gradient of `d` at `u`: `4 D_{ijkl} u_j u_k u_l`.
    pub fn gradient(&self, u: &Vector3<f64>) -> Vector3<f64> {
        let mut g = Vector3::zeros();
        for (idx, (c, m)) in T4_INDEX.iter().zip(self.0.iter().zip(T4_MULT.iter())) {
            let w = m * c;
            // Differentiate each factor of the monomial in turn.
            for skip in 0..4 {
                let rest: f64 = (0..4).filter(|&q| q != skip).map(|q| u[idx[q]]).product();
                g[idx[skip]] += w * rest;
            }
        }
        g
    }

    /// The 4-index rotation `D'_{abcd} = R_ai R_bj R_ck R_dl D_ijkl`.
    pub fn rotate(&self, r: &Matrix3<f64>) -> Self {
        let mut full = [0.0; 81];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        full[((i * 3 + j) * 3 + k) * 3 + l] = self.get(i, j, k, l);
                    }
                }
            }
        }
        // Contract one index at a time.
        for axis in 0..4 {
            let mut next = [0.0; 81];
            for flat in 0..81 {
                let mut id = [flat / 27, (flat / 9) % 3, (flat / 3) % 3, flat % 3];
                let a = id[axis];
                let mut s = 0.0;
                for i in 0..3 {
                    id[axis] = i;
                    s += r[(a, i)] * full[((id[0] * 3 + id[1]) * 3 + id[2]) * 3 + id[3]];
                }
                next[flat] = s;
            }
            full = next;
        }
        let mut out = [0.0; 15];
        for (k, idx) in T4_INDEX.iter().enumerate() {
            out[k] = full[((idx[0] * 3 + idx[1]) * 3 + idx[2]) * 3 + idx[3]];
        }
        Self(out)
    }

    fn scale(&self) -> f64 {
        self.0.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }
}

/// The symmetric 6×6 matrix representation of a 4th-order tensor.
pub fn dhat(d: &Tensor4) -> Matrix6<f64> {
    let g = |i, j, k, l| d.get(i, j, k, l);
    let s = std::f64::consts::SQRT_2;
    // Row/column basis: e1e1, e2e2, e3e3, then (12), (13), (23)-type slots
    // following the published layout.
    #[rustfmt::skip]
    let m = Matrix6::new(
        g(0,0,0,0),       g(0,0,1,1),       g(0,0,2,2),       s*g(0,0,0,1), s*g(0,0,0,2), s*g(0,0,1,2),
        g(0,0,1,1),       g(1,1,1,1),       g(1,1,2,2),       s*g(0,1,1,1), s*g(0,1,1,2), s*g(1,1,1,2),
        g(0,0,2,2),       g(1,1,2,2),       g(2,2,2,2),       s*g(0,1,2,2), s*g(0,2,2,2), s*g(1,2,2,2),
        s*g(0,0,0,1),     s*g(0,1,1,1),     s*g(0,1,2,2),     2.*g(0,0,1,1), 2.*g(0,0,1,2), 2.*g(0,1,1,2),
        s*g(0,0,0,2),     s*g(0,1,1,2),     s*g(0,2,2,2),     2.*g(0,0,1,2), 2.*g(0,0,2,2), 2.*g(0,1,2,2),
        s*g(0,0,1,2),     s*g(1,1,1,2),     s*g(1,2,2,2),     2.*g(0,1,1,2), 2.*g(0,1,2,2), 2.*g(1,1,2,2),
    );
    m
}

/// Mean diffusivity of a 4th-order tensor, `trace(D̂)/5`.
pub fn md_4th(d: &Tensor4) -> f64 {
    dhat(d).trace() / 5.0
}

/// Linear map sending a 4th-order tensor to the 2nd-order tensor whose
/// diffusivity is the L² projection of `d` onto quadratic forms.
pub fn project_4th_to_2nd(d: &Tensor4) -> Tensor2 {
    let c = |i, j, k, l| d.get(i, j, k, l);
    let a = 3.0 / 35.0;
    let o = 6.0 / 7.0;
    Tensor2([
        a * (9.0 * c(0, 0, 0, 0) + 8.0 * c(0, 0, 1, 1) + 8.0 * c(0, 0, 2, 2)
            - c(1, 1, 1, 1) - c(2, 2, 2, 2) - 2.0 * c(1, 1, 2, 2)),
        a * (9.0 * c(1, 1, 1, 1) + 8.0 * c(0, 0, 1, 1) + 8.0 * c(1, 1, 2, 2)
            - c(0, 0, 0, 0) - c(2, 2, 2, 2) - 2.0 * c(0, 0, 2, 2)),
        a * (9.0 * c(2, 2, 2, 2) + 8.0 * c(0, 0, 2, 2) + 8.0 * c(1, 1, 2, 2)
            - c(0, 0, 0, 0) - c(1, 1, 1, 1) - 2.0 * c(0, 0, 1, 1)),
        o * (c(0, 0, 0, 1) + c(0, 1, 1, 1) + c(0, 1, 2, 2)),
        o * (c(0, 0, 0, 2) + c(0, 2, 2, 2) + c(0, 1, 1, 2)),
        o * (c(1, 1, 1, 2) + c(1, 2, 2, 2) + c(0, 0, 1, 2)),
    ])
}

/// Fractional anisotropy and mean diffusivity.
pub fn fa_md_2nd(d: &Tensor2) -> (f64, f64) {
    let (l, _) = d.eigen();
    fa_md_from_eigenvalues(l)
}

pub fn fa_md_from_eigenvalues(l: [f64; 3]) -> (f64, f64) {
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let den: f64 = l.iter().map(|x| x * x).sum();
    if den == 0.0 {
        return (0.0, md);
    }
    let num: f64 = l.iter().map(|x| (x - md).powi(2)).sum();
    let fa = ((1.5 * num / den).sqrt()).min(1.0);
    (fa, md)
}

/// Rotation matrix of the (not necessarily normalized) quaternion `q = (w, x, y, z)`.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q.iter().map(|x| x * x).sum::<f64>()).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `n` nearly uniform points on the unit sphere (Fibonacci lattice). With
/// `hemisphere` the points cover `z ≥ 0` only, which suffices for even
/// functions.
pub fn fibonacci_sphere(n: usize, hemisphere: bool) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = if hemisphere { 1.0 - t } else { 1.0 - 2.0 * t };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Positivity

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positivity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    pub verdict: Positivity,
    /// Smallest diffusivity found (exact minimum eigenvalue for Tensor2).
    pub min_value: f64,
    /// True when the verdict needs no numerical search (PSD certificate or
    /// Tensor2 eigenvalues) or when every local search converged.
    pub converged: bool,
}

const POSITIVITY_REL_TOL: f64 = 1e-12;
const SPHERE_STARTS: usize = 8;
const SPHERE_GRID: usize = 2000;

/// Checks `d(u) ≥ −tol` on the sphere with `tol = 1e-12·max|coeff|`.
pub fn positivity_check(spec: &ModelSpec, coeffs: &[f64]) -> Result<PositivityReport> {
    spec.check_len(coeffs)?;
    Ok(positivity_unchecked(spec, coeffs))
}

pub(crate) fn positivity_unchecked(spec: &ModelSpec, coeffs: &[f64]) -> PositivityReport {
    let verdict = |min: f64, tol: f64| {
        if min >= -tol {
            Positivity::Positive
        } else {
            Positivity::Negative
        }
    };
    match spec.family {
        Family::Intercept => PositivityReport { verdict: Positivity::Positive, min_value: 0.0, converged: true },
        Family::Tensor2 => {
            let t = Tensor2::from_slice(coeffs);
            let tol = POSITIVITY_REL_TOL * t.scale();
            let min = t.eigen().0[2];
            PositivityReport { verdict: verdict(min, tol), min_value: min, converged: true }
        }
        Family::Tensor4 => {
            let t = Tensor4::from_slice(coeffs);
            tensor4_positivity(&t)
        }
        Family::Sh { order: 1 } => {
            let b = b_matrix_2nd();
            let d = DMatrix::from_row_slice(1, 6, coeffs) * b;
            positivity_unchecked(&ModelSpec::tensor2(), d.as_slice())
        }
        Family::Sh { order: 2 } => {
            let b = b_matrix_4th();
            let d = DMatrix::from_row_slice(1, 15, coeffs) * b;
            tensor4_positivity(&Tensor4::from_slice(d.as_slice()))
        }
        Family::Sh { order } => {
            let scale = coeffs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let f = |u: &Vector3<f64>| sh_eval(coeffs, order, u);
            let g = |u: &Vector3<f64>| {
                let h = 1e-6;
                let mut g = Vector3::zeros();
                for k in 0..3 {
                    let mut up = *u;
                    let mut dn = *u;
                    up[k] += h;
                    dn[k] -= h;
                    g[k] = (f(&up) - f(&dn)) / (2.0 * h);
                }
                g
            };
            let (min, conv) = minimize_on_sphere(&f, &g, scale);
            PositivityReport { verdict: verdict(min, POSITIVITY_REL_TOL * scale), min_value: min, converged: conv }
        }
    }
}

fn tensor4_positivity(t: &Tensor4) -> PositivityReport {
    let scale = t.scale();
    let tol = POSITIVITY_REL_TOL * scale;
    let eig = SymmetricEigen::new(dhat(t)).eigenvalues;
    let min_eig = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig >= -tol {
        // d(u) = vᵀ D̂ v with |v| = 1 for v built from u, so the smallest
        // eigenvalue bounds the diffusivity from below.
        return PositivityReport { verdict: Positivity::Positive, min_value: min_eig, converged: true };
    }
    let values: Vec<f64> = tensor4_grid_monomials()
        .iter()
        .map(|m| m.iter().zip(&t.0).map(|(a, b)| a * b).sum())
        .collect();
    let (min, conv) = refine_from_grid(&values, &|u| t.eval(u), &|u| t.gradient(u), scale);
    let verdict = if min >= -tol { Positivity::Positive } else { Positivity::Negative };
    PositivityReport { verdict, min_value: min, converged: conv }
}

fn sphere_grid() -> &'static [Vector3<f64>] {
    static GRID: std::sync::OnceLock<Vec<Vector3<f64>>> = std::sync::OnceLock::new();
    GRID.get_or_init(|| fibonacci_sphere(SPHERE_GRID, true))
}

/// Dense grid pass followed by projected gradient descent from the lowest
/// grid points; returns the smallest value found and whether every descent
/// ended at a stationary point. Stops early once a clearly negative value
/// is seen.
pub fn minimize_on_sphere(
    f: &dyn Fn(&Vector3<f64>) -> f64,
    grad: &dyn Fn(&Vector3<f64>) -> Vector3<f64>,
    scale: f64,
) -> (f64, bool) {
    let values: Vec<f64> = sphere_grid().iter().map(f).collect();
    refine_from_grid(&values, f, grad, scale)
}

/// Descends from the `SPHERE_STARTS` lowest of the precomputed grid values.
fn refine_from_grid(
    values: &[f64],
    f: &dyn Fn(&Vector3<f64>) -> f64,
    grad: &dyn Fn(&Vector3<f64>) -> Vector3<f64>,
    scale: f64,
) -> (f64, bool) {
    let grid = sphere_grid();
    let mut lowest: Vec<(f64, usize)> = Vec::with_capacity(SPHERE_STARTS + 1);
    for (i, &v) in values.iter().enumerate() {
        if lowest.len() < SPHERE_STARTS || v < lowest[lowest.len() - 1].0 {
            let pos = lowest.partition_point(|&(w, _)| w <= v);
            lowest.insert(pos, (v, i));
            lowest.truncate(SPHERE_STARTS);
        }
    }
    if lowest[0].0 < -POSITIVITY_REL_TOL * scale {
        return (lowest[0].0, true);
    }
    let gtol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut best = lowest[0].0;
    let mut all_conv = true;
    for &(_, i) in &lowest {
        let (v, conv) = descend(f, grad, grid[i], gtol);
        best = best.min(v);
        all_conv &= conv;
    }
    (best, all_conv)
}

/// `T4_MULT[k]·u^idx(k)` for every grid point, so that `d(u)` is a dot
/// product with the coefficients.
fn tensor4_grid_monomials() -> &'static [[f64; 15]] {
    static MONO: std::sync::OnceLock<Vec<[f64; 15]>> = std::sync::OnceLock::new();
    MONO.get_or_init(|| {
        sphere_grid()
            .iter()
            .map(|u| {
                let mut m = [0.0; 15];
                for (k, idx) in T4_INDEX.iter().enumerate() {
                    m[k] = T4_MULT[k] * idx.iter().map(|&i| u[i]).product::<f64>();
                }
                m
            })
            .collect()
    })
}

fn descend(
    f: &dyn Fn(&Vector3<f64>) -> f64,
    grad: &dyn Fn(&Vector3<f64>) -> Vector3<f64>,
    mut u: Vector3<f64>,
    gtol: f64,
) -> (f64, bool) {
    let mut fu = f(&u);
    let mut step: f64 = 0.3;
    for _ in 0..500 {
        let g = grad(&u);
        let gt = g - u * g.dot(&u);
        let gn = gt.norm();
        if gn <= gtol {
            return (fu, true);
        }
        let dir = -gt / gn;
        let mut accepted = false;
        while step > 1e-14 {
            let cand = (u * step.cos() + dir * step.sin()).normalize();
            let fc = f(&cand);
            if fc <= fu - 1e-4 * step * gn {
                u = cand;
                fu = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No further decrease is representable.
            return (fu, true);
        }
        step = (step * 2.0).min(0.5);
    }
    (fu, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_2nd_examples() {
        assert_eq!(build_design_row_2nd(&Vector3::zeros()).unwrap(), [1., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(build_design_row_2nd(&Vector3::new(1., 0., 0.)).unwrap(), [1., -0.5, 0., 0., 0., 0., 0.]);
        assert_eq!(
            build_design_row_2nd(&Vector3::new(1., 1., 0.)).unwrap(),
            [1., -0.5, -0.5, 0., -1., 0., 0.]
        );
        assert!(build_design_row_2nd(&Vector3::new(f64::NAN, 0., 0.)).is_err());
    }

    #[test]
    fn row_4th_examples() {
        let r = build_design_row_4th(&Vector3::new(0., 0., 1.), 0.0).unwrap();
        assert_eq!(r[0], 1.0);
        assert!(r[1..].iter().all(|&x| x == 0.0));
        let r = build_design_row_4th(&Vector3::new(1., 0., 0.), 1.0).unwrap();
        assert_eq!(r[1], -1.0);
        assert!(r[2..].iter().all(|&x| x == 0.0));
        assert!(build_design_row_4th(&Vector3::new(2., 0., 0.), 1.0).is_err());
    }

    #[test]
    fn sh_row_length_and_parity() {
        let u = Vector3::new(0., 0., 1.);
        assert_eq!(build_design_row_sh(&u, 1.0, 1).unwrap().len(), 7);
        assert!(real_spherical_harmonic(3, 0, &u).is_err());
        let y00 = real_spherical_harmonic(0, 0, &u).unwrap();
        assert!((y00 - 0.5 / PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn isotropic_bijection_row() {
        let b = tensor_sh_bijection(&ModelSpec::tensor2()).unwrap();
        let mut theta = DMatrix::zeros(1, 6);
        theta[(0, 0)] = (4.0 * PI).sqrt();
        let d = theta * b;
        for (k, want) in [1.0, 1.0, 1.0, 0.0, 0.0, 0.0].iter().enumerate() {
            assert!((d[(0, k)] - want).abs() < 1e-14);
        }
        assert!(tensor_sh_bijection(&ModelSpec::sh(1)).is_err());
    }

    #[test]
    fn dhat_examples() {
        let mut d = Tensor4::zero();
        assert_eq!(dhat(&d), Matrix6::zeros());
        d.0[0] = 1.0;
        let mut want = Matrix6::zeros();
        want[(0, 0)] = 1.0;
        assert_eq!(dhat(&d), want);
        let iso = Tensor4::isotropic(1.0);
        assert!((md_4th(&iso) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fa_md_examples() {
        let (fa, md) = fa_md_2nd(&Tensor2::isotropic(1.0));
        assert!(fa.abs() < 1e-15 && (md - 1.0).abs() < 1e-15);
        let (fa, md) = fa_md_from_eigenvalues([1.0, 0.0, 0.0]);
        assert!((fa - 1.0).abs() < 1e-15 && (md - 1.0 / 3.0).abs() < 1e-15);
        let (fa, md) = fa_md_from_eigenvalues([2.0, 1.0, 1.0]);
        assert!((md - 4.0 / 3.0).abs() < 1e-15);
        assert!((fa - 0.408_248_290_463_863).abs() < 1e-12);
        assert_eq!(fa_md_from_eigenvalues([0.0; 3]), (0.0, 0.0));
    }

    #[test]
    fn projection_of_isotropic() {
        let p = project_4th_to_2nd(&Tensor4::isotropic(1.0));
        for k in 0..3 {
            assert!((p.0[k] - 1.0).abs() < 1e-14);
            assert!(p.0[k + 3].abs() < 1e-14);
        }
    }

    #[test]
    fn positivity_examples() {
        let spec = ModelSpec::tensor2();
        let r = positivity_check(&spec, &Tensor2::isotropic(1.0).0).unwrap();
        assert_eq!(r.verdict, Positivity::Positive);
        let t = Tensor2::from_eigen([1.0, 1.0, -0.1], &Matrix3::identity());
        assert_eq!(positivity_check(&spec, &t.0).unwrap().verdict, Positivity::Negative);
    }

    #[test]
    fn scheme_parsing() {
        let s = GradientScheme::parse("# c\n1 0 0 1000 2\n0 0 0 0 3\n").unwrap();
        assert_eq!(s.n_acquisitions(), 5);
        let again = GradientScheme::parse(&s.to_text()).unwrap();
        assert_eq!(s, again);
        match GradientScheme::parse("1 0 0 1000\n") {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(GradientScheme::parse("2 0 0 1000 1\n").is_err());
    }
}
