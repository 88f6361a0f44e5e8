//! The Poisson-GLM full conditional of `θ` given the latent counts.
//!
//! Given counts `Nᵢ`, the Rice model reduces to
//! `Nᵢ ~ Poisson(exp(2Zᵢθ)/(2σ²))`, whose log conditional (flat prior) is
//! `2 Σ Nᵢ Zᵢθ − (1/2σ²) Σ exp(2Zᵢθ)`. It is concave with negative Hessian
//! `I(θ) = (2/σ²) Σ exp(2Zᵢθ) ZᵢᵀZᵢ` independent of the counts, which makes
//! Fisher scoring coincide with Newton's method.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Latent counts of one voxel, one per acquisition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedCounts {
    pub n: Vec<u64>,
}

fn check_dims(theta: &[f64], counts: Option<&[u64]>, sigma2: f64, z: &DMatrix<f64>) -> Result<()> {
    if theta.len() != z.ncols() {
        return Err(Error::Dimension { expected: z.ncols(), got: theta.len() });
    }
    if let Some(c) = counts {
        if c.len() != z.nrows() {
            return Err(Error::Dimension { expected: z.nrows(), got: c.len() });
        }
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 must be > 0, got {sigma2}")));
    }
    Ok(())
}

/// `Zθ` as a vector.
pub(crate) fn linpred(theta: &[f64], z: &DMatrix<f64>) -> Vec<f64> {
    let p = z.ncols();
    (0..z.nrows())
        .map(|i| (0..p).map(|j| z[(i, j)] * theta[j]).sum())
        .collect()
}

/// Log full conditional of `θ` up to an additive constant.
pub fn poisson_log_conditional(theta: &[f64], counts: &[u64], sigma2: f64, z: &DMatrix<f64>) -> Result<f64> {
    check_dims(theta, Some(counts), sigma2, z)?;
    Ok(log_conditional_unchecked(theta, counts, sigma2, z))
}

pub(crate) fn log_conditional_unchecked(theta: &[f64], counts: &[u64], sigma2: f64, z: &DMatrix<f64>) -> f64 {
    let eta = linpred(theta, z);
    let inv = 0.5 / sigma2;
    eta.iter()
        .zip(counts)
        .map(|(e, &n)| 2.0 * n as f64 * e - inv * (2.0 * e).exp())
        .sum()
}

/// Gradient of [`poisson_log_conditional`].
pub fn poisson_gradient(theta: &[f64], counts: &[u64], sigma2: f64, z: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dims(theta, Some(counts), sigma2, z)?;
    Ok(gradient_from_linpred(&linpred(theta, z), counts, sigma2, z))
}

fn gradient_from_linpred(eta: &[f64], counts: &[u64], sigma2: f64, z: &DMatrix<f64>) -> DVector<f64> {
    let w: Vec<f64> = eta
        .iter()
        .zip(counts)
        .map(|(e, &n)| 2.0 * n as f64 - (2.0 * e).exp() / sigma2)
        .collect();
    z.tr_mul(&DVector::from_vec(w))
}

/// `I(θ) = (2/σ²) Σ exp(2Zᵢθ) ZᵢᵀZᵢ`.
pub fn fisher_information(theta: &[f64], sigma2: f64, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(theta, None, sigma2, z)?;
    Ok(information_from_linpred(&linpred(theta, z), sigma2, z))
}

fn information_from_linpred(eta: &[f64], sigma2: f64, z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut zt = z.transpose();
    for (i, e) in eta.iter().enumerate() {
        let w = (2.0 / sigma2) * (2.0 * e).exp();
        zt.column_mut(i).scale_mut(w);
    }
    let info = zt * z;
    // Symmetrize against rounding in the product.
    (&info + info.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    /// Stop when the scoring step or the gradient falls below this (sup norm).
    pub tol: f64,
    pub max_iter: usize,
    /// Hold `θ₀` at its starting value and score the remaining coordinates.
    pub fixed_s0: bool,
    /// Condition number above which the information is deemed degenerate.
    pub max_condition: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 50, fixed_s0: false, max_condition: 1e12 }
    }
}

const MAX_HALVINGS: usize = 20;
const DIVERGENCE_BOUND: f64 = 1e3;

/// Gaussian approximation of the conditional at its mode.
#[derive(Debug, Clone)]
pub struct LaplaceProposal {
    /// Mode in full coordinates; with `fixed_s0`, entry 0 is the frozen `θ₀`.
    pub mode: DVector<f64>,
    /// Precision over the free coordinates (all, or all but `θ₀`).
    pub precision: DMatrix<f64>,
    pub fixed_s0: bool,
    chol: Cholesky<f64, Dyn>,
}

impl LaplaceProposal {
    pub fn new(mode: DVector<f64>, precision: DMatrix<f64>, fixed_s0: bool) -> Result<Self> {
        let k = mode.len() - usize::from(fixed_s0);
        if precision.nrows() != k || precision.ncols() != k {
            return Err(Error::Dimension { expected: k, got: precision.nrows() });
        }
        let chol = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::Singular("Laplace precision is not positive definite".into()))?;
        Ok(Self { mode, precision, fixed_s0, chol })
    }

    fn offset(&self) -> usize {
        usize::from(self.fixed_s0)
    }

    /// Free coordinates of the mode.
    pub fn free_mode(&self) -> DVector<f64> {
        self.mode.rows(self.offset(), self.precision.nrows()).into_owned()
    }

    pub fn log_det_precision(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Gaussian log density at `theta` (full coordinates). With `fixed_s0`,
    /// `theta[0]` must equal the frozen value, otherwise the density is −∞.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.fixed_s0 && theta[0] != self.mode[0] {
            return f64::NEG_INFINITY;
        }
        let o = self.offset();
        let k = self.precision.nrows();
        let diff = DVector::from_fn(k, |i, _| theta[i + o] - self.mode[i + o]);
        let q = (diff.transpose() * &self.precision * &diff)[(0, 0)];
        0.5 * self.log_det_precision() - 0.5 * k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * q
    }

    /// Draw with covariance multiplied by `inflation`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, inflation: f64) -> DVector<f64> {
        let k = self.precision.nrows();
        let e = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
        // x = L⁻ᵀ e has covariance (L Lᵀ)⁻¹.
        let x = self
            .chol
            .l_dirty()
            .tr_solve_upper_triangular(&e)
            .expect("Cholesky factor has a positive diagonal");
        let mut out = self.mode.clone();
        let o = self.offset();
        for i in 0..k {
            out[i + o] += inflation.sqrt() * x[i];
        }
        out
    }
}

/// Why Fisher scoring did not produce a proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringFailure {
    pub last: DVector<f64>,
    pub reason: String,
}

/// Fisher scoring with step halving from `theta0`.
pub fn fisher_scoring(
    theta0: &[f64],
    counts: &[u64],
    sigma2: f64,
    z: &DMatrix<f64>,
    opts: &ScoringOptions,
) -> Result<std::result::Result<LaplaceProposal, ScoringFailure>> {
    check_dims(theta0, Some(counts), sigma2, z)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Config("scoring tolerance must be > 0".into()));
    }
    Ok(scoring_unchecked(theta0, counts, sigma2, z, opts).map(|(p, _)| p))
}

/// Like [`fisher_scoring`], also returning the log conditional at every
/// accepted iterate (starting point first).
pub fn fisher_scoring_path(
    theta0: &[f64],
    counts: &[u64],
    sigma2: f64,
    z: &DMatrix<f64>,
    opts: &ScoringOptions,
) -> Result<std::result::Result<(LaplaceProposal, Vec<f64>), ScoringFailure>> {
    check_dims(theta0, Some(counts), sigma2, z)?;
    if !(opts.tol > 0.0) {
        return Err(Error::Config("scoring tolerance must be > 0".into()));
    }
    Ok(scoring_unchecked(theta0, counts, sigma2, z, opts))
}

/// Returns the proposal and the objective value at every accepted iterate.
pub(crate) fn scoring_unchecked(
    theta0: &[f64],
    counts: &[u64],
    sigma2: f64,
    z: &DMatrix<f64>,
    opts: &ScoringOptions,
) -> std::result::Result<(LaplaceProposal, Vec<f64>), ScoringFailure> {
    let p = z.ncols();
    let o = usize::from(opts.fixed_s0);
    let k = p - o;
    let mut theta = DVector::from_column_slice(theta0);
    let fail = |theta: &DVector<f64>, reason: &str| ScoringFailure { last: theta.clone(), reason: reason.into() };
    if !opts.fixed_s0 && counts.iter().all(|&n| n == 0) {
        // The intercept direction is unbounded: no finite mode.
        return Err(fail(&theta, "all counts are zero; the mode is at infinity"));
    }
    let mut obj = log_conditional_unchecked(theta.as_slice(), counts, sigma2, z);
    let mut history = vec![obj];
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let eta = linpred(theta.as_slice(), z);
        let grad = gradient_from_linpred(&eta, counts, sigma2, z);
        let info = information_from_linpred(&eta, sigma2, z);
        let g = grad.rows(o, k).into_owned();
        if g.amax() <= opts.tol {
            converged = true;
            break;
        }
        let sub = info.view((o, o), (k, k)).into_owned();
        let Some(ch) = Cholesky::new(sub) else {
            return Err(fail(&theta, "information matrix is not positive definite"));
        };
        let step = ch.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let mut cand = theta.clone();
            for i in 0..k {
                cand[i + o] += t * step[i];
            }
            let val = log_conditional_unchecked(cand.as_slice(), counts, sigma2, z);
            if val.is_finite() && val >= obj {
                theta = cand;
                obj = val;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // No representable ascent remains: the iterate sits at the mode
            // up to rounding.
            converged = true;
            break;
        }
        history.push(obj);
        if theta.amax() > DIVERGENCE_BOUND || !theta.iter().all(|x| x.is_finite()) {
            return Err(fail(&theta, "iterates diverge"));
        }
        if (t * step.amax()) <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(fail(&theta, "maximum number of scoring iterations reached"));
    }
    let info = fisher_information_unchecked(theta.as_slice(), sigma2, z);
    let sub = info.view((o, o), (k, k)).into_owned();
    let eig = sub.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    if !(lo > 0.0) || hi / lo > opts.max_condition {
        return Err(fail(&theta, "information matrix is degenerate"));
    }
    LaplaceProposal::new(theta.clone(), sub, opts.fixed_s0)
        .map(|prop| (prop, history))
        .map_err(|_| fail(&theta, "information matrix is not positive definite"))
}

pub(crate) fn fisher_information_unchecked(theta: &[f64], sigma2: f64, z: &DMatrix<f64>) -> DMatrix<f64> {
    information_from_linpred(&linpred(theta, z), sigma2, z)
}

/// Log Hastings ratio of moving from `theta` to `theta_tilde` when the
/// forward proposal is `prop_fwd` (scored from `theta`) and the reverse
/// proposal is `prop_bwd` (scored from `theta_tilde`).
pub fn hastings_log_ratio(
    theta: &[f64],
    theta_tilde: &[f64],
    prop_fwd: &LaplaceProposal,
    prop_bwd: &LaplaceProposal,
    counts: &[u64],
    sigma2: f64,
    z: &DMatrix<f64>,
) -> Result<f64> {
    check_dims(theta, Some(counts), sigma2, z)?;
    check_dims(theta_tilde, None, sigma2, z)?;
    let target = log_conditional_unchecked(theta_tilde, counts, sigma2, z)
        - log_conditional_unchecked(theta, counts, sigma2, z);
    Ok(target + prop_bwd.log_density(theta) - prop_fwd.log_density(theta_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept_design(m: usize) -> DMatrix<f64> {
        DMatrix::from_element(m, 1, 1.0)
    }

    #[test]
    fn intercept_mode_closed_form() {
        let z = intercept_design(1);
        let opts = ScoringOptions { tol: 1e-10, ..Default::default() };
        let prop = fisher_scoring(&[0.0], &[3], 0.5, &z, &opts).unwrap().unwrap();
        assert!((prop.mode[0] - 0.5 * 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn all_zero_counts_do_not_converge() {
        let z = intercept_design(3);
        let r = fisher_scoring(&[0.0], &[0, 0, 0], 1.0, &z, &ScoringOptions::default()).unwrap();
        assert!(r.is_err());
    }

    #[test]
    fn information_example() {
        let z = intercept_design(1);
        let i = fisher_information(&[0.0], 1.0, &z).unwrap();
        assert_eq!(i[(0, 0)], 2.0);
    }

    #[test]
    fn identical_points_give_zero_ratio() {
        let z = intercept_design(2);
        let prop = fisher_scoring(&[0.0], &[3, 4], 1.0, &z, &ScoringOptions::default()).unwrap().unwrap();
        let r = hastings_log_ratio(&[0.3], &[0.3], &prop, &prop, &[3, 4], 1.0, &z).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn dimension_errors() {
        let z = intercept_design(2);
        assert!(poisson_log_conditional(&[0.0, 1.0], &[1, 1], 1.0, &z).is_err());
        assert!(poisson_log_conditional(&[0.0], &[1], 1.0, &z).is_err());
        assert!(poisson_log_conditional(&[0.0], &[1, 1], 0.0, &z).is_err());
    }
}
