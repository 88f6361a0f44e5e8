//! Rice likelihood and its Poisson–Gamma augmentation.
//!
//! A magnitude `Y = |ν + ε₁ + iε₂|` with `ε ~ N(0, σ²)` has the Rice density
//!
//! ```text
//! p(y | ν, σ²) = y/σ² · exp(-(y² + ν²)/(2σ²)) · I₀(yν/σ²)
//! ```
//!
//! The same law is obtained by drawing a latent count `N ~ Poisson(ν²/(2σ²))`,
//! then `X | N ~ Gamma(N+1, rate 1/(2σ²))` and setting `Y = √X`. Given `Y`,
//! the count follows the reinforced Poisson law `p_τ(n) ∝ τ²ⁿ/(n!)²` with
//! `τ = yν/(2σ²)`. Conditioning on `N` turns the Rice regression into a
//! Poisson GLM for `θ` (see [`crate::glm`]).

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardUniform};

use crate::error::{domain, Result};
use crate::special::ln_factorial;

/// Below this argument `log_bessel_i0` sums the power series, above it uses
/// the exponentially scaled asymptotic expansion.
pub const BESSEL_SERIES_CUTOFF: f64 = 20.0;

/// `log I₀(z)` for `z ≥ 0`, finite for arguments far beyond the `f64`
/// overflow point of `I₀` itself.
pub fn log_bessel_i0(z: f64) -> Result<f64> {
    if !z.is_finite() || z < 0.0 {
        return domain(format!("log_bessel_i0 requires finite z >= 0, got {z}"));
    }
    Ok(log_bessel_i0_unchecked(z))
}

pub(crate) fn log_bessel_i0_unchecked(z: f64) -> f64 {
    if z < BESSEL_SERIES_CUTOFF {
        // Σ (z²/4)^k / (k!)², all terms positive.
        let q = 0.25 * z * z;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            k += 1.0;
        }
        sum.ln()
    } else {
        // I₀(z) e^{-z} √(2πz) = Σ_k ((2k-1)!!)² / (k! (8z)^k); stop at the
        // smallest term.
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..200 {
            let kf = k as f64;
            let next = term * (2.0 * kf - 1.0).powi(2) / (8.0 * kf * z);
            if next >= term || next < 1e-17 * sum {
                break;
            }
            term = next;
            sum += term;
        }
        z - 0.5 * (2.0 * std::f64::consts::PI * z).ln() + sum.ln()
    }
}

/// Parameters of a Rice law: amplitude `nu = exp(Zθ)` and noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiceParams {
    nu: f64,
    sigma2: f64,
}

impl RiceParams {
    pub fn new(nu: f64, sigma2: f64) -> Result<Self> {
        if !(nu.is_finite() && nu >= 0.0) {
            return domain(format!("Rice amplitude must be finite and >= 0, got {nu}"));
        }
        if !(sigma2.is_finite() && sigma2 > 0.0) {
            return domain(format!("Rice variance must be finite and > 0, got {sigma2}"));
        }
        Ok(Self { nu, sigma2 })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Poisson mean of the latent count, `ν²/(2σ²)`.
    pub fn poisson_mean(&self) -> f64 {
        self.nu * self.nu / (2.0 * self.sigma2)
    }
}

/// Log of the Rice density at `y`. Returns `-∞` at `y = 0`.
pub fn rice_log_density(y: f64, p: RiceParams) -> Result<f64> {
    if !(y.is_finite() && y >= 0.0) {
        return domain(format!("Rice observation must be finite and >= 0, got {y}"));
    }
    Ok(rice_log_density_unchecked(y, p.nu, p.sigma2))
}

/// Same as [`rice_log_density`] without validation; used in the hot loops
/// where inputs are already known to be valid.
pub(crate) fn rice_log_density_unchecked(y: f64, nu: f64, sigma2: f64) -> f64 {
    if y == 0.0 {
        return f64::NEG_INFINITY;
    }
    y.ln() - sigma2.ln() - (y * y + nu * nu) / (2.0 * sigma2)
        + log_bessel_i0_unchecked(y * nu / sigma2)
}

/// A latent count together with the magnitude it generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedPair {
    pub n: u64,
    pub y: f64,
}

/// Draw `(N, Y)` from the Poisson–Gamma representation of the Rice law.
pub fn sample_augmented<R: Rng + ?Sized>(p: RiceParams, rng: &mut R) -> AugmentedPair {
    let n = sample_poisson(p.poisson_mean(), rng);
    let x = Gamma::new(n as f64 + 1.0, 2.0 * p.sigma2)
        .expect("shape and scale are positive")
        .sample(rng);
    AugmentedPair { n, y: x.sqrt() }
}

/// Exact Poisson sampler valid for every finite mean: sequential inversion
/// for small means, Hörmann's transformed rejection (PTRS) otherwise.
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    debug_assert!(mean >= 0.0 && mean.is_finite());
    if mean <= 0.0 {
        return 0;
    }
    if mean < 10.0 {
        let mut u: f64 = rng.sample(StandardUniform);
        let mut k = 0u64;
        let mut p = (-mean).exp();
        loop {
            if u <= p {
                return k;
            }
            u -= p;
            k += 1;
            p *= mean / k as f64;
            // Guard against the residual mass lost to rounding.
            if p == 0.0 && k as f64 > mean {
                return k;
            }
        }
    }
    let slam = mean.sqrt();
    let loglam = mean.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let invalpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u: f64 = rng.sample::<f64, _>(StandardUniform) - 0.5;
        let v: f64 = rng.sample(StandardUniform);
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + invalpha.ln() - (a / (us * us) + b).ln()
            <= -mean + k * loglam - ln_factorial(k as u64)
        {
            return k as u64;
        }
    }
}

/// Reinforced Poisson law `p_τ(n) = I₀(2τ)⁻¹ τ²ⁿ/(n!)²`: the law of a
/// Poisson(τ) variable conditioned on coinciding with an independent copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReinforcedPoisson {
    tau: f64,
}

/// Floor on the proposal mean of the rejection sampler.
const PROPOSAL_FLOOR: f64 = 1e-8;

impl ReinforcedPoisson {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return domain(format!("reinforced Poisson parameter must be finite and >= 0, got {tau}"));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn log_pmf(&self, n: u64) -> f64 {
        if self.tau == 0.0 {
            return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
        }
        2.0 * n as f64 * self.tau.ln()
            - 2.0 * ln_factorial(n)
            - log_bessel_i0_unchecked(2.0 * self.tau)
    }

    /// Rejection sampler with a Poisson(α) proposal, α = τ.
    ///
    /// The weight `τ²ⁿ/(n!)² / π_α(n) ∝ (τ²/α)ⁿ/n!` is maximal at the mode
    /// `n* = ⌊τ²/α⌋` of a Poisson(τ²/α) law; the envelope constant is its
    /// value there.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.tau == 0.0 {
            return 0;
        }
        let alpha = self.tau.max(PROPOSAL_FLOOR);
        let ratio = self.tau * self.tau / alpha;
        let log_ratio = ratio.ln();
        let mode = ratio.floor() as u64;
        let ln_mode_fact = ln_factorial(mode);
        loop {
            let n = sample_poisson(alpha, rng);
            // log of weight(n) / C(α, τ); the exp(α) factors cancel.
            let log_accept = (n as f64 - mode as f64) * log_ratio - (ln_factorial(n) - ln_mode_fact);
            let u: f64 = rng.sample(StandardUniform);
            if u.ln() <= log_accept {
                return n;
            }
        }
    }

    /// Reference sampler by inversion of the cumulative distribution.
    pub fn sample_by_inversion<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.tau == 0.0 {
            return 0;
        }
        let u: f64 = rng.sample(StandardUniform);
        let mut cumulative = 0.0;
        let mut n = 0u64;
        let mode = self.tau.floor() as u64;
        loop {
            cumulative += self.log_pmf(n).exp();
            if cumulative >= u {
                return n;
            }
            // Rounding can leave the total a hair below one.
            if n > mode && self.log_pmf(n) < -745.0 {
                return n;
            }
            n += 1;
        }
    }

    /// Naive coincidence sampler: draw `N ~ Poisson(τ)` and accept with
    /// probability `P(N' = N)`. Correct but slow for large τ; testing only.
    pub fn sample_by_coincidence<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        if self.tau == 0.0 {
            return 0;
        }
        let log_tau = self.tau.ln();
        loop {
            let n = sample_poisson(self.tau, rng);
            let log_p = -self.tau + n as f64 * log_tau - ln_factorial(n);
            let u: f64 = rng.sample(StandardUniform);
            if u.ln() <= log_p {
                return n;
            }
        }
    }
}

/// Full conditional of the latent count given the magnitude: reinforced
/// Poisson with `τ = y·exp(linpred)/(2σ²)`. A zero magnitude pins `N = 0`.
pub fn conditional_n_given_y(y: f64, linpred: f64, sigma2: f64) -> Result<ReinforcedPoisson> {
    if !(y.is_finite() && y >= 0.0) {
        return domain(format!("observation must be finite and >= 0, got {y}"));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return domain(format!("noise variance must be finite and > 0, got {sigma2}"));
    }
    if !linpred.is_finite() {
        return domain("linear predictor must be finite");
    }
    ReinforcedPoisson::new(y * linpred.exp() / (2.0 * sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bessel_at_zero_is_zero() {
        assert_eq!(log_bessel_i0(0.0).unwrap(), 0.0);
    }

    #[test]
    fn bessel_rejects_bad_input() {
        assert!(log_bessel_i0(-1.0).is_err());
        assert!(log_bessel_i0(f64::NAN).is_err());
        assert!(log_bessel_i0(f64::INFINITY).is_err());
    }

    #[test]
    fn bessel_branches_agree_at_cutoff() {
        // Evaluate the series a bit past the cutoff and compare with the
        // asymptotic branch.
        for z in [20.0, 22.0, 25.0] {
            let q: f64 = 0.25 * z * z;
            let mut term = 1.0f64;
            let mut sum = 1.0f64;
            for k in 1..400 {
                term *= q / (k * k) as f64;
                sum += term;
            }
            let asym = log_bessel_i0(z).unwrap();
            assert!((sum.ln() - asym).abs() < 1e-13, "z={z}: {} vs {asym}", sum.ln());
        }
    }

    #[test]
    fn bessel_finite_for_huge_arguments() {
        let v = log_bessel_i0(1e6).unwrap();
        assert!(v.is_finite());
        let expected = 1e6 - 0.5 * (2.0 * std::f64::consts::PI * 1e6).ln();
        assert!((v - expected).abs() < 1e-6);
    }

    #[test]
    fn rayleigh_reduction() {
        let p = RiceParams::new(0.0, 1.0).unwrap();
        assert!((rice_log_density(1.0, p).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(rice_log_density(0.0, p).unwrap(), f64::NEG_INFINITY);
        assert!(rice_log_density(-1.0, p).is_err());
    }

    #[test]
    fn params_validated() {
        assert!(RiceParams::new(-1.0, 1.0).is_err());
        assert!(RiceParams::new(1.0, 0.0).is_err());
        assert!(RiceParams::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn zero_amplitude_gives_zero_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = RiceParams::new(0.0, 2.0).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_augmented(p, &mut rng).n, 0);
        }
    }

    #[test]
    fn reinforced_point_mass_at_zero() {
        let d = ReinforcedPoisson::new(0.0).unwrap();
        assert_eq!(d.log_pmf(0), 0.0);
        assert_eq!(d.log_pmf(3), f64::NEG_INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(d.sample(&mut rng), 0);
        assert_eq!(d.sample_by_inversion(&mut rng), 0);
        assert_eq!(d.sample_by_coincidence(&mut rng), 0);
        assert!(ReinforcedPoisson::new(-0.1).is_err());
    }

    #[test]
    fn conditional_tau() {
        assert_eq!(conditional_n_given_y(0.0, 3.0, 1.0).unwrap().tau(), 0.0);
        assert!((conditional_n_given_y(2.0, 0.0, 1.0).unwrap().tau() - 1.0).abs() < 1e-15);
        assert!(conditional_n_given_y(2.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pmf_normalized() {
        for tau in [0.1, 1.0, 5.0, 20.0] {
            let d = ReinforcedPoisson::new(tau).unwrap();
            let total: f64 = (0..400).map(|n| d.log_pmf(n).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "tau={tau}: {total}");
        }
    }

    #[test]
    fn poisson_sampler_mean_and_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mean in [0.3, 4.0, 12.5, 250.0, 1e7] {
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| sample_poisson(mean, &mut rng) as f64).collect();
            let m = draws.iter().sum::<f64>() / n as f64;
            let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (mean / n as f64).sqrt();
            assert!((m - mean).abs() < 4.0 * se, "mean {mean}: got {m}");
            assert!((v / mean - 1.0).abs() < 0.03, "mean {mean}: var {v}");
        }
    }
}
