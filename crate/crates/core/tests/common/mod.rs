//! Oracles shared by the integration tests. They are written independently
//! of the library so that agreement is informative.
#![allow(dead_code)]

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = n as f64 * (z * q1 - q0) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dq * dq);
                break;
            }
        }
    }
    (x, w)
}

/// Composite 20-point Gauss–Legendre rule over `panels` equal panels.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let (x, w) = gauss_legendre(20);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for k in 0..panels {
        let lo = a + k as f64 * h;
        let mut s = 0.0;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * f(lo + 0.5 * h * (xi + 1.0));
        }
        total += 0.5 * h * s;
    }
    total
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `log I₀(z)` by summing the power series in log space.
pub fn log_i0(z: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let lz = (0.5 * z).ln();
    let mut total = f64::NEG_INFINITY;
    let mut lfact = 0.0;
    let mut k = 0u64;
    loop {
        if k > 0 {
            lfact += (k as f64).ln();
        }
        let t = 2.0 * k as f64 * lz - 2.0 * lfact;
        total = log_add(total, t);
        if k as f64 > 0.5 * z && t < total - 40.0 {
            return total;
        }
        k += 1;
    }
}

/// Rice log density.
pub fn rice_logpdf(y: f64, nu: f64, s2: f64) -> f64 {
    y.ln() - s2.ln() - (y * y + nu * nu) / (2.0 * s2) + log_i0(y * nu / s2)
}

/// `log(n!)` by direct summation.
pub fn ln_fact(n: u64) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Total-variation distance between a sample histogram and a pmf.
pub fn tv_counts(counts: &[u64], pmf: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let len = counts.len().max(pmf.len());
    let mut d = 0.0;
    for k in 0..len {
        let e = counts.get(k).copied().unwrap_or(0) as f64 / n as f64;
        let p = pmf.get(k).copied().unwrap_or(0.0);
        d += (e - p).abs();
    }
    0.5 * d
}

/// Histogram of nonnegative integers.
pub fn histogram(xs: &[u64]) -> Vec<u64> {
    let max = xs.iter().copied().max().unwrap_or(0) as usize;
    let mut h = vec![0; max + 1];
    for &x in xs {
        h[x as usize] += 1;
    }
    h
}

/// Kolmogorov–Smirnov statistic of a sample against a CDF.
pub fn ks_stat<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs()).max(((i + 1) as f64 / n - c).abs());
    }
    d
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// CDF tabulated on a uniform grid from log-density values, with linear
/// interpolation. The grid must cover the mass.
pub struct GridCdf {
    pub lo: f64,
    pub h: f64,
    pub cdf: Vec<f64>,
}

impl GridCdf {
    /// Trapezoidal cumulative integral of `exp(logf)` on `n` cells.
    pub fn new<F: Fn(f64) -> f64>(logf: F, lo: f64, hi: f64, n: usize) -> Self {
        let h = (hi - lo) / n as f64;
        let vals: Vec<f64> = (0..=n).map(|i| logf(lo + i as f64 * h)).collect();
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let mut cdf = vec![0.0; n + 1];
        for i in 1..=n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
        }
        let total = cdf[n];
        for c in &mut cdf {
            *c /= total;
        }
        Self { lo, h, cdf }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.lo) / self.h;
        if t <= 0.0 {
            return 0.0;
        }
        let i = t.floor() as usize;
        if i + 1 >= self.cdf.len() {
            return 1.0;
        }
        let f = t - i as f64;
        self.cdf[i] * (1.0 - f) + self.cdf[i + 1] * f
    }

    /// Probability mass of the cells `[lo + k·w, lo + (k+1)·w)` for `bins`
    /// equal bins.
    pub fn bin_masses(&self, bins: usize) -> Vec<f64> {
        let hi = self.lo + self.h * (self.cdf.len() - 1) as f64;
        let w = (hi - self.lo) / bins as f64;
        (0..bins)
            .map(|k| self.eval(self.lo + (k + 1) as f64 * w) - self.eval(self.lo + k as f64 * w))
            .collect()
    }
}

/// Histogram of real samples into `bins` equal cells of `[lo, hi)`;
/// samples outside are counted in an overflow cell at the end.
pub fn histogram_real(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins + 1];
    let w = (hi - lo) / bins as f64;
    for &x in xs {
        let k = ((x - lo) / w).floor();
        if k >= 0.0 && (k as usize) < bins {
            h[k as usize] += 1;
        } else {
            h[bins] += 1;
        }
    }
    h
}

/// Uniformly distributed random rotation from a unit quaternion.
pub fn random_rotation<R: rand::Rng>(rng: &mut R) -> nalgebra::Matrix3<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(rng)).collect();
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    ricefield::design::rotation_from_quaternion([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

pub fn random_unit<R: rand::Rng>(rng: &mut R) -> nalgebra::Vector3<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let v = nalgebra::Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
    v.normalize()
}
