//! Datasets on disk, synthetic phantoms and the WLS initializer.
//!
//! A dataset is three files sharing a stem:
//!
//! ```text
//! <stem>.hdr     text header (below)
//! <stem>.scheme  gradient scheme table (see GradientScheme::parse)
//! <stem>.f32     measurements, little-endian f32, voxel-major in mask order
//! ```
//!
//! Header lines are `key value...`; `#` starts a comment:
//!
//! ```text
//! ricefield-dataset 1
//! dims 16 16 2
//! voxel_size 2 2 2
//! mask_runs 0 512        # alternating run lengths, starting with "outside"
//! scheme phantom.scheme
//! measurements phantom.f32
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{positivity_check, GradientScheme, ModelSpec, Positivity, Tensor2, Tensor4};
use crate::error::{domain, Error, Result};
use crate::priors::{ParameterField, VoxelGraph};
use crate::sampler::stream;

const MAGIC: &str = "ricefield-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// Indexed `x + nx·(y + ny·z)`.
    pub mask: Vec<bool>,
    pub scheme: GradientScheme,
    /// `n_acquisitions` values per masked voxel, voxel-major.
    pub measurements: Vec<f32>,
}

impl Dataset {
    pub fn new(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        mask: Vec<bool>,
        scheme: GradientScheme,
        measurements: Vec<f32>,
    ) -> Result<Self> {
        let d = Self { dims, voxel_size, mask, scheme, measurements };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return domain("dims must be positive");
        }
        if !self.voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return domain("voxel sizes must be positive");
        }
        let cells = self.dims.iter().product::<usize>();
        if self.mask.len() != cells {
            return Err(Error::Dimension { expected: cells, got: self.mask.len() });
        }
        let expected = self.n_voxels() * self.scheme.n_acquisitions();
        if self.measurements.len() != expected {
            return Err(Error::Dimension { expected, got: self.measurements.len() });
        }
        if let Some(i) = self.measurements.iter().position(|y| !(y.is_finite() && *y >= 0.0)) {
            return domain(format!("measurement {i} is negative or not finite"));
        }
        Ok(())
    }

    pub fn n_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn n_acquisitions(&self) -> usize {
        self.scheme.n_acquisitions()
    }

    pub fn graph(&self) -> Result<VoxelGraph> {
        VoxelGraph::from_mask(self.dims, &self.mask)
    }

    pub fn voxel(&self, v: usize) -> &[f32] {
        let m = self.n_acquisitions();
        &self.measurements[v * m..(v + 1) * m]
    }

    /// Writes `<stem>.hdr`, `<stem>.scheme` and `<stem>.f32`; `path` may
    /// carry any extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let (hdr, scheme, bin) = sibling_paths(path);
        let mut text = format!("{MAGIC} {VERSION}\n");
        text += &format!("dims {} {} {}\n", self.dims[0], self.dims[1], self.dims[2]);
        text += &format!("voxel_size {:?} {:?} {:?}\n", self.voxel_size[0], self.voxel_size[1], self.voxel_size[2]);
        text += "mask_runs";
        for r in mask_runs(&self.mask) {
            text += &format!(" {r}");
        }
        text += "\n";
        text += &format!("scheme {}\n", file_name(&scheme));
        text += &format!("measurements {}\n", file_name(&bin));
        let mut bytes = Vec::with_capacity(self.measurements.len() * 4);
        for y in &self.measurements {
            bytes.extend_from_slice(&y.to_le_bytes());
        }
        self.scheme.save(&scheme)?;
        std::fs::write(&bin, bytes)?;
        std::fs::write(&hdr, text)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`]; `path` may name any of
    /// the three files or the bare stem.
    pub fn load(path: &Path) -> Result<Self> {
        let (hdr, _, _) = sibling_paths(path);
        let text = std::fs::read_to_string(&hdr)?;
        let dir = hdr.parent().map(Path::to_path_buf).unwrap_or_default();
        let h = Header::parse(&text)?;
        let scheme = GradientScheme::load(&dir.join(&h.scheme))?;
        let bytes = std::fs::read(dir.join(&h.measurements))?;
        let n_vox = h.mask.iter().filter(|&&m| m).count();
        let expected = n_vox * scheme.n_acquisitions() * 4;
        if bytes.len() != expected {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "{}: expected {expected} bytes, found {} (offset {})",
                    h.measurements,
                    bytes.len(),
                    bytes.len().min(expected)
                ),
            });
        }
        let measurements = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(h.dims, h.voxel_size, h.mask, scheme, measurements)
    }
}

fn sibling_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("hdr" | "scheme" | "f32") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("hdr"), with("scheme"), with("f32"))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn mask_runs(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

#[derive(Debug)]
struct Header {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    mask: Vec<bool>,
    scheme: String,
    measurements: String,
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut dims = None;
        let mut voxel_size = None;
        let mut runs: Option<(usize, Vec<usize>)> = None;
        let mut scheme = None;
        let mut measurements = None;
        let mut seen_magic = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let rest: Vec<&str> = parts.collect();
            if !seen_magic {
                if key != MAGIC || rest.first().and_then(|v| v.parse::<u32>().ok()) != Some(VERSION) {
                    return Err(err(line_no, format!("expected '{MAGIC} {VERSION}'")));
                }
                seen_magic = true;
                continue;
            }
            let nums = |n: usize| -> Result<Vec<f64>> {
                if rest.len() != n {
                    return Err(err(line_no, format!("'{key}' needs {n} values")));
                }
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err(line_no, format!("bad number '{t}'"))))
                    .collect()
            };
            match key {
                "dims" => {
                    let v = nums(3)?;
                    if v.iter().any(|x| *x < 1.0 || x.fract() != 0.0) {
                        return Err(err(line_no, "dims must be positive integers".into()));
                    }
                    dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
                }
                "voxel_size" => {
                    let v = nums(3)?;
                    voxel_size = Some([v[0], v[1], v[2]]);
                }
                "mask_runs" => {
                    let r = rest
                        .iter()
                        .map(|t| t.parse::<usize>().map_err(|_| err(line_no, format!("bad run length '{t}'"))))
                        .collect::<Result<Vec<_>>>()?;
                    runs = Some((line_no, r));
                }
                "scheme" | "measurements" => {
                    if rest.len() != 1 {
                        return Err(err(line_no, format!("'{key}' needs one file name")));
                    }
                    if key == "scheme" {
                        scheme = Some(rest[0].to_string());
                    } else {
                        measurements = Some(rest[0].to_string());
                    }
                }
                other => return Err(err(line_no, format!("unknown key '{other}'"))),
            }
        }
        let end = text.lines().count();
        if !seen_magic {
            return Err(err(end, "empty header".into()));
        }
        let missing = |k: &str| err(end, format!("missing '{k}'"));
        let dims = dims.ok_or_else(|| missing("dims"))?;
        let (runs_line, runs) = runs.ok_or_else(|| missing("mask_runs"))?;
        let mut mask = Vec::new();
        for (i, r) in runs.iter().enumerate() {
            mask.extend(std::iter::repeat_n(i % 2 == 1, *r));
        }
        if mask.len() != dims.iter().product::<usize>() {
            return Err(err(runs_line, format!("mask covers {} cells, dims give {}", mask.len(), dims.iter().product::<usize>())));
        }
        Ok(Self {
            dims,
            voxel_size: voxel_size.ok_or_else(|| missing("voxel_size"))?,
            mask,
            scheme: scheme.ok_or_else(|| missing("scheme"))?,
            measurements: measurements.ok_or_else(|| missing("measurements"))?,
        })
    }
}

// ---------------------------------------------------------------------------
// Phantoms

/// Ground truth for simulation. `truth` has one row of
/// `spec.n_params()` coefficients per masked voxel, `θ₀ = log S₀` first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub mask: Vec<bool>,
    pub spec: ModelSpec,
    pub truth: ParameterField,
    pub sigma2: Vec<f64>,
    /// Stored values become `floor(Y / step)`.
    pub quantize: Option<f64>,
}

/// Region labels of the crossing phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    /// Fiber along `x`.
    FiberX,
    /// Fiber along `y`.
    FiberY,
    Crossing,
}

pub const STANDARD_DIMS: [usize; 3] = [16, 16, 2];
pub const STANDARD_S0: f64 = 1000.0;
/// b-values (s/mm²) of the three shells of the standard acquisition.
pub const STANDARD_SHELLS: [f64; 3] = [500.0, 1000.0, 2000.0];
/// Eigenvalues of the single-fiber tensor, 10⁻³ mm²/s.
pub const FIBER_EIGENVALUES: [f64; 3] = [1.7, 0.3, 0.3];
/// Free-water diffusivity of the background.
pub const BACKGROUND_DIFFUSIVITY: f64 = 3.0;
/// Voxel index range, along the other axis, covered by each fiber band.
pub const FIBER_BAND: std::ops::Range<usize> = 5..11;

/// Region of a grid cell of the standard phantom.
pub fn crossing_region(c: [usize; 3]) -> Region {
    let in_x = FIBER_BAND.contains(&c[1]);
    let in_y = FIBER_BAND.contains(&c[0]);
    match (in_x, in_y) {
        (true, true) => Region::Crossing,
        (true, false) => Region::FiberX,
        (false, true) => Region::FiberY,
        (false, false) => Region::Background,
    }
}

/// Fiber tensor with principal axis `axis` (0, 1 or 2).
pub fn fiber_tensor(axis: usize) -> Tensor2 {
    let mut l = [FIBER_EIGENVALUES[1]; 3];
    l[axis] = FIBER_EIGENVALUES[0];
    Tensor2::from_matrix(&Matrix3::from_diagonal(&Vector3::from(l)))
}

/// Diffusivity `0.3·|u|⁴ + 1.4·(x⁴ + y⁴)`: maxima along `x` and `y`.
pub fn crossing_tensor() -> Tensor4 {
    let lo = FIBER_EIGENVALUES[1];
    let excess = FIBER_EIGENVALUES[0] - lo;
    let px = Tensor2::from_matrix(&Matrix3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0)));
    let py = Tensor2::from_matrix(&Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 0.0)));
    let a = Tensor4::from_product(&px, &px).0;
    let b = Tensor4::from_product(&py, &py).0;
    let iso = Tensor4::isotropic(lo).0;
    let mut c = [0.0; 15];
    for i in 0..15 {
        c[i] = iso[i] + excess * (a[i] + b[i]);
    }
    Tensor4(c)
}

/// `d(u) = uᵀDu` written as a 4th-order tensor on the unit sphere.
pub fn lift_to_4th(d: &Tensor2) -> Tensor4 {
    Tensor4::from_product(d, &Tensor2::isotropic(1.0))
}

impl PhantomSpec {
    /// The standard 16×16×2 crossing phantom: fibers along `x` and `y` in
    /// bands of six voxels, crossing in the central 6×6 block of each
    /// slice, free water elsewhere. Truth is stored as 4th-order tensors.
    pub fn crossing(sigma: f64, quantize: Option<f64>) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return domain("sigma must be >= 0");
        }
        let dims = STANDARD_DIMS;
        let graph = VoxelGraph::full(dims);
        let rows: Vec<Vec<f64>> = graph
            .coords
            .iter()
            .map(|&c| {
                let t4 = match crossing_region(c) {
                    Region::Background => Tensor4::isotropic(BACKGROUND_DIFFUSIVITY),
                    Region::FiberX => lift_to_4th(&fiber_tensor(0)),
                    Region::FiberY => lift_to_4th(&fiber_tensor(1)),
                    Region::Crossing => crossing_tensor(),
                };
                std::iter::once(STANDARD_S0.ln()).chain(t4.0).collect()
            })
            .collect();
        let n = rows.len();
        Self::new(
            dims,
            [2.0; 3],
            vec![true; n],
            ModelSpec::tensor4(),
            ParameterField::from_rows(&rows)?,
            vec![sigma * sigma; n],
            quantize,
        )
    }

    pub fn new(
        dims: [usize; 3],
        voxel_size: [f64; 3],
        mask: Vec<bool>,
        spec: ModelSpec,
        truth: ParameterField,
        sigma2: Vec<f64>,
        quantize: Option<f64>,
    ) -> Result<Self> {
        let s = Self { dims, voxel_size, mask, spec, truth, sigma2, quantize };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mask.iter().filter(|&&m| m).count();
        if self.mask.len() != self.dims.iter().product::<usize>() {
            return Err(Error::Dimension { expected: self.dims.iter().product(), got: self.mask.len() });
        }
        if self.truth.p != self.spec.n_params() || self.truth.n_voxels() != n {
            return Err(Error::Dimension { expected: n * self.spec.n_params(), got: self.truth.data.len() });
        }
        if self.sigma2.len() != n {
            return Err(Error::Dimension { expected: n, got: self.sigma2.len() });
        }
        if !self.sigma2.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return domain("sigma2 must be >= 0");
        }
        if let Some(q) = self.quantize {
            if !(q.is_finite() && q > 0.0) {
                return domain("quantization step must be > 0");
            }
        }
        for v in 0..n {
            let th = self.truth.get(v);
            if !th.iter().all(|x| x.is_finite()) {
                return domain(format!("truth of voxel {v} is not finite"));
            }
            if self.spec.dim() > 0 && positivity_check(&self.spec, &th[1..])?.verdict != Positivity::Positive {
                return domain(format!("truth of voxel {v} is not positive"));
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<VoxelGraph> {
        VoxelGraph::from_mask(self.dims, &self.mask)
    }
}

/// Draws `Y = |ν + ε₁ + iε₂|` for every masked voxel and acquisition.
/// Voxels use independent streams, so the result does not depend on the
/// thread count.
pub fn simulate_phantom(spec: &PhantomSpec, scheme: &GradientScheme, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let z = spec.spec.design_matrix(scheme)?;
    let m = z.nrows();
    let n = spec.truth.n_voxels();
    let per_voxel: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream(seed, 0, 0, v as u64, 0);
            let sigma = spec.sigma2[v].sqrt();
            let eta = crate::glm::linpred(spec.truth.get(v), &z);
            eta.iter()
                .map(|e| {
                    let nu = e.exp();
                    let y = if sigma == 0.0 {
                        nu
                    } else {
                        let a: f64 = rng.sample(StandardNormal);
                        let b: f64 = rng.sample(StandardNormal);
                        (nu + sigma * a).hypot(sigma * b)
                    };
                    match spec.quantize {
                        Some(q) => (y / q).floor() as f32,
                        None => y as f32,
                    }
                })
                .collect()
        })
        .collect();
    let mut measurements = Vec::with_capacity(n * m);
    for v in per_voxel {
        measurements.extend(v);
    }
    Dataset::new(spec.dims, spec.voxel_size, spec.mask.clone(), scheme.clone(), measurements)
}

// ---------------------------------------------------------------------------
// WLS initializer

pub const WLS_WEIGHT_BOUNDS: (f64, f64) = (1e-6, 1e6);
const WLS_MAX_ITER: usize = 50;
const WLS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct WlsInit {
    pub theta: ParameterField,
    pub sigma2: Vec<f64>,
    /// Voxels whose own fit failed and that were copied from a neighbor.
    pub borrowed: Vec<bool>,
    pub iterations: Vec<usize>,
}

/// Outcome of the WLS fit of one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub theta: Vec<f64>,
    pub sigma2: f64,
    pub iterations: usize,
    /// Largest coefficient change in the last iteration.
    pub last_change: f64,
}

/// Weighted least squares on the rows kept; `None` if rank deficient.
fn weighted_solve(z: &DMatrix<f64>, t: &[f64], w: &[f64]) -> Option<DVector<f64>> {
    let n = z.nrows();
    let a = DMatrix::from_fn(n, z.ncols(), |i, j| w[i].sqrt() * z[(i, j)]);
    let b = DVector::from_fn(n, |i, _| w[i].sqrt() * t[i]);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return None;
    }
    svd.solve(&b, 0.0).ok()
}

/// Iterated WLS fit of `log Y ≈ Zθ` for one voxel, using acquisitions with
/// `Y > 0` and `b ≤ b_max`. Weights are `exp(2Zθ)` divided by their mean
/// and clipped to [`WLS_WEIGHT_BOUNDS`].
pub fn wls_fit_voxel(z: &DMatrix<f64>, b: &[f64], y: &[f64], b_max: f64) -> Option<WlsFit> {
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0 && b[i] <= b_max).collect();
    let p = z.ncols();
    if keep.len() < p {
        return None;
    }
    let zk = DMatrix::from_fn(keep.len(), p, |i, j| z[(keep[i], j)]);
    let t: Vec<f64> = keep.iter().map(|&i| y[i].ln()).collect();
    let mut theta = weighted_solve(&zk, &t, &vec![1.0; keep.len()])?;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    let raw_weights = |theta: &DVector<f64>| -> Vec<f64> { (&zk * theta).iter().map(|e| (2.0 * e).exp()).collect() };
    while iterations < WLS_MAX_ITER && change > WLS_TOL {
        let raw = raw_weights(&theta);
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        if !(mean.is_finite() && mean > 0.0) {
            return None;
        }
        let w: Vec<f64> = raw
            .iter()
            .map(|r| (r / mean).clamp(WLS_WEIGHT_BOUNDS.0, WLS_WEIGHT_BOUNDS.1))
            .collect();
        let next = weighted_solve(&zk, &t, &w)?;
        change = (&next - &theta).amax() / theta.amax().max(1.0);
        theta = next;
        iterations += 1;
    }
    if !theta.iter().all(|x| x.is_finite()) {
        return None;
    }
    // var(log Y) ≈ σ² exp(−2Zθ), so exp(2Zθ)·r² estimates σ².
    let raw = raw_weights(&theta);
    let resid = &zk * &theta;
    let dof = (keep.len() - p).max(1) as f64;
    let ss: f64 = raw.iter().zip(resid.iter()).zip(&t).map(|((w, f), t)| w * (t - f).powi(2)).sum();
    Some(WlsFit { theta: theta.iter().copied().collect(), sigma2: ss / dof, iterations, last_change: change })
}

/// Per-voxel WLS initialization. Voxels that cannot be fitted take the
/// values of the nearest fitted voxel (graph distance, lowest index on
/// ties). Noise estimates are floored at `1e-12·max(Y)²` so the result is a
/// valid chain state even for noiseless data.
pub fn wls_initialize(data: &Dataset, spec: &ModelSpec, b_max: f64) -> Result<WlsInit> {
    data.validate()?;
    let z = spec.design_matrix(&data.scheme)?;
    let b: Vec<f64> = data.scheme.acquisitions().into_iter().map(|(_, b)| b).collect();
    let graph = data.graph()?;
    let n = data.n_voxels();
    let fits: Vec<Option<WlsFit>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let y: Vec<f64> = data.voxel(v).iter().map(|&x| x as f64).collect();
            wls_fit_voxel(&z, &b, &y, b_max)
        })
        .collect();
    if fits.iter().all(Option::is_none) {
        return Err(Error::Numeric("WLS failed in every voxel".into()));
    }
    let p = spec.n_params();
    let mut theta = ParameterField::zeros(n, p);
    let mut sigma2 = vec![0.0; n];
    let mut borrowed = vec![false; n];
    let mut iterations = vec![0; n];
    for v in 0..n {
        let src = match &fits[v] {
            Some(_) => v,
            None => {
                borrowed[v] = true;
                nearest_fitted(&graph, v, &fits).ok_or_else(|| {
                    Error::Numeric(format!("voxel {v} has no fitted voxel in its connected component"))
                })?
            }
        };
        let fit = fits[src].as_ref().expect("source voxel was fitted");
        theta.get_mut(v).copy_from_slice(&fit.theta);
        let ymax = data.voxel(v).iter().fold(0.0f64, |a, &y| a.max(y as f64));
        sigma2[v] = fit.sigma2.max(1e-12 * ymax * ymax).max(f64::MIN_POSITIVE);
        iterations[v] = fit.iterations;
    }
    Ok(WlsInit { theta, sigma2, borrowed, iterations })
}

fn nearest_fitted(graph: &VoxelGraph, v: usize, fits: &[Option<WlsFit>]) -> Option<usize> {
    let mut seen = vec![false; graph.len()];
    seen[v] = true;
    let mut frontier = vec![v];
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &u in &frontier {
            for &w in &graph.neighbors[u] {
                if !seen[w] {
                    seen[w] = true;
                    next.push(w);
                }
            }
        }
        next.sort_unstable();
        if let Some(&w) = next.iter().find(|&&w| fits[w].is_some()) {
            return Some(w);
        }
        frontier = next;
    }
    None
}
