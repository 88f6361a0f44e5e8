//! DIC, scalar maps and diffusivity-profile export.
//!
//! Maps are written as 16-bit binary PGM (P5) images, one per slice, with
//! values scaled linearly between the recorded minimum and maximum, plus a
//! tab-separated table holding the exact values.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::design::{
    fa_md_2nd, md_4th, project_4th_to_2nd, tensor_sh_bijection, Family, ModelSpec, Tensor2, Tensor4,
};
use crate::error::{domain, Error, Result};
use crate::priors::VoxelGraph;
use crate::sampler::{ChainSummary, Draws, Problem};

// ---------------------------------------------------------------------------
// DIC

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DicScope {
    Voxel(usize),
    Field,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicReport {
    pub dic: f64,
    /// `mean_deviance − deviance_at_mean`.
    pub n_eff: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
    pub scope: DicScope,
}

impl DicReport {
    pub fn new(mean_deviance: f64, deviance_at_mean: f64, scope: DicScope) -> Self {
        let n_eff = mean_deviance - deviance_at_mean;
        Self { dic: mean_deviance + n_eff, n_eff, mean_deviance, deviance_at_mean, scope }
    }
}

/// DIC for any model: `deviance` maps a parameter vector to `−2 log p`.
/// The plug-in point is the componentwise posterior mean.
pub fn compute_dic_generic<F>(samples: &[Vec<f64>], scope: DicScope, deviance: F) -> Result<DicReport>
where
    F: Fn(&[f64]) -> f64,
{
    if samples.len() < 2 {
        return domain("DIC needs at least 2 samples");
    }
    let mut acc = DicAccumulator::new(samples[0].len(), 0);
    for s in samples {
        acc.push(s, &[], deviance(s));
    }
    let (mean, _) = acc.means();
    Ok(DicReport::new(acc.mean_deviance(), deviance(&mean), scope))
}

/// Running sums for DIC. Samples are summed in push order, so every caller
/// feeding the same draws gets bit-identical results.
#[derive(Debug, Clone)]
pub struct DicAccumulator {
    n: u64,
    deviance: f64,
    theta: Vec<f64>,
    sigma2: Vec<f64>,
}

impl DicAccumulator {
    pub fn new(theta_len: usize, sigma2_len: usize) -> Self {
        Self { n: 0, deviance: 0.0, theta: vec![0.0; theta_len], sigma2: vec![0.0; sigma2_len] }
    }

    pub fn push(&mut self, theta: &[f64], sigma2: &[f64], deviance: f64) {
        self.n += 1;
        self.deviance += deviance;
        self.theta.iter_mut().zip(theta).for_each(|(a, b)| *a += b);
        self.sigma2.iter_mut().zip(sigma2).for_each(|(a, b)| *a += b);
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean_deviance(&self) -> f64 {
        self.deviance / self.n as f64
    }

    pub fn means(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        (self.theta.iter().map(|s| s / n).collect(), self.sigma2.iter().map(|s| s / n).collect())
    }

    /// Field-level report; `None` with fewer than two samples.
    pub fn finish(&self, problem: &Problem) -> Option<DicReport> {
        if self.n < 2 {
            return None;
        }
        let (theta, sigma2) = self.means();
        Some(DicReport::new(self.mean_deviance(), field_deviance(problem, &theta, &sigma2), DicScope::Field))
    }
}

/// `−2 Σ_v log p(Y_v | θ_v, σ²_v)` under the Rice likelihood.
pub fn field_deviance(problem: &Problem, theta: &[f64], sigma2: &[f64]) -> f64 {
    let p = problem.spec.n_params();
    let ll: f64 = (0..problem.n_voxels())
        .map(|v| problem.voxel_log_likelihood(v, &theta[v * p..(v + 1) * p], sigma2[v]))
        .sum();
    -2.0 * ll
}

/// Field DIC from stored draws (posterior means of θ and σ² as plug-in).
pub fn compute_dic(problem: &Problem, draws: &Draws) -> Result<DicReport> {
    if draws.theta.len() < 2 {
        return domain("DIC needs at least 2 post-burn-in draws");
    }
    let p = problem.spec.n_params();
    let mut acc = DicAccumulator::new(problem.n_voxels() * p, problem.n_voxels());
    for (t, s) in draws.theta.iter().zip(&draws.sigma2) {
        if t.len() != problem.n_voxels() * p || s.len() != problem.n_voxels() {
            return Err(Error::Dimension { expected: problem.n_voxels() * p, got: t.len() });
        }
        acc.push(t, s, field_deviance(problem, t, s));
    }
    acc.finish(problem).ok_or_else(|| Error::Domain("DIC needs at least 2 draws".into()))
}

/// Per-voxel DIC from stored draws.
pub fn compute_dic_voxel(problem: &Problem, draws: &Draws, v: usize) -> Result<DicReport> {
    let p = problem.spec.n_params();
    if v >= problem.n_voxels() {
        return domain(format!("voxel {v} out of range"));
    }
    let samples: Vec<Vec<f64>> = draws
        .theta
        .iter()
        .zip(&draws.sigma2)
        .map(|(t, s)| t[v * p..(v + 1) * p].iter().copied().chain(std::iter::once(s[v])).collect())
        .collect();
    compute_dic_generic(&samples, DicScope::Voxel(v), |x| {
        -2.0 * problem.voxel_log_likelihood(v, &x[..p], x[p])
    })
}

// ---------------------------------------------------------------------------
// Scalar maps

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Fa,
    Md,
    Acceptance,
    Sigma2,
}

impl MapKind {
    pub const ALL: [MapKind; 4] = [MapKind::Fa, MapKind::Md, MapKind::Acceptance, MapKind::Sigma2];

    pub fn name(&self) -> &'static str {
        match self {
            MapKind::Fa => "fa",
            MapKind::Md => "md",
            MapKind::Acceptance => "acceptance",
            MapKind::Sigma2 => "sigma2",
        }
    }
}

/// Tensor representation of a coefficient vector: Tensor2/Tensor4 as is,
/// `Sh(1)`/`Sh(2)` through the bijection.
pub fn as_tensor(spec: &ModelSpec, coeffs: &[f64]) -> Result<TensorView> {
    match spec.family {
        Family::Tensor2 => Ok(TensorView::Second(Tensor2::from_slice(coeffs))),
        Family::Tensor4 => Ok(TensorView::Fourth(Tensor4::from_slice(coeffs))),
        Family::Sh { order } if order == 1 || order == 2 => {
            let tspec = if order == 1 { ModelSpec::tensor2() } else { ModelSpec::tensor4() };
            let b = tensor_sh_bijection(&tspec)?;
            let t = b.transpose() * DVector::from_column_slice(coeffs);
            Ok(if order == 1 {
                TensorView::Second(Tensor2::from_slice(t.as_slice()))
            } else {
                TensorView::Fourth(Tensor4::from_slice(t.as_slice()))
            })
        }
        _ => Err(Error::NotApplicable(format!("no tensor form for {:?}", spec.family))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TensorView {
    Second(Tensor2),
    Fourth(Tensor4),
}

impl TensorView {
    /// FA of the (projected) 2nd-order tensor and the MD.
    pub fn fa_md(&self) -> (f64, f64) {
        match self {
            TensorView::Second(t) => fa_md_2nd(t),
            TensorView::Fourth(t) => (fa_md_2nd(&project_4th_to_2nd(t)).0, md_4th(t)),
        }
    }

    pub fn principal_direction(&self) -> Vector3<f64> {
        match self {
            TensorView::Second(t) => t.principal_direction(),
            TensorView::Fourth(t) => project_4th_to_2nd(t).principal_direction(),
        }
    }
}

/// Per-voxel values of a map computed from a summary.
pub fn map_values(summary: &ChainSummary, kind: MapKind) -> Result<Vec<f64>> {
    let p = summary.p;
    match kind {
        MapKind::Acceptance => Ok(summary.acceptance.clone()),
        MapKind::Sigma2 => Ok(summary.sigma2_mean.clone()),
        MapKind::Fa | MapKind::Md => (0..summary.n_voxels)
            .map(|v| {
                let t = as_tensor(&summary.spec, &summary.theta_mean[v * p + 1..(v + 1) * p])?;
                let (fa, md) = t.fa_md();
                Ok(if kind == MapKind::Fa { fa } else { md })
            })
            .collect(),
    }
}

/// Writes `<prefix>_<kind>_z<k>.pgm` for every slice and
/// `<prefix>_<kind>.tsv`; returns the image paths.
pub fn export_maps(values: &[f64], graph: &VoxelGraph, kind: MapKind, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    if values.len() != graph.len() {
        return Err(Error::Dimension { expected: graph.len(), got: values.len() });
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let [nx, ny, nz] = graph.dims;
    let mut grid = vec![None; nx * ny * nz];
    for (v, c) in graph.coords.iter().enumerate() {
        grid[c[0] + nx * (c[1] + ny * c[2])] = Some(values[v]);
    }
    let mut paths = Vec::new();
    for z in 0..nz {
        let path = dir.join(format!("{prefix}_{}_z{z}.pgm", kind.name()));
        let mut bytes = format!("P5\n{nx} {ny}\n65535\n").into_bytes();
        for y in 0..ny {
            for x in 0..nx {
                let q = match grid[x + nx * (y + ny * z)] {
                    Some(v) if v.is_finite() && hi > lo => (((v - lo) / (hi - lo)) * 65535.0).round() as u16,
                    _ => 0,
                };
                bytes.extend_from_slice(&q.to_be_bytes());
            }
        }
        std::fs::write(&path, bytes)?;
        paths.push(path);
    }
    let mut table = format!("# kind {}\n# min {lo:?}\n# max {hi:?}\nx\ty\tz\tvalue\n", kind.name());
    for (v, c) in graph.coords.iter().enumerate() {
        table += &format!("{}\t{}\t{}\t{:?}\n", c[0], c[1], c[2], values[v]);
    }
    std::fs::write(dir.join(format!("{prefix}_{}.tsv", kind.name())), table)?;
    Ok(paths)
}

/// Reads a table written by [`export_maps`] as `(coords, values)`.
pub fn read_map_table(path: &Path) -> Result<(Vec<[usize; 3]>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)?;
    let mut coords = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("x\t") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Parse { line: i + 1, msg: format!("malformed row '{line}'") };
        if f.len() != 4 {
            return Err(bad());
        }
        let c = [f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?];
        coords.push(c);
        values.push(f[3].parse().map_err(|_| bad())?);
    }
    Ok((coords, values))
}

/// Reads a 16-bit P5 image as `(width, height, pixels)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = std::fs::read(path)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { line: 1, msg: "truncated PGM header".into() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |m: &str| Error::Parse { line: 1, msg: m.into() };
    if fields[0] != "P5" || fields[3] != "65535" {
        return Err(bad("not a 16-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos..pos + 2 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()))
}

// ---------------------------------------------------------------------------
// Profiles

/// Unit-sphere triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl SphereMesh {
    /// Icosahedron refined `subdivisions` times by edge midpoints projected
    /// onto the sphere (12, 42, 162, 642, ... vertices).
    pub fn icosphere(subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let raw = [
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ];
        let mut vertices: Vec<Vector3<f64>> = raw.iter().map(|r| Vector3::from(*r).normalize()).collect();
        let mut faces = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut mids: HashMap<(usize, usize), usize> = HashMap::new();
            let mut mid = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
                *mids.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    verts.push((verts[a] + verts[b]).normalize());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Self { vertices, faces }
    }

    /// Vertex adjacency from the faces.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for i in 0..3 {
                let (a, b) = (f[i], f[(i + 1) % 3]);
                nb[a].push(b);
                nb[b].push(a);
            }
        }
        for n in &mut nb {
            n.sort_unstable();
            n.dedup();
        }
        nb
    }

    /// Writes one `x y z` line per vertex, then one `f a b c` line per face.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for v in &self.vertices {
            out += &format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z);
        }
        for f in &self.faces {
            out += &format!("f {} {} {}\n", f[0], f[1], f[2]);
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// `d(u)` at every mesh vertex.
pub fn profile_values(spec: &ModelSpec, coeffs: &[f64], mesh: &SphereMesh) -> Result<Vec<f64>> {
    mesh.vertices.iter().map(|u| spec.diffusivity(coeffs, u)).collect()
}

/// Vertices where `d` is at least as large as at every mesh neighbour and
/// strictly larger than at one of them.
pub fn profile_local_maxima(values: &[f64], neighbors: &[Vec<usize>]) -> Vec<usize> {
    (0..values.len())
        .filter(|&i| {
            neighbors[i].iter().all(|&j| values[i] >= values[j]) && neighbors[i].iter().any(|&j| values[i] > values[j])
        })
        .collect()
}

/// Maximum directions of a profile modulo antipodes, each returned once,
/// in decreasing order of `d`.
pub fn profile_maxima_directions(values: &[f64], mesh: &SphereMesh) -> Vec<Vector3<f64>> {
    let nb = mesh.neighbors();
    let mut idx = profile_local_maxima(values, &nb);
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    for i in idx {
        let u = mesh.vertices[i];
        if dirs.iter().all(|d| d.dot(&u).abs() < 1.0 - 1e-9) {
            dirs.push(u);
        }
    }
    dirs
}

/// Angle between two axes, in degrees, in `[0, 90]`.
pub fn axis_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a.normalize().dot(&b.normalize()).abs().min(1.0)).acos().to_degrees()
}

/// Color code of the principal eigenvector: `|e_x|, |e_y|, |e_z|` scaled to
/// 0..=255.
pub fn direction_rgb(e: &Vector3<f64>) -> [u8; 3] {
    let e = e.normalize();
    [0, 1, 2].map(|i| (e[i].abs() * 255.0).round() as u8)
}

/// Writes the mesh to `<stem>.mesh` and, per voxel, a line
/// `x y z r g b d_0 ... d_{k-1}` to `<stem>.profiles`.
pub fn export_profiles(
    theta: &[f64],
    p: usize,
    spec: &ModelSpec,
    graph: &VoxelGraph,
    mesh: &SphereMesh,
    stem: &Path,
) -> Result<()> {
    if theta.len() != p * graph.len() || p != spec.n_params() {
        return Err(Error::Dimension { expected: spec.n_params() * graph.len(), got: theta.len() });
    }
    mesh.save(&stem.with_extension("mesh"))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("profiles"))?);
    writeln!(file, "# x y z r g b followed by d(u) at each mesh vertex")?;
    for (v, c) in graph.coords.iter().enumerate() {
        let coeffs = &theta[v * p + 1..(v + 1) * p];
        let rgb = as_tensor(spec, coeffs).map(|t| direction_rgb(&t.principal_direction())).unwrap_or([0, 0, 0]);
        write!(file, "{} {} {} {} {} {}", c[0], c[1], c[2], rgb[0], rgb[1], rgb[2])?;
        for d in profile_values(spec, coeffs, mesh)? {
            write!(file, " {d:?}")?;
        }
        writeln!(file)?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for (s, n) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
            let m = SphereMesh::icosphere(s);
            assert_eq!(m.vertices.len(), n);
            assert_eq!(m.faces.len(), 20 * 4usize.pow(s as u32));
        }
    }

    #[test]
    fn dic_identity() {
        let r = DicReport::new(10.0, 7.0, DicScope::Field);
        assert_eq!(r.n_eff, 3.0);
        assert_eq!(r.dic, 2.0 * 10.0 - 7.0);
    }

    #[test]
    fn constant_deviance_has_no_effective_parameters() {
        let s = vec![vec![1.0], vec![2.0], vec![5.0]];
        let r = compute_dic_generic(&s, DicScope::Field, |_| 4.0).unwrap();
        assert_eq!(r.n_eff, 0.0);
        assert_eq!(r.dic, 4.0);
        assert!(compute_dic_generic(&s[..1], DicScope::Field, |_| 0.0).is_err());
    }
}
