//! Point-cloud geometry checks: exact nearest-neighbour distances through a
//! uniform voxel grid, precision / recall / F-score at a distance threshold,
//! point-to-point ICP with a closed-form SVD fit, threshold sweeps, and
//! ASCII PLY input/output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Optional per-point spectra, all of the same length.
    pub spectra: Option<Vec<Vec<f64>>>,
    /// Wavelengths (nm) of the spectra, when known.
    pub wavelengths: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let pc = PointCloud {
            points,
            spectra: None,
            wavelengths: None,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn with_spectra(points: Vec<Vec3>, spectra: Vec<Vec<f64>>, wavelengths: Option<Vec<f64>>) -> Result<Self> {
        let pc = PointCloud {
            points,
            spectra: Some(spectra),
            wavelengths,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("point cloud is empty".into()));
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument("non-finite point coordinate".into()));
        }
        if let Some(s) = &self.spectra {
            if s.len() != self.points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} spectra for {} points",
                    s.len(),
                    self.points.len()
                )));
            }
            let l = s[0].len();
            if s.iter().any(|v| v.len() != l) {
                return Err(Error::ShapeMismatch("spectra of unequal length".into()));
            }
            if let Some(w) = &self.wavelengths {
                if w.len() != l {
                    return Err(Error::ShapeMismatch("wavelength count differs from spectra".into()));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            spectra: self.spectra.clone(),
            wavelengths: self.wavelengths.clone(),
        }
    }

    /// Every `ceil(n / max)`-th point, so at most `max` remain.
    pub fn subsample(&self, max: usize) -> PointCloud {
        if self.len() <= max || max == 0 {
            return self.clone();
        }
        let stride = self.len().div_ceil(max);
        let keep: Vec<usize> = (0..self.len()).step_by(stride).collect();
        self.select(&keep)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            spectra: self.spectra.as_ref().map(|s| idx.iter().map(|&i| s[i].clone()).collect()),
            wavelengths: self.wavelengths.clone(),
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }
}

#[inline]
fn dist(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

/// Uniform voxel grid over a point set, stored in compressed rows.
pub struct GridIndex<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl<'a> GridIndex<'a> {
    /// Builds a grid with roughly two points per occupied cell for surface
    /// clouds, capped at 256 cells per axis.
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let span = ext.max().max(1e-12);
        // surface-like sets grow with the square of the cell count
        let per_axis = ((points.len() as f64 / 2.0).sqrt()).clamp(1.0, 256.0);
        let cell = span / per_axis;
        Self::with_cell(points, lo, cell)
    }

    fn with_cell(points: &'a [Vec3], origin: Vec3, cell: f64) -> Self {
        let mut hi = points[0];
        for p in points {
            hi = hi.sup(p);
        }
        let dims = [0, 1, 2].map(|a| (((hi[a] - origin[a]) / cell).floor() as usize + 1).clamp(1, 256));
        let mut grid = GridIndex {
            points,
            origin,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = points.iter().map(|p| grid.flat(grid.cell_of(p))).collect();
        let mut counts = vec![0u32; n_cells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k] as usize] = i as u32;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn scan_cell(&self, c: [usize; 3], q: &Vec3, best: &mut (f64, usize)) {
        let k = self.flat(c);
        for &i in &self.order[self.starts[k] as usize..self.starts[k + 1] as usize] {
            let d = dist(q, &self.points[i as usize]);
            if d < best.0 || (d == best.0 && (i as usize) < best.1) {
                *best = (d, i as usize);
            }
        }
    }

    /// Exact nearest neighbour: `(distance, index)`.
    pub fn nearest(&self, q: &Vec3) -> (f64, usize) {
        let c = self.cell_of(q);
        let max_r = self.dims.iter().copied().max().unwrap();
        let mut best = (f64::INFINITY, usize::MAX);
        for r in 0..=max_r {
            let ri = r as isize;
            let range = |a: usize| {
                let lo = (c[a] as isize - ri).max(0) as usize;
                let hi = ((c[a] as isize + ri) as usize).min(self.dims[a] - 1);
                (lo, hi)
            };
            let (x0, x1) = range(0);
            let (y0, y1) = range(1);
            let (z0, z1) = range(2);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let on_shell = (x as isize - c[0] as isize).abs() == ri
                            || (y as isize - c[1] as isize).abs() == ri
                            || (z as isize - c[2] as isize).abs() == ri;
                        if on_shell {
                            self.scan_cell([x, y, z], q, &mut best);
                        }
                    }
                }
            }
            // unsearched cells are at least r cells beyond the start cell
            if best.0 <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

impl GridIndex<'_> {
    /// The `k` nearest points to `q`, closest first, ties by index.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(f64, usize)> {
        let k = k.min(self.points.len());
        let c = self.cell_of(q);
        let max_r = self.dims.iter().copied().max().unwrap();
        let mut found: Vec<(f64, usize)> = Vec::new();
        let kth = |f: &Vec<(f64, usize)>| if f.len() < k { f64::INFINITY } else { f[k - 1].0 };
        for r in 0..=max_r {
            let ri = r as isize;
            let lo = |a: usize| (c[a] as isize - ri).max(0) as usize;
            let hi = |a: usize| ((c[a] as isize + ri) as usize).min(self.dims[a] - 1);
            for z in lo(2)..=hi(2) {
                for y in lo(1)..=hi(1) {
                    for x in lo(0)..=hi(0) {
                        let cheb = [x, y, z]
                            .iter()
                            .zip(c)
                            .map(|(a, b)| (*a as isize - b as isize).abs())
                            .max()
                            .unwrap();
                        if cheb != ri {
                            continue;
                        }
                        let cell = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[cell] as usize..self.starts[cell + 1] as usize] {
                            found.push((dist(q, &self.points[i as usize]), i as usize));
                        }
                    }
                }
            }
            found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            found.truncate(k);
            if kth(&found) <= r as f64 * self.cell {
                break;
            }
        }
        found
    }
}

/// Distance from every point of `a` to its nearest neighbour in `b`.
pub fn nearest_distances(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    let index = GridIndex::new(&b.points);
    a.points.par_iter().map(|p| index.nearest(p).0).collect()
}

/// O(N M) reference for [`nearest_distances`].
pub fn brute_force_distances(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points
        .iter()
        .map(|p| b.points.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrScore {
    pub precision: f64,
    pub recall: f64,
    /// In `[0, 1]`.
    pub fscore: f64,
}

pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn fraction_within(d: &[f64], eps: f64) -> f64 {
    d.iter().filter(|v| **v <= eps).count() as f64 / d.len() as f64
}

pub fn precision_recall(sc: &PointCloud, gt: &PointCloud, eps: f64) -> Result<PrScore> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {eps} must be >= 0")));
    }
    let p = fraction_within(&nearest_distances(sc, gt), eps);
    let r = fraction_within(&nearest_distances(gt, sc), eps);
    Ok(PrScore {
        precision: p,
        recall: r,
        fscore: fscore(p, r),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Least-squares rigid map taking `src[i]` onto `dst[i]`.
pub fn fit_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Degenerate("SVD of the cross-covariance failed".into())),
    };
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = v * fix * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: cd - rotation * cs,
    })
}

fn check_spread(pc: &PointCloud, name: &str) -> Result<()> {
    if pc.len() < 3 {
        return Err(Error::Degenerate(format!("{name} has fewer than 3 points")));
    }
    let c = centroid(&pc.points);
    let mut cov = Matrix3::zeros();
    for p in &pc.points {
        cov += (p - c) * (p - c).transpose();
    }
    let ev = cov.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate(format!("{name} is collinear or coincident")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Clouds larger than this are subsampled before registration.
    pub max_points: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iters: 50,
            tol: 1e-8,
            max_points: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rms: f64,
    /// RMS at the starting guess (identity or centroid shift) and after
    /// every iteration.
    pub rms_history: Vec<f64>,
}

fn rms_of(d: &[f64]) -> f64 {
    (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt()
}

/// Point-to-point ICP aligning `source` onto `target`.
pub fn icp_align(source: &PointCloud, target: &PointCloud, cfg: &IcpConfig) -> Result<IcpResult> {
    let src = source.subsample(cfg.max_points);
    let dst = target.subsample(cfg.max_points);
    check_spread(&src, "source")?;
    check_spread(&dst, "target")?;
    let index = GridIndex::new(&dst.points);
    let matches = |pts: &[Vec3]| -> (Vec<f64>, Vec<usize>) { pts.iter().map(|p| index.nearest(p)).unzip() };
    // Start from the centroid alignment when it is the better guess.
    let shift = RigidTransform {
        rotation: Mat3::identity(),
        translation: centroid(&dst.points) - centroid(&src.points),
    };
    let shifted: Vec<Vec3> = src.points.iter().map(|p| shift.apply(p)).collect();
    let (d0, nn0) = matches(&src.points);
    let (d1, nn1) = matches(&shifted);
    let (mut total, mut moved, mut nn, mut rms) = if rms_of(&d1) < rms_of(&d0) {
        (shift, shifted, nn1, rms_of(&d1))
    } else {
        (RigidTransform::identity(), src.points.clone(), nn0, rms_of(&d0))
    };
    let mut history = vec![rms];
    for _ in 0..cfg.max_iters {
        let pairs: Vec<Vec3> = nn.iter().map(|&i| dst.points[i]).collect();
        let step = fit_rigid(&moved, &pairs)?;
        let candidate: Vec<Vec3> = moved.iter().map(|p| step.apply(p)).collect();
        let (d, nn2) = matches(&candidate);
        let new_rms = rms_of(&d);
        if new_rms > rms {
            break;
        }
        moved = candidate;
        nn = nn2;
        total = step.compose(&total);
        let change = rms - new_rms;
        rms = new_rms;
        history.push(rms);
        if change < cfg.tol {
            break;
        }
    }
    Ok(IcpResult {
        transform: total,
        rms,
        rms_history: history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub fscore: Vec<f64>,
    pub best_eps: f64,
    pub best_fscore: f64,
    pub icp_rms: Option<f64>,
}

impl PrCurve {
    /// `epsilon_m,precision,recall,fscore` with the F-score on a 0-100 scale.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon_m,precision,recall,fscore\n");
        for i in 0..self.thresholds.len() {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.2}",
                self.thresholds[i],
                self.precision[i],
                self.recall[i],
                100.0 * self.fscore[i]
            );
        }
        s
    }
}

impl PrCurve {
    /// Precision, recall and F against the threshold, with a dashed marker
    /// at the best threshold.
    pub fn plot(&self) -> crate::plot::Plot {
        use crate::plot::{Plot, BLACK, BLUE, GREEN, ORANGE};
        let mut p = Plot::new(640, 400)
            .line(&self.thresholds, &self.precision, BLUE)
            .line(&self.thresholds, &self.recall, ORANGE)
            .line(&self.thresholds, &self.fscore, GREEN)
            .marker(self.best_eps, BLACK);
        p.y_range = Some((0.0, 1.0));
        p
    }
}

/// Parses `start:stop:step` (inclusive of `stop` up to rounding) or a
/// comma-separated list.
pub fn parse_eps_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::parse("threshold grid", format!("`{spec}`: {m}"));
    let grid: Vec<f64> = if spec.contains(':') {
        let f: Vec<f64> = spec
            .split(':')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("not a number")))
            .collect::<Result<_>>()?;
        if f.len() != 3 || !(f[2] > 0.0) || f[1] < f[0] {
            return Err(bad("expected start:stop:step with step > 0"));
        }
        let n = ((f[1] - f[0]) / f[2] + 1e-9).floor() as usize + 1;
        (0..n).map(|k| f[0] + k as f64 * f[2]).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("not a number")))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() || grid.iter().any(|e| !(*e >= 0.0)) {
        return Err(bad("thresholds must be >= 0"));
    }
    Ok(grid)
}

/// Optionally aligns `sc` onto `gt`, then scores every threshold. The best
/// threshold is the smallest one reaching the maximum F-score.
pub fn pr_sweep(sc: &PointCloud, gt: &PointCloud, grid: &[f64], icp: Option<&IcpConfig>) -> Result<PrCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty threshold grid".into()));
    }
    let (aligned, rms) = match icp {
        Some(cfg) => {
            let r = icp_align(sc, gt, cfg)?;
            (sc.transformed(&r.transform), Some(r.rms))
        }
        None => (sc.clone(), None),
    };
    let d_sc = nearest_distances(&aligned, gt);
    let d_gt = nearest_distances(gt, &aligned);
    let mut curve = PrCurve {
        thresholds: grid.to_vec(),
        precision: Vec::new(),
        recall: Vec::new(),
        fscore: Vec::new(),
        best_eps: grid[0],
        best_fscore: -1.0,
        icp_rms: rms,
    };
    for &eps in grid {
        let p = fraction_within(&d_sc, eps);
        let r = fraction_within(&d_gt, eps);
        let f = fscore(p, r);
        curve.precision.push(p);
        curve.recall.push(r);
        curve.fscore.push(f);
        if f > curve.best_fscore || (f == curve.best_fscore && eps < curve.best_eps) {
            curve.best_fscore = f;
            curve.best_eps = eps;
        }
    }
    Ok(curve)
}

/// Per-point RGB in `[0, 1]`.
pub type Colors = Vec<[f64; 3]>;

/// Writes ASCII PLY with double coordinates, plus either `band_k` float
/// spectra (wavelengths in a comment) or uchar colors.
pub fn write_ply(pc: &PointCloud, colors: Option<&Colors>, path: &Path) -> Result<()> {
    pc.validate()?;
    let mut s = String::from("ply\nformat ascii 1.0\n");
    if let Some(w) = &pc.wavelengths {
        let list: Vec<String> = w.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "comment wavelengths_nm {}", list.join(" "));
    }
    let _ = writeln!(s, "element vertex {}", pc.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let bands = match (colors, &pc.spectra) {
        (Some(_), _) => {
            s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
            0
        }
        (None, Some(sp)) => {
            for k in 0..sp[0].len() {
                let _ = writeln!(s, "property double band_{k}");
            }
            sp[0].len()
        }
        (None, None) => 0,
    };
    s.push_str("end_header\n");
    for (i, p) in pc.points.iter().enumerate() {
        let _ = write!(s, "{:?} {:?} {:?}", p.x, p.y, p.z);
        if let Some(c) = colors {
            for v in c[i] {
                let _ = write!(s, " {}", (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        } else if bands > 0 {
            for v in &pc.spectra.as_ref().unwrap()[i] {
                let _ = write!(s, " {v:?}");
            }
        }
        s.push('\n');
    }
    Error::ensure_parent(path)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads ASCII PLY written by [`write_ply`] or any tool emitting `x y z`
/// vertex properties. Extra numeric properties other than colors become
/// spectra; colors are returned separately.
pub fn read_ply(path: &Path) -> Result<(PointCloud, Option<Colors>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let err = |m: String| Error::parse(ctx.clone(), m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(err("missing `ply` magic".into()));
    }
    let mut n = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut wavelengths = None;
    loop {
        let line = lines.next().ok_or_else(|| err("header not terminated".into()))?.trim();
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["end_header"] => break,
            ["format", fmt, ..] if *fmt != "ascii" => return Err(err(format!("unsupported format `{fmt}`"))),
            ["comment", "wavelengths_nm", rest @ ..] => {
                wavelengths = Some(
                    rest.iter()
                        .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad wavelength `{v}`"))))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    n = Some(count.parse::<usize>().map_err(|_| err(format!("bad count `{count}`")))?);
                }
            }
            ["property", "list", ..] if in_vertex => return Err(err("list properties unsupported".into())),
            ["property", _ty, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let n = n.ok_or_else(|| err("no vertex element".into()))?;
    let pos = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(err("vertex lacks x/y/z".into())),
    };
    let color_idx = match (pos("red"), pos("green"), pos("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let spectral: Vec<usize> = (0..props.len())
        .filter(|i| ![ix, iy, iz].contains(i) && !color_idx.map_or(false, |c| c.contains(i)))
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut spectra = Vec::with_capacity(if spectral.is_empty() { 0 } else { n });
    let mut colors = Vec::new();
    for k in 0..n {
        let line = lines.next().ok_or_else(|| err(format!("expected {n} vertices, found {k}")))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad value `{s}` on vertex {k}"))))
            .collect::<Result<_>>()?;
        if v.len() != props.len() {
            return Err(err(format!("vertex {k} has {} values, expected {}", v.len(), props.len())));
        }
        points.push(Vec3::new(v[ix], v[iy], v[iz]));
        if !spectral.is_empty() {
            spectra.push(spectral.iter().map(|&i| v[i]).collect());
        }
        if let Some(c) = color_idx {
            colors.push(c.map(|i| v[i] / 255.0));
        }
    }
    let pc = PointCloud {
        points,
        spectra: (!spectral.is_empty()).then_some(spectra),
        wavelengths: if spectral.is_empty() { None } else { wavelengths },
    };
    pc.validate()?;
    Ok((pc, color_idx.map(|_| colors)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64, scale: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.2..0.3)) * scale)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn grid_matches_brute_force_exactly() {
        for seed in 0..4 {
            let a = random_cloud(700, seed, 0.1);
            let b = random_cloud(1300, seed + 100, 0.12);
            assert_eq!(nearest_distances(&a, &b), brute_force_distances(&a, &b));
            assert_eq!(nearest_distances(&b, &a), brute_force_distances(&b, &a));
        }
        // queries far outside the indexed box
        let far = PointCloud::new(vec![Vec3::new(5.0, -3.0, 2.0), Vec3::new(-0.05, 9.0, 0.0)]).unwrap();
        let b = random_cloud(500, 9, 0.1);
        assert_eq!(nearest_distances(&far, &b), brute_force_distances(&far, &b));
    }

    #[test]
    fn distance_cases() {
        let a = random_cloud(50, 1, 1.0);
        assert!(nearest_distances(&a, &a).iter().all(|d| *d == 0.0));
        let p = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let q = PointCloud::new(vec![Vec3::new(0.0, 3.0, 0.0)]).unwrap();
        assert_eq!(nearest_distances(&p, &q), vec![3.0]);
    }

    #[test]
    fn pr_cases() {
        let a = random_cloud(200, 2, 0.1);
        for eps in [0.0, 0.001, 0.5] {
            let s = precision_recall(&a, &a, eps).unwrap();
            assert_eq!((s.precision, s.recall, s.fscore), (1.0, 1.0, 1.0));
        }
        let o = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let g = PointCloud::new(vec![Vec3::new(0.0, 0.0, 0.003)]).unwrap();
        let s = precision_recall(&o, &g, 0.002).unwrap();
        assert_eq!((s.precision, s.recall, s.fscore), (0.0, 0.0, 0.0));
        let b = random_cloud(150, 3, 0.1);
        let ab = precision_recall(&a, &b, 0.01).unwrap();
        let ba = precision_recall(&b, &a, 0.01).unwrap();
        assert_eq!(ab.precision, ba.recall);
    }

    #[test]
    fn icp_recovers_known_transform() {
        let src = random_cloud(800, 4, 0.1);
        let truth = RigidTransform {
            rotation: axis_angle(&Vec3::z(), 8f64.to_radians()),
            translation: Vec3::new(0.01, -0.02, 0.015),
        };
        let dst = src.transformed(&truth);
        let r = icp_align(&src, &dst, &IcpConfig::default()).unwrap();
        let rot_err = crate::geometry::rotation_angle_between(&r.transform.rotation, &truth.rotation);
        assert!(rot_err < 1e-6, "rotation error {rot_err}");
        assert!((r.transform.translation - truth.translation).norm() < 1e-6);
        assert!(r.rms < 1e-6);
        assert!(r.rms_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn icp_identity_and_degenerate() {
        let a = random_cloud(100, 5, 0.1);
        let r = icp_align(&a, &a, &IcpConfig::default()).unwrap();
        assert_eq!(r.rms, 0.0);
        assert!((r.transform.rotation - Mat3::identity()).norm() < 1e-12);
        let two = PointCloud::new(vec![Vec3::zeros(), Vec3::x()]).unwrap();
        assert!(matches!(icp_align(&two, &a, &IcpConfig::default()), Err(Error::Degenerate(_))));
        let line = PointCloud::new((0..10).map(|i| Vec3::x() * i as f64).collect()).unwrap();
        assert!(icp_align(&line, &a, &IcpConfig::default()).is_err());
    }

    #[test]
    fn sweep_grid_and_ties() {
        let grid = parse_eps_grid("0.001:0.01:0.001").unwrap();
        assert_eq!(grid.len(), 10);
        let a = random_cloud(100, 6, 0.1);
        let c = pr_sweep(&a, &a, &grid, None).unwrap();
        assert!(c.fscore.iter().all(|f| *f == 1.0));
        assert_eq!(c.best_eps, 0.001);
        assert_eq!(c.to_csv().lines().count(), 11);
        assert_eq!(parse_eps_grid("0.002, 0.004").unwrap(), vec![0.002, 0.004]);
        assert!(parse_eps_grid("0.01:0.001:0.001").is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = random_cloud(40, 7, 0.1);
        let spectra: Vec<Vec<f64>> = (0..40).map(|i| vec![0.1 * i as f64 / 3.0, 0.7, 1.0 / 7.0]).collect();
        let pc = PointCloud::with_spectra(a.points.clone(), spectra, Some(vec![450.5, 600.0, 801.25])).unwrap();
        let path = dir.path().join("a.ply");
        write_ply(&pc, None, &path).unwrap();
        let (back, colors) = read_ply(&path).unwrap();
        assert_eq!(back, pc);
        assert!(colors.is_none());
        let cols: Colors = (0..40).map(|_| [0.5, 0.0, 1.0]).collect();
        write_ply(&pc, Some(&cols), &path).unwrap();
        let (back, colors) = read_ply(&path).unwrap();
        assert_eq!(back.points, pc.points);
        assert_eq!(colors.unwrap()[0], [128.0 / 255.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn precision_recall_monotone(seed in 0u64..1000) {
            let a = random_cloud(60, seed, 0.1);
            let b = random_cloud(80, seed + 1, 0.1);
            let grid: Vec<f64> = (0..12).map(|k| k as f64 * 0.005).collect();
            let c = pr_sweep(&a, &b, &grid, None).unwrap();
            for w in 0..grid.len() - 1 {
                prop_assert!(c.precision[w] <= c.precision[w + 1]);
                prop_assert!(c.recall[w] <= c.recall[w + 1]);
            }
            let s = precision_recall(&a, &b, 10.0).unwrap();
            prop_assert_eq!((s.precision, s.recall), (1.0, 1.0));
        }
    }
}
