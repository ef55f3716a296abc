//! Point clouds from a trained field: density sampled on a regular grid,
//! thresholded, with per-point spectra probed from the radiance branch.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::geometry::{Aabb, Vec3};
use crate::hypercube::{nearest_band_index, BandTriplet};
use crate::render::FieldFrame;
use crate::spatial::{Colors, GridIndex, PointCloud};
use crate::train::TrainState;

/// Viewing directions used when querying per-point radiance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProbePolicy {
    /// Mean over the six axis directions.
    SixAxis,
    Single(Vec3),
}

impl ProbePolicy {
    fn directions(&self) -> Result<Vec<Vec3>> {
        match self {
            ProbePolicy::SixAxis => Ok(vec![
                Vec3::x(),
                -Vec3::x(),
                Vec3::y(),
                -Vec3::y(),
                Vec3::z(),
                -Vec3::z(),
            ]),
            ProbePolicy::Single(d) => {
                let n = d.norm();
                if !(n > 0.0) || !n.is_finite() {
                    return Err(Error::InvalidArgument("probe direction must be nonzero".into()));
                }
                Ok(vec![d / n])
            }
        }
    }
}

/// Which grid locations become points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractMode {
    /// Every voxel center at or above the threshold.
    Voxel,
    /// Voxel centers at or above the threshold with a face neighbour below it.
    Shell,
    /// Threshold crossings linearly interpolated along grid edges.
    Crossing,
}

impl FromStr for ExtractMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voxel" => Ok(ExtractMode::Voxel),
            "shell" => Ok(ExtractMode::Shell),
            "crossing" => Ok(ExtractMode::Crossing),
            _ => Err(Error::parse("extraction mode", format!("`{s}` (voxel|shell|crossing)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub resolution: usize,
    /// Density threshold in field units.
    pub sigma_min: f64,
    pub probe: ProbePolicy,
    pub mode: ExtractMode,
    /// Region to sample (m); the scene bounds when absent.
    pub bounds: Option<Aabb>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            resolution: 128,
            sigma_min: 5.0,
            probe: ProbePolicy::SixAxis,
            mode: ExtractMode::Voxel,
            bounds: None,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be >= 2, got {}",
                self.resolution
            )));
        }
        if !(self.sigma_min > 0.0) || !self.sigma_min.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "density threshold must be positive, got {}",
                self.sigma_min
            )));
        }
        self.probe.directions().map(|_| ())
    }
}

/// Densities at the voxel centers of a cubic lattice, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub bounds: Aabb,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let step = (self.bounds.max - self.bounds.min) / self.resolution as f64;
        self.bounds.min + Vec3::new(
            (i as f64 + 0.5) * step.x,
            (j as f64 + 0.5) * step.y,
            (k as f64 + 0.5) * step.z,
        )
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Text histogram over `bins` log-spaced buckets plus one for zero.
    pub fn histogram(&self, bins: usize) -> String {
        let max = self.max().max(1e-12);
        let lo = (max * 1e-6).ln();
        let hi = max.ln();
        let mut counts = vec![0usize; bins];
        let mut tiny = 0usize;
        for &v in &self.values {
            if v <= max * 1e-6 {
                tiny += 1;
            } else {
                let b = (((v.ln() - lo) / (hi - lo)) * bins as f64) as usize;
                counts[b.min(bins - 1)] += 1;
            }
        }
        let mut s = format!("density histogram ({} voxels, max {max:.4e})\n", self.values.len());
        let _ = writeln!(s, "  [0, {:.3e}): {tiny}", max * 1e-6);
        for (b, c) in counts.iter().enumerate() {
            let a = (lo + (hi - lo) * b as f64 / bins as f64).exp();
            let z = (lo + (hi - lo) * (b + 1) as f64 / bins as f64).exp();
            let _ = writeln!(s, "  [{a:.3e}, {z:.3e}): {c}");
        }
        s
    }
}

/// Evaluates the field density at every voxel center of `bounds`.
pub fn density_grid(field: &RadianceField, frame: &FieldFrame, bounds: &Aabb, resolution: usize) -> DensityGrid {
    let mut grid = DensityGrid {
        bounds: *bounds,
        resolution,
        values: Vec::new(),
    };
    let r = resolution;
    let slabs: Vec<Vec<f64>> = (0..r)
        .into_par_iter()
        .map(|k| {
            let mut pts = Array2::zeros((r * r, 3));
            for j in 0..r {
                for i in 0..r {
                    let p = frame.to_field(&grid.center(i, j, k));
                    let row = j * r + i;
                    for a in 0..3 {
                        pts[[row, a]] = p[a];
                    }
                }
            }
            field.density_batch(&pts.view()).to_vec()
        })
        .collect();
    grid.values = slabs.concat();
    grid
}

/// Point locations (m) selected from a density grid.
pub fn grid_points(grid: &DensityGrid, sigma_min: f64, mode: ExtractMode) -> Vec<Vec3> {
    let r = grid.resolution;
    let inside = |i: usize, j: usize, k: usize| grid.values[grid.index(i, j, k)] >= sigma_min;
    let mut out = Vec::new();
    for k in 0..r {
        for j in 0..r {
            for i in 0..r {
                match mode {
                    ExtractMode::Voxel => {
                        if inside(i, j, k) {
                            out.push(grid.center(i, j, k));
                        }
                    }
                    ExtractMode::Shell => {
                        if !inside(i, j, k) {
                            continue;
                        }
                        let border = i == 0 || j == 0 || k == 0 || i == r - 1 || j == r - 1 || k == r - 1;
                        let open = border
                            || !inside(i - 1, j, k)
                            || !inside(i + 1, j, k)
                            || !inside(i, j - 1, k)
                            || !inside(i, j + 1, k)
                            || !inside(i, j, k - 1)
                            || !inside(i, j, k + 1);
                        if open {
                            out.push(grid.center(i, j, k));
                        }
                    }
                    ExtractMode::Crossing => {
                        let a = grid.values[grid.index(i, j, k)];
                        let next = [
                            (i + 1 < r).then(|| (i + 1, j, k)),
                            (j + 1 < r).then(|| (i, j + 1, k)),
                            (k + 1 < r).then(|| (i, j, k + 1)),
                        ];
                        for (ni, nj, nk) in next.into_iter().flatten() {
                            let b = grid.values[grid.index(ni, nj, nk)];
                            if (a >= sigma_min) != (b >= sigma_min) {
                                let f = ((sigma_min - a) / (b - a)).clamp(0.0, 1.0);
                                let pa = grid.center(i, j, k);
                                let pb = grid.center(ni, nj, nk);
                                out.push(pa + f * (pb - pa));
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Radiance at each world point, averaged over the probe directions.
pub fn probe_spectra(
    field: &RadianceField,
    frame: &FieldFrame,
    points: &[Vec3],
    probe: &ProbePolicy,
) -> Result<Vec<Vec<f64>>> {
    let dirs = probe.directions()?;
    let l = field.config().n_channels;
    let chunks: Vec<Result<Vec<Vec<f64>>>> = points
        .par_chunks(2048)
        .map(|chunk| {
            let n = chunk.len();
            let mut acc = vec![vec![0.0; l]; n];
            let mut pts = Array2::zeros((n, 3));
            for (r, p) in chunk.iter().enumerate() {
                let q = frame.to_field(p);
                for a in 0..3 {
                    pts[[r, a]] = q[a];
                }
            }
            for d in &dirs {
                let mut dm = Array2::zeros((n, 3));
                for r in 0..n {
                    for a in 0..3 {
                        dm[[r, a]] = d[a];
                    }
                }
                let (out, _) = field.forward(&pts.view(), &dm.view(), 0)?;
                for (r, row) in acc.iter_mut().enumerate() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v += out.radiance[[r, c]] / dirs.len() as f64;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut all = Vec::with_capacity(points.len());
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

/// Extracts a spectral point cloud (m) from a trained state.
pub fn extract_pointcloud(state: &TrainState, cfg: &ExtractConfig) -> Result<PointCloud> {
    cfg.validate()?;
    let bounds = cfg.bounds.unwrap_or(state.bounds);
    let grid = density_grid(&state.field, &state.frame, &bounds, cfg.resolution);
    let points = grid_points(&grid, cfg.sigma_min, cfg.mode);
    if points.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "no voxel reaches density {} (max {:.4e})\n{}",
            cfg.sigma_min,
            grid.max(),
            grid.histogram(12)
        )));
    }
    let spectra = probe_spectra(&state.field, &state.frame, &points, &cfg.probe)?;
    PointCloud::with_spectra(points, spectra, Some(state.wavelengths.clone()))
}

/// Statistical outlier removal: drops points whose mean distance to their
/// `k` nearest neighbours exceeds the cloud mean by `std_ratio` deviations.
pub fn refine_pointcloud(pc: &PointCloud, k: usize, std_ratio: f64) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if pc.len() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "cloud of {} points is too small for k = {k}",
            pc.len()
        )));
    }
    if !(std_ratio >= 0.0) {
        return Err(Error::InvalidArgument(format!("std ratio must be >= 0, got {std_ratio}")));
    }
    let index = GridIndex::new(&pc.points);
    let stat: Vec<f64> = pc
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn = index.k_nearest(p, k + 1);
            let mut sum = 0.0;
            let mut used = 0;
            let mut skipped = false;
            for (d, j) in nn {
                if j == i && !skipped {
                    skipped = true;
                    continue;
                }
                if used < k {
                    sum += d;
                    used += 1;
                }
            }
            sum / k as f64
        })
        .collect();
    let n = stat.len() as f64;
    let mean = stat.iter().sum::<f64>() / n;
    let sd = (stat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mean + std_ratio * sd;
    // relative slack so a constant statistic never drops points to rounding
    let keep: Vec<usize> = (0..pc.len())
        .filter(|&i| stat[i] <= limit + 1e-12 * limit.abs())
        .collect();
    Ok(pc.select(&keep))
}

/// Per-point RGB from the reflectances nearest the triplet wavelengths.
pub fn color_by_triplet(pc: &PointCloud, triplet: &BandTriplet, wavelengths: &[f64]) -> Result<Colors> {
    let spectra = pc
        .spectra
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("point cloud has no spectra".into()))?;
    if wavelengths.len() != spectra[0].len() {
        return Err(Error::ShapeMismatch(format!(
            "{} wavelengths for {}-band spectra",
            wavelengths.len(),
            spectra[0].len()
        )));
    }
    let idx = [
        nearest_band_index(wavelengths, triplet.r_nm)?,
        nearest_band_index(wavelengths, triplet.g_nm)?,
        nearest_band_index(wavelengths, triplet.b_nm)?,
    ];
    Ok(spectra.iter().map(|s| idx.map(|b| s[b].clamp(0.0, 1.0))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;

    fn sphere_grid(res: usize, radius: f64) -> DensityGrid {
        let bounds = Aabb::cube(Vec3::zeros(), 1.0);
        let mut g = DensityGrid {
            bounds,
            resolution: res,
            values: vec![0.0; res * res * res],
        };
        for k in 0..res {
            for j in 0..res {
                for i in 0..res {
                    let idx = g.index(i, j, k);
                    // linear ramp: density 10 at the surface, 20 per unit inward
                    g.values[idx] = (10.0 + 20.0 * (radius - g.center(i, j, k).norm())).max(0.0);
                }
            }
        }
        g
    }

    #[test]
    fn crossing_points_lie_on_level_set() {
        let g = sphere_grid(32, 0.6);
        let pts = grid_points(&g, 10.0, ExtractMode::Crossing);
        assert!(!pts.is_empty());
        let h = 2.0 / 32.0;
        for p in &pts {
            assert!((p.norm() - 0.6).abs() < 0.1 * h, "{}", p.norm());
        }
    }

    #[test]
    fn voxel_and_shell_modes() {
        let g = sphere_grid(32, 0.6);
        let vox = grid_points(&g, 10.0, ExtractMode::Voxel);
        let shell = grid_points(&g, 10.0, ExtractMode::Shell);
        assert!(shell.len() < vox.len());
        assert!(vox.iter().all(|p| p.norm() <= 0.6));
        let h = 2.0 / 32.0;
        assert!(shell.iter().all(|p| p.norm() > 0.6 - 3f64.sqrt() * h));
        // volumetric scaling
        let fine = grid_points(&sphere_grid(64, 0.6), 10.0, ExtractMode::Voxel);
        let ratio = fine.len() as f64 / vox.len() as f64;
        assert!((4.0..12.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn empty_result_reports_histogram() {
        let field = RadianceField::new(
            FieldConfig {
                trunk_layers: 2,
                trunk_width: 16,
                ..FieldConfig::new(3)
            },
            1,
        )
        .unwrap();
        let aabb = Aabb::cube(Vec3::zeros(), 0.1);
        let frame = FieldFrame::from_aabb(&aabb);
        let grid = density_grid(&field, &frame, &aabb, 8);
        assert!(grid.values.iter().all(|v| *v >= 0.0));
        let pts = grid_points(&grid, grid.max() * 2.0, ExtractMode::Voxel);
        assert!(pts.is_empty());
        assert!(grid.histogram(4).contains("density histogram"));
    }

    #[test]
    fn outlier_removal() {
        let mut pts = Vec::new();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    pts.push(Vec3::new(i as f64, j as f64, k as f64) * 0.01);
                }
            }
        }
        let grid = PointCloud::new(pts.clone()).unwrap();
        // evenly spaced ring: every point has the same neighbourhood
        let ring = PointCloud::new(
            (0..400)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::TAU / 400.0;
                    Vec3::new(a.cos(), a.sin(), 0.0)
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(refine_pointcloud(&ring, 16, 2.0).unwrap().len(), 400);
        pts.push(Vec3::new(1.0, 1.0, 1.0));
        let noisy = PointCloud::new(pts).unwrap();
        let kept = refine_pointcloud(&noisy, 16, 2.0).unwrap();
        assert_eq!(kept.points, grid.points);
        let tiny = PointCloud::new(vec![Vec3::zeros(); 5]).unwrap();
        assert!(refine_pointcloud(&tiny, 16, 2.0).is_err());
    }

    #[test]
    fn triplet_colors() {
        let pts = vec![Vec3::zeros(), Vec3::x()];
        let wl = vec![450.0, 550.0, 650.0];
        let gray = PointCloud::with_spectra(pts.clone(), vec![vec![0.5; 3]; 2], Some(wl.clone())).unwrap();
        let c = color_by_triplet(&gray, &BandTriplet::VISIBLE, &wl).unwrap();
        assert!(c.iter().all(|rgb| *rgb == [0.5, 0.5, 0.5]));
        let ramp = PointCloud::with_spectra(pts, vec![vec![0.1, 0.4, 1.7]; 2], Some(wl.clone())).unwrap();
        let c = color_by_triplet(&ramp, &BandTriplet::new(550.0, 550.0, 550.0), &wl).unwrap();
        assert!(c.iter().all(|rgb| rgb[0] == rgb[1] && rgb[1] == rgb[2]));
        let c = color_by_triplet(&ramp, &BandTriplet::VISIBLE, &wl).unwrap();
        assert_eq!(c[0], [1.0, 0.4, 0.1]);
        assert!(color_by_triplet(&ramp, &BandTriplet::new(900.0, 550.0, 450.0), &wl).is_err());
    }
}
