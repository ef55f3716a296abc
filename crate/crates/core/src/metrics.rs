//! Spectral fidelity metrics on rendered views: spectral angle, spectral
//! RMSE, per-band global-statistics SSIM and PSNR, and held-out evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::hypercube::{self, BandTriplet, HyperCube, Mask};
use crate::render::{self, RenderConfig};
use crate::train::TrainState;

pub const SAM_DELTA: f64 = 1e-8;
pub const PSNR_DELTA: f64 = 1e-10;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn region(pred: &HyperCube, gt: &HyperCube, mask: Option<&Mask>) -> Result<Vec<usize>> {
    if !pred.same_shape(gt) {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{}x{} vs ground truth {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.bands(),
            gt.height(),
            gt.width(),
            gt.bands()
        )));
    }
    let idx = match mask {
        Some(m) => {
            gt.check_mask(m)?;
            m.indices()
        }
        None => (0..gt.height() * gt.width()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::EmptyRegion("evaluation region is empty".into()));
    }
    Ok(idx)
}

/// Mean spectral angle (radians) over the region.
pub fn sam(pred: &HyperCube, gt: &HyperCube, mask: Option<&Mask>, delta: f64) -> Result<f64> {
    let idx = region(pred, gt, mask)?;
    let mut total = 0.0;
    for &p in &idx {
        let (a, b) = (pred.pixel_at(p), gt.pixel_at(p));
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            let (x, y) = (*x as f64, *y as f64);
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        total += (dot / (na.sqrt() * nb.sqrt() + delta)).clamp(-1.0, 1.0).acos();
    }
    Ok(total / idx.len() as f64)
}

/// Root of the pixel- and band-averaged squared error.
pub fn spectral_rmse(pred: &HyperCube, gt: &HyperCube, mask: Option<&Mask>) -> Result<f64> {
    let idx = region(pred, gt, mask)?;
    let l = gt.bands() as f64;
    let mut total = 0.0;
    for &p in &idx {
        let se: f64 = pred
            .pixel_at(p)
            .iter()
            .zip(gt.pixel_at(p))
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        total += se / l;
    }
    Ok((total / idx.len() as f64).sqrt())
}

/// SSIM of one band with means, variances and covariance taken over the
/// whole region.
pub fn ssim_global(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

fn band_values(cube: &HyperCube, idx: &[usize], band: usize) -> Vec<f64> {
    idx.iter().map(|&p| cube.pixel_at(p)[band] as f64).collect()
}

/// Band-averaged global-statistics SSIM.
pub fn hsi_ssim(pred: &HyperCube, gt: &HyperCube, mask: Option<&Mask>) -> Result<f64> {
    let idx = region(pred, gt, mask)?;
    let total: f64 = (0..gt.bands())
        .map(|b| ssim_global(&band_values(pred, &idx, b), &band_values(gt, &idx, b)))
        .sum();
    Ok(total / gt.bands() as f64)
}

/// Band-averaged `10 log10(1 / (MSE_b + delta))` for unit peak value.
pub fn hsi_psnr(pred: &HyperCube, gt: &HyperCube, mask: Option<&Mask>, delta: f64) -> Result<f64> {
    let idx = region(pred, gt, mask)?;
    let n = idx.len() as f64;
    let total: f64 = (0..gt.bands())
        .map(|b| {
            let mse = idx
                .iter()
                .map(|&p| (pred.pixel_at(p)[b] as f64 - gt.pixel_at(p)[b] as f64).powi(2))
                .sum::<f64>()
                / n;
            10.0 * (1.0 / (mse + delta)).log10()
        })
        .sum();
    Ok(total / gt.bands() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub sam_rad: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr_db: f64,
}

pub fn view_metrics(pred: &HyperCube, gt: &HyperCube, mask: Option<&Mask>) -> Result<ViewMetrics> {
    Ok(ViewMetrics {
        sam_rad: sam(pred, gt, mask, SAM_DELTA)?,
        rmse: spectral_rmse(pred, gt, mask)?,
        ssim: hsi_ssim(pred, gt, mask)?,
        psnr_db: hsi_psnr(pred, gt, mask, PSNR_DELTA)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (zero for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralMetrics {
    pub sam_rad: MeanSd,
    pub rmse: MeanSd,
    pub ssim: MeanSd,
    pub psnr_db: MeanSd,
    pub n_views: usize,
    pub rays_per_view: usize,
}

impl SpectralMetrics {
    pub fn aggregate(views: &[ViewMetrics], rays_per_view: usize) -> Self {
        let pick = |f: fn(&ViewMetrics) -> f64| MeanSd::of(&views.iter().map(f).collect::<Vec<_>>());
        SpectralMetrics {
            sam_rad: pick(|v| v.sam_rad),
            rmse: pick(|v| v.rmse),
            ssim: pick(|v| v.ssim),
            psnr_db: pick(|v| v.psnr_db),
            n_views: views.len(),
            rays_per_view,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskPolicy {
    FullFrame,
    Foreground,
}

impl std::str::FromStr for MaskPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-frame" | "full" => Ok(MaskPolicy::FullFrame),
            "foreground" | "fg" => Ok(MaskPolicy::Foreground),
            _ => Err(Error::InvalidArgument(format!("unknown mask policy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeldoutReport {
    pub dataset: String,
    pub view_ids: Vec<usize>,
    pub views: Vec<ViewMetrics>,
    pub summary: SpectralMetrics,
    pub renders: Vec<HyperCube>,
}

impl HeldoutReport {
    /// `dataset,view_id,sam_rad,rmse,ssim,psnr_db`, one row per view plus
    /// `mean` and `sd` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,view_id,sam_rad,rmse,ssim,psnr_db\n");
        for (id, m) in self.view_ids.iter().zip(&self.views) {
            let _ = writeln!(
                s,
                "{},{id},{:.6},{:.6},{:.6},{:.4}",
                self.dataset, m.sam_rad, m.rmse, m.ssim, m.psnr_db
            );
        }
        let a = &self.summary;
        let _ = writeln!(
            s,
            "{},mean,{:.6},{:.6},{:.6},{:.4}",
            self.dataset, a.sam_rad.mean, a.rmse.mean, a.ssim.mean, a.psnr_db.mean
        );
        let _ = writeln!(
            s,
            "{},sd,{:.6},{:.6},{:.6},{:.4}",
            self.dataset, a.sam_rad.sd, a.rmse.sd, a.ssim.sd, a.psnr_db.sd
        );
        s
    }
}

/// Renders every held-out view with jitter off and scores it against the
/// ground truth.
pub fn evaluate_heldout(
    state: &TrainState,
    data: &Dataset,
    policy: MaskPolicy,
    render_cfg: &RenderConfig,
    dataset_name: &str,
) -> Result<HeldoutReport> {
    if data.split.eval.is_empty() {
        return Err(Error::InvalidArgument("dataset has no held-out views".into()));
    }
    if state.wavelengths != data.wavelengths() {
        return Err(Error::ShapeMismatch("checkpoint and dataset wavelengths differ".into()));
    }
    let cfg = RenderConfig {
        jitter: false,
        ..render_cfg.clone()
    };
    let mut views = Vec::new();
    let mut renders = Vec::new();
    for &v in &data.split.eval {
        let out = render::render_view(
            &state.field,
            &state.frame,
            &state.bounds,
            &data.camera,
            &data.poses[v],
            &state.wavelengths,
            &cfg,
            0,
        )?;
        let mask = match policy {
            MaskPolicy::FullFrame => None,
            MaskPolicy::Foreground => Some(data.masks[v].as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("held-out view {v} has no mask"))
            })?),
        };
        views.push(view_metrics(&out.cube, &data.cubes[v], mask)?);
        renders.push(out.cube);
    }
    let summary = SpectralMetrics::aggregate(&views, data.camera.pixel_count());
    Ok(HeldoutReport {
        dataset: dataset_name.to_string(),
        view_ids: data.split.eval.clone(),
        views,
        summary,
        renders,
    })
}

/// Writes `metrics.csv` and a ground-truth | prediction composite per view.
pub fn write_heldout(report: &HeldoutReport, data: &Dataset, triplet: &BandTriplet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    for (id, pred) in report.view_ids.iter().zip(&report.renders) {
        let gt = data.cubes[*id].composite(triplet)?;
        let pr = pred.composite(triplet)?;
        let both = concatenate(Axis(1), &[gt.view(), pr.view()])
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        hypercube::write_rgb_png(&both, &dir.join(format!("compare_{}", dataset::view_name(*id, "png"))))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::CubeKind;
    use approx::assert_relative_eq;

    fn cube(h: usize, w: usize, wl: usize, f: impl Fn(usize, usize, usize) -> f32) -> HyperCube {
        HyperCube::from_fn(h, w, (0..wl).map(|b| 400.0 + 10.0 * b as f64).collect(), CubeKind::Calibrated, f)
            .unwrap()
    }

    #[test]
    fn identical_cubes_hit_ideal_values() {
        let a = cube(5, 4, 6, |r, c, b| 0.1 + 0.05 * ((r * 3 + c * 7 + b) % 11) as f32);
        let m = view_metrics(&a, &a, None).unwrap();
        assert!(m.sam_rad < 1e-3);
        assert_eq!(m.rmse, 0.0);
        assert_relative_eq!(m.ssim, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.psnr_db, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn sam_cases() {
        let a = cube(1, 1, 2, |_, _, b| if b == 0 { 1.0 } else { 0.0 });
        let b = cube(1, 1, 2, |_, _, b| if b == 1 { 1.0 } else { 0.0 });
        assert_relative_eq!(sam(&a, &b, None, SAM_DELTA).unwrap(), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        let g = cube(3, 3, 4, |r, c, b| 0.2 + 0.1 * ((r + 2 * c + b) % 5) as f32);
        let p = cube(3, 3, 4, |r, c, b| 0.25 + 0.08 * ((r + c + 2 * b) % 5) as f32);
        let p3 = HyperCube::from_fn(3, 3, p.wavelengths().to_vec(), CubeKind::Raw, |r, c, b| {
            3.0 * (0.25 + 0.08 * ((r + c + 2 * b) % 5) as f32)
        })
        .unwrap();
        let (s1, s3) = (sam(&p, &g, None, SAM_DELTA).unwrap(), sam(&p3, &g, None, SAM_DELTA).unwrap());
        assert!((s1 - s3).abs() < 1e-6);
    }

    #[test]
    fn rmse_cases() {
        let g = cube(2, 2, 3, |_, _, _| 0.4);
        let p = cube(2, 2, 3, |_, _, _| 0.5);
        assert_relative_eq!(spectral_rmse(&p, &g, None).unwrap(), 0.1, epsilon = 1e-7);
        let g = cube(1, 1, 2, |_, _, _| 0.0);
        let p = cube(1, 1, 2, |_, _, b| if b == 0 { 0.3 } else { 0.4 });
        assert_relative_eq!(spectral_rmse(&p, &g, None).unwrap(), 0.125f64.sqrt(), epsilon = 1e-7);
    }

    #[test]
    fn psnr_cases() {
        let g = cube(3, 3, 4, |r, c, b| 0.2 + 0.05 * (r + c + b) as f32);
        let p = cube(3, 3, 4, |r, c, b| 0.2 + 0.05 * (r + c + b) as f32 + 0.1);
        assert!((hsi_psnr(&p, &g, None, PSNR_DELTA).unwrap() - 20.0).abs() < 0.01);
        let p2 = cube(3, 3, 4, |r, c, b| 0.2 + 0.05 * (r + c + b) as f32 + 0.05);
        let gain = hsi_psnr(&p2, &g, None, PSNR_DELTA).unwrap() - hsi_psnr(&p, &g, None, PSNR_DELTA).unwrap();
        assert!((gain - 6.0206).abs() < 0.01);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let g = cube(4, 4, 2, |r, c, _| if (r + c) % 2 == 0 { 0.0 } else { 0.5 });
        let p = cube(4, 4, 2, |r, c, _| if (r + c) % 2 == 0 { 0.5 } else { 1.0 });
        // mu_g = 0.25, mu_p = 0.75, both variances and the covariance are 1/16
        let expected = ((2.0 * 0.25 * 0.75 + SSIM_C1) * (2.0 / 16.0 + SSIM_C2))
            / ((0.0625 + 0.5625 + SSIM_C1) * (2.0 / 16.0 + SSIM_C2));
        assert_relative_eq!(hsi_ssim(&p, &g, None).unwrap(), expected, epsilon = 1e-7);
        assert!(expected < 1.0);
    }

    #[test]
    fn empty_mask_is_error() {
        let a = cube(2, 2, 2, |_, _, _| 0.5);
        assert!(sam(&a, &a, Some(&Mask::empty(2, 2)), SAM_DELTA).is_err());
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_relative_eq!(m.sd, 2f64.sqrt());
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }
}
