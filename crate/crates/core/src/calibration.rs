//! White-reference calibration with an automatically refined reference mask.
//!
//! Pipeline: preliminary mean over a coarse ROI, per-pixel relative deviation
//! map, percentile threshold, 3x3 closing then opening, largest 8-connected
//! component, refined mean, spectral smoothing, band-wise division and
//! clipping to `[0, 1]`.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{CubeKind, HyperCube, Mask};

pub const DEFAULT_PERCENTILE: f64 = 70.0;
pub const DEFAULT_SMOOTHING_WINDOW: usize = 5;

/// Relative deviation of each ROI pixel from the preliminary mean spectrum.
/// Pixels outside the ROI carry no value.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationMap {
    roi: Mask,
    values: Vec<f64>,
}

impl DeviationMap {
    pub fn roi(&self) -> &Mask {
        &self.roi
    }

    pub fn height(&self) -> usize {
        self.roi.height()
    }

    pub fn width(&self) -> usize {
        self.roi.width()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.roi
            .get(row, col)
            .then(|| self.values[row * self.roi.width() + col])
    }

    /// Deviations of ROI pixels in raster order.
    pub fn roi_values(&self) -> Vec<f64> {
        self.roi
            .values()
            .iter()
            .zip(&self.values)
            .filter_map(|(m, v)| m.then_some(*v))
            .collect()
    }

    /// Deviations of the pixels selected by `mask` (must lie inside the ROI).
    pub fn values_in(&self, mask: &Mask) -> Vec<f64> {
        mask.values()
            .iter()
            .zip(self.roi.values())
            .zip(&self.values)
            .filter_map(|((m, r), v)| (*m && *r).then_some(*v))
            .collect()
    }
}

/// Mean reference spectrum over the coarse ROI followed by
/// `D = mean_b |I_b - mu_b| / mu_b` for every ROI pixel.
pub fn deviation_map(wr_cube: &HyperCube, coarse_roi: &Mask) -> Result<DeviationMap> {
    let mu = wr_mean(wr_cube, coarse_roi)?;
    if let Some((b, m)) = mu.iter().enumerate().find(|(_, m)| !(**m > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "preliminary reference mean is {m} in band {b}"
        )));
    }
    let l = mu.len() as f64;
    let mut values = vec![0.0; coarse_roi.values().len()];
    for (i, inside) in coarse_roi.values().iter().enumerate() {
        if !inside {
            continue;
        }
        let d: f64 = wr_cube
            .pixel_at(i)
            .iter()
            .zip(&mu)
            .map(|(v, m)| ((*v as f64 - m) / m).abs())
            .sum();
        values[i] = d / l;
    }
    Ok(DeviationMap {
        roi: coarse_roi.clone(),
        values,
    })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyRegion("percentile of empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Pixels of the ROI with `D <= percentile_p(D)`, before any morphology.
pub fn threshold_mask(dev: &DeviationMap, p: f64) -> Result<(Mask, f64)> {
    check_percentile(p)?;
    let thr = percentile(&dev.roi_values(), p)?;
    let roi = dev.roi();
    let mask = Mask::from_fn(roi.height(), roi.width(), |y, x| {
        dev.get(y, x).is_some_and(|d| d <= thr)
    });
    Ok((mask, thr))
}

fn check_percentile(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100), got {p}"
        )));
    }
    Ok(())
}

/// Threshold, 3x3 closing, 3x3 opening, largest 8-connected component.
pub fn refine_mask(dev: &DeviationMap, p: f64) -> Result<Mask> {
    let (thresholded, _) = threshold_mask(dev, p)?;
    let closed = close(&thresholded);
    let opened = dilate(&erode(&closed));
    let mut within_roi = opened;
    for (v, r) in within_roi.values_mut().iter_mut().zip(dev.roi().values()) {
        *v &= *r;
    }
    let largest = largest_component(&within_roi);
    if largest.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "reference mask empty after filtering at p={p}"
        )));
    }
    Ok(largest)
}

// Out-of-image neighbors are ignored, so a full-frame mask is a fixed point
// of both operators and regions touching the border are not eroded.
fn morph(mask: &Mask, dilation: bool) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |y, x| {
        let mut acc = !dilation;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let v = mask.get(ny, nx);
                if dilation {
                    acc |= v;
                } else {
                    acc &= v;
                }
            }
        }
        acc
    })
}

/// 3x3 closing evaluated on a canvas padded with one unset pixel per side,
/// so regions near the image border do not grow into it.
pub fn close(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let padded = Mask::from_fn(h + 2, w + 2, |y, x| {
        (1..=h).contains(&y) && (1..=w).contains(&x) && mask.get(y - 1, x - 1)
    });
    let closed = erode(&dilate(&padded));
    Mask::from_fn(h, w, |y, x| closed.get(y + 1, x + 1))
}

pub fn dilate(mask: &Mask) -> Mask {
    morph(mask, true)
}

pub fn erode(mask: &Mask) -> Mask {
    morph(mask, false)
}

/// 8-connected components as lists of raster indices, in raster order of
/// their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if !mask.values()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (y, x) = (i / w, i % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if mask.values()[j] && label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        pixels.sort_unstable();
        comps.push(pixels);
    }
    comps
}

/// Largest 8-connected component; the earliest one wins ties.
pub fn largest_component(mask: &Mask) -> Mask {
    let comps = connected_components(mask);
    let mut out = Mask::empty(mask.height(), mask.width());
    let mut best: Option<&Vec<usize>> = None;
    for c in &comps {
        if best.map_or(true, |b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    if let Some(c) = best {
        let w = mask.width();
        for &i in c {
            out.set(i / w, i % w, true);
        }
    }
    out
}

/// Per-band mean of the reference cube over `mask`.
pub fn wr_mean(wr_cube: &HyperCube, mask: &Mask) -> Result<Vec<f64>> {
    wr_cube.roi_mean_spectrum(mask)
}

/// Centered moving average with symmetric (edge-repeating) reflection.
pub fn smooth_spectrum(mu: &[f64], window: usize) -> Result<Vec<f64>> {
    let l = mu.len();
    if window == 0 || window % 2 == 0 || window > l {
        return Err(Error::InvalidArgument(format!(
            "smoothing window must be odd and in [1, {l}], got {window}"
        )));
    }
    let half = (window / 2) as isize;
    let reflect = |i: isize| -> usize {
        let n = l as isize;
        let j = if i < 0 {
            -i - 1
        } else if i >= n {
            2 * n - i - 1
        } else {
            i
        };
        j as usize
    };
    Ok((0..l as isize)
        .map(|i| {
            let s: f64 = (i - half..=i + half).map(|k| mu[reflect(k)]).sum();
            s / window as f64
        })
        .collect())
}

/// Fitted white reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WrCalibration {
    #[serde(skip)]
    pub mask: Option<Mask>,
    pub mean_spectrum: Vec<f64>,
    pub smoothed_spectrum: Vec<f64>,
    pub percentile_p: f64,
    pub pixel_count: usize,
    pub window: usize,
}

impl WrCalibration {
    /// Runs mask refinement, mean estimation and smoothing on a reference cube.
    pub fn fit(wr_cube: &HyperCube, coarse_roi: &Mask, p: f64, window: usize) -> Result<Self> {
        let dev = deviation_map(wr_cube, coarse_roi)?;
        let mask = refine_mask(&dev, p)?;
        let mean = wr_mean(wr_cube, &mask)?;
        let smoothed = smooth_spectrum(&mean, window)?;
        if let Some((b, v)) = smoothed.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "smoothed reference is {v} in band {b}"
            )));
        }
        Ok(WrCalibration {
            pixel_count: mask.count(),
            mask: Some(mask),
            mean_spectrum: mean,
            smoothed_spectrum: smoothed,
            percentile_p: p,
            window,
        })
    }

    /// Reference from a known spectrum (no mask).
    pub fn from_spectrum(spectrum: Vec<f64>) -> Result<Self> {
        if let Some(v) = spectrum.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "reference spectrum must be positive, got {v}"
            )));
        }
        Ok(WrCalibration {
            mask: None,
            mean_spectrum: spectrum.clone(),
            smoothed_spectrum: spectrum,
            percentile_p: DEFAULT_PERCENTILE,
            pixel_count: 1,
            window: 1,
        })
    }
}

/// `clip(I / smoothed_reference, 0, 1)` band by band.
pub fn calibrate(cube: &HyperCube, calib: &WrCalibration) -> Result<HyperCube> {
    let reference = &calib.smoothed_spectrum;
    if reference.len() != cube.bands() {
        return Err(Error::ShapeMismatch(format!(
            "reference has {} bands, cube has {}",
            reference.len(),
            cube.bands()
        )));
    }
    if let Some((b, v)) = reference.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "nonpositive reference {v} in band {b}"
        )));
    }
    let l = cube.bands();
    let data: Vec<f32> = cube
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (*v as f64 / reference[i % l]).clamp(0.0, 1.0) as f32)
        .collect();
    HyperCube::new(
        cube.height(),
        cube.width(),
        cube.wavelengths().to_vec(),
        data,
        CubeKind::Calibrated,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub percentile: f64,
    pub pixel_count: usize,
    pub median_deviation: f64,
    pub p95_deviation: f64,
    pub max_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub masks: Vec<Mask>,
    /// Statistics of the unfiltered ROI, for comparison.
    pub roi_row: SweepRow,
}

fn deviation_stats(p: f64, values: &[f64]) -> Result<SweepRow> {
    Ok(SweepRow {
        percentile: p,
        pixel_count: values.len(),
        median_deviation: percentile(values, 50.0)?,
        p95_deviation: percentile(values, 95.0)?,
        max_deviation: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Refined-mask size and deviation statistics for each percentile in `ps`.
pub fn percentile_sweep(wr_cube: &HyperCube, coarse_roi: &Mask, ps: &[f64]) -> Result<SweepReport> {
    if ps.is_empty() {
        return Err(Error::InvalidArgument("empty percentile list".into()));
    }
    let dev = deviation_map(wr_cube, coarse_roi)?;
    let mut rows = Vec::with_capacity(ps.len());
    let mut masks = Vec::with_capacity(ps.len());
    for &p in ps {
        let mask = refine_mask(&dev, p)?;
        rows.push(deviation_stats(p, &dev.values_in(&mask))?);
        masks.push(mask);
    }
    let roi_row = deviation_stats(100.0, &dev.roi_values())?;
    Ok(SweepReport {
        rows,
        masks,
        roi_row,
    })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,pixel_count,median_D,p95_D,max_D\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{}",
                r.percentile, r.pixel_count, r.median_deviation, r.p95_deviation, r.max_deviation
            )
            .unwrap();
        }
        s
    }

    /// Writes `sweep.csv` and one `mask_p{p}.png` per percentile into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("sweep.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        for (row, mask) in self.rows.iter().zip(&self.masks) {
            mask.write_png(&dir.join(format!("mask_p{}.png", row.percentile)))?;
        }
        Ok(())
    }
}

/// Synthetic white-reference capture: illuminant `illum` with a flat center
/// and a radial falloff whose spectral shape tilts toward the edges.
///
/// Pixels within `flat_radius` (fraction of the half-diagonal) see the exact
/// illuminant; beyond it the intensity drops quadratically with strength
/// `falloff`.
pub fn vignetted_reference(
    height: usize,
    width: usize,
    wavelengths: &[f64],
    illum: &[f64],
    flat_radius: f64,
    falloff: f64,
) -> Result<HyperCube> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let rmax = (cy * cy + cx * cx).sqrt().max(1.0);
    let (w0, w1) = (wavelengths[0], wavelengths[wavelengths.len() - 1]);
    let span = (w1 - w0).max(1e-9);
    HyperCube::from_fn(
        height,
        width,
        wavelengths.to_vec(),
        CubeKind::Raw,
        |y, x, b| {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() / rmax;
            let excess = (r - flat_radius).max(0.0);
            let tilt = 1.0 + 0.5 * (wavelengths[b] - w0) / span;
            let g = (1.0 - falloff * excess * excess * tilt).max(0.05);
            (illum[b] * g) as f32
        },
    )
}
