//! Training objective terms and their analytic gradients.
//!
//! Every term returns its value together with the gradient with respect to
//! its direct inputs (predicted spectra, rendering weights, normals). The
//! renderer and field chain those back to the parameters.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Stabilizer in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub hsi: f64,
    pub ang: f64,
    pub dist: f64,
    pub ori: f64,
    pub pn: f64,
    /// Kept for configuration compatibility; there is no proposal network so
    /// this multiplier has no effect.
    pub prop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::with_pair(0.25, 0.75)
    }
}

impl LossWeights {
    /// Standard regularizer multipliers with the given `(lambda_ang, lambda_hsi)`.
    pub fn with_pair(ang: f64, hsi: f64) -> Self {
        LossWeights {
            hsi,
            ang,
            dist: 0.002,
            ori: 1e-4,
            pn: 1e-3,
            prop: 1.0,
        }
    }

    pub fn zero() -> Self {
        LossWeights {
            hsi: 0.0,
            ang: 0.0,
            dist: 0.0,
            ori: 0.0,
            pn: 0.0,
            prop: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.hsi, self.ang, self.dist, self.ori, self.pn, self.prop];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub hsi: f64,
    pub ang: f64,
    pub dist: f64,
    pub ori: f64,
    pub pn: f64,
    pub total: f64,
    pub batch_size: usize,
    /// Fraction of batch rays inside the supervision mask.
    pub mask_coverage: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,L_hsi,L_ang,L_dist,L_ori,L_pn,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.hsi, self.ang, self.dist, self.ori, self.pn, self.total
        )
    }
}

fn check_pair(pred: &ArrayView2<f64>, target: &ArrayView2<f64>, mask: &[bool]) -> Result<usize> {
    if pred.dim() != target.dim() || mask.len() != pred.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, target {:?}, mask {}",
            pred.dim(),
            target.dim(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::EmptyRegion("supervision mask selects no pixels".into()));
    }
    Ok(count)
}

/// Squared error summed over channels, averaged over masked pixels.
pub fn loss_hsi(
    pred: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    mask: &[bool],
) -> Result<(f64, Array2<f64>)> {
    let count = check_pair(pred, target, mask)? as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (p, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for c in 0..pred.ncols() {
            let d = pred[[p, c]] - target[[p, c]];
            total += d * d;
            grad[[p, c]] = 2.0 * d / count;
        }
    }
    Ok((total / count, grad))
}

/// Mean over masked pixels of `1 - <p, t> / (|p| |t| + eps)`.
pub fn loss_angular(
    pred: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    mask: &[bool],
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let count = check_pair(pred, target, mask)? as f64;
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let p = pred.row(i);
        let t = target.row(i);
        let dot = p.dot(&t);
        let (np, nt) = (p.dot(&p).sqrt(), t.dot(&t).sqrt());
        let den = np * nt + eps;
        total += 1.0 - dot / den;
        for c in 0..pred.ncols() {
            let dden = if np > 0.0 { nt * p[c] / np } else { 0.0 };
            grad[[i, c]] = -(t[c] / den - dot * dden / (den * den)) / count;
        }
    }
    Ok((total / count, grad))
}

/// Distortion of one ray: `sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 ds_i`
/// with `m` the normalized interval midpoints (sorted ascending). Evaluated in
/// linear time with prefix sums.
pub fn distortion(mid: &[f64], ds: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let s = w.len();
    debug_assert!(mid.len() == s && ds.len() == s);
    let total_w: f64 = w.iter().sum();
    let total_wm: f64 = w.iter().zip(mid).map(|(a, b)| a * b).sum();
    let mut below_w = 0.0;
    let mut below_wm = 0.0;
    let mut value = 0.0;
    let mut grad = vec![0.0; s];
    for i in 0..s {
        let above_w = total_w - below_w - w[i];
        let above_wm = total_wm - below_wm - w[i] * mid[i];
        // sum_j w_j |m_i - m_j|
        let spread = mid[i] * below_w - below_wm + above_wm - mid[i] * above_w;
        value += w[i] * spread + w[i] * w[i] * ds[i] / 3.0;
        grad[i] = 2.0 * spread + 2.0 * w[i] * ds[i] / 3.0;
        below_w += w[i];
        below_wm += w[i] * mid[i];
    }
    (value, grad)
}

/// Distortion averaged over rays; gradients are returned per ray.
pub fn loss_distortion(rays: &[(Vec<f64>, Vec<f64>, &[f64])]) -> (f64, Vec<Vec<f64>>) {
    if rays.is_empty() {
        return (0.0, Vec::new());
    }
    let n = rays.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(rays.len());
    for (mid, ds, w) in rays {
        let (v, mut g) = distortion(mid, ds, w);
        total += v;
        g.iter_mut().for_each(|x| *x /= n);
        grads.push(g);
    }
    (total / n, grads)
}

/// Gradients of the normal-based terms.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalLossGrad {
    pub normals: Vec<Vec3>,
    pub weights: Vec<f64>,
}

/// `sum w (1 - <n, v>^2) / sum w` over samples with a defined normal.
pub fn loss_orientation(normals: &[Option<Vec3>], view_dirs: &[Vec3], w: &[f64]) -> (f64, NormalLossGrad) {
    let s = normals.len();
    let mut grad = NormalLossGrad {
        normals: vec![Vec3::zeros(); s],
        weights: vec![0.0; s],
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..s {
        if let Some(n) = normals[i] {
            let c = n.dot(&view_dirs[i]);
            num += w[i] * (1.0 - c * c);
            den += w[i];
        }
    }
    if !(den > 0.0) {
        return (0.0, grad);
    }
    let value = num / den;
    for i in 0..s {
        if let Some(n) = normals[i] {
            let c = n.dot(&view_dirs[i]);
            grad.weights[i] = ((1.0 - c * c) - value) / den;
            grad.normals[i] = view_dirs[i] * (-2.0 * c * w[i] / den);
        }
    }
    (value, grad)
}

/// Mean over rays of `sum_j w_j (1 - <n_j, p_j>)`; `offsets` delimit rays.
/// Returns the gradient with respect to derived normals, predicted normals
/// and weights.
pub fn loss_predicted_normal(
    predicted: &[Vec3],
    derived: &[Option<Vec3>],
    w: &[f64],
    offsets: &[usize],
) -> (f64, NormalLossGrad, Vec<Vec3>) {
    let s = derived.len();
    let mut grad = NormalLossGrad {
        normals: vec![Vec3::zeros(); s],
        weights: vec![0.0; s],
    };
    let mut grad_pred = vec![Vec3::zeros(); s];
    let rays = offsets.len().saturating_sub(1);
    if rays == 0 {
        return (0.0, grad, grad_pred);
    }
    let n = rays as f64;
    let mut total = 0.0;
    for i in 0..s {
        if let Some(d) = derived[i] {
            let c = d.dot(&predicted[i]);
            total += w[i] * (1.0 - c);
            grad.weights[i] = (1.0 - c) / n;
            grad.normals[i] = predicted[i] * (-w[i] / n);
            grad_pred[i] = d * (-w[i] / n);
        }
    }
    (total / n, grad, grad_pred)
}
