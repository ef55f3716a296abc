//! Volume rendering: per-ray sample placement (stratified then importance),
//! transmittance-weighted compositing of n-channel radiance over a white
//! background, its exact backward pass, and whole-view rendering.
//!
//! Rays are rendered in the field's normalized frame. Distances `t` along a
//! ray are therefore in frame units; [`FieldFrame::scale`] converts back to
//! meters.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{derived_normal, BatchAdjoint, BatchOutput, ForwardCache, RadianceField};
use crate::geometry::{self, Aabb, CameraModel, Pose, Ray, Vec3};
use crate::hypercube::{CubeKind, HyperCube};

/// Floor applied to coarse weights before importance sampling.
pub const IMPORTANCE_FLOOR: f64 = 1e-5;
/// Guard in the expected-depth normalization.
pub const DEPTH_EPS: f64 = 1e-8;

/// Isotropic map from world meters to the field's normalized frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldFrame {
    pub center: Vec3,
    pub scale: f64,
}

impl FieldFrame {
    /// Centers the box and scales its longest half-extent to 1.
    pub fn from_aabb(aabb: &Aabb) -> Self {
        FieldFrame {
            center: aabb.center(),
            scale: aabb.half_extent().max(),
        }
    }

    pub fn to_field(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.scale
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.center
    }

    pub fn ray_to_field(&self, ray: &Ray) -> Ray {
        Ray {
            origin: self.to_field(&ray.origin),
            direction: ray.direction,
        }
    }

    pub fn aabb_to_field(&self, aabb: &Aabb) -> Aabb {
        Aabb {
            min: self.to_field(&aabb.min),
            max: self.to_field(&aabb.max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub coarse_samples: usize,
    pub fine_samples: usize,
    /// Background value composited into every channel.
    pub background: f64,
    /// Fractional padding of the scene bounds used for near/far.
    pub aabb_padding: f64,
    pub jitter: bool,
    /// Rays per chunk in whole-view rendering.
    pub chunk: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            coarse_samples: 64,
            fine_samples: 64,
            background: 1.0,
            aabb_padding: 0.05,
            jitter: true,
            chunk: 1024,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_samples < 2 {
            return Err(Error::InvalidArgument("coarse_samples must be >= 2".into()));
        }
        if self.chunk == 0 {
            return Err(Error::InvalidArgument("chunk must be >= 1".into()));
        }
        if !(self.aabb_padding >= 0.0) || !self.background.is_finite() {
            return Err(Error::InvalidArgument("invalid padding or background".into()));
        }
        Ok(())
    }
}

/// Sample positions along one ray. Sample `i` covers `[t_i, t_i + delta_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl RaySamples {
    /// `t` must be strictly increasing inside `[near, far]`.
    pub fn new(ray: Ray, near: f64, far: f64, t: Vec<f64>) -> Result<Self> {
        if !(near < far) {
            return Err(Error::InvalidArgument(format!("near {near} >= far {far}")));
        }
        for w in t.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidArgument("sample t values not increasing".into()));
            }
        }
        if let (Some(a), Some(b)) = (t.first(), t.last()) {
            if *a < near || *b > far {
                return Err(Error::InvalidArgument("samples outside [near, far]".into()));
            }
        }
        let deltas = sample_deltas(&t, far);
        Ok(RaySamples {
            ray,
            near,
            far,
            t,
            deltas,
        })
    }

    /// A ray that misses the scene bounds.
    pub fn empty(ray: Ray) -> Self {
        RaySamples {
            ray,
            near: 0.0,
            far: 0.0,
            t: Vec::new(),
            deltas: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.ray.at(self.t[i])
    }

    /// Normalized interval midpoints in `[0, 1]`.
    pub fn s_mid(&self) -> Vec<f64> {
        let span = self.far - self.near;
        self.t
            .iter()
            .zip(&self.deltas)
            .map(|(t, d)| (t + 0.5 * d - self.near) / span)
            .collect()
    }

    /// Normalized interval lengths.
    pub fn s_deltas(&self) -> Vec<f64> {
        let span = self.far - self.near;
        self.deltas.iter().map(|d| d / span).collect()
    }
}

fn sample_deltas(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(last) = t.last() {
        d.push(far - last);
    }
    d
}

/// `count` positions in `[near, far]`, one per equal stratum: a uniform draw
/// when `jitter`, the stratum midpoint otherwise.
pub fn sample_stratified<R: Rng>(
    near: f64,
    far: f64,
    count: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(near < far) || !near.is_finite() || !far.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid bounds [{near}, {far}]")));
    }
    if count < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let step = (far - near) / count as f64;
    Ok((0..count)
        .map(|k| {
            let u: f64 = if jitter { rng.gen() } else { 0.5 };
            (near + (k as f64 + u) * step).min(far)
        })
        .collect())
}

/// Bin edges around sample positions: midpoints between neighbours, closed by
/// `near` and `far`.
pub fn bin_edges(t: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut e = Vec::with_capacity(t.len() + 1);
    e.push(near);
    e.extend(t.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    e.push(far);
    e
}

/// Inverse-CDF draws from the piecewise-constant density whose bins surround
/// `coarse_t` and carry `weights` (floored at [`IMPORTANCE_FLOOR`]). Falls back
/// to stratified sampling when every weight is zero or non-finite.
pub fn sample_importance<R: Rng>(
    coarse_t: &[f64],
    weights: &[f64],
    near: f64,
    far: f64,
    count: usize,
    jitter: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if coarse_t.len() != weights.len() || coarse_t.is_empty() {
        return Err(Error::ShapeMismatch("coarse samples and weights differ".into()));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let total: f64 = weights.iter().filter(|w| w.is_finite()).sum();
    if !(total > 0.0) {
        return sample_stratified(near, far, count.max(2), jitter, rng)
            .map(|mut v| {
                v.truncate(count);
                v
            });
    }
    let edges = bin_edges(coarse_t, near, far);
    let w: Vec<f64> = weights
        .iter()
        .map(|w| if w.is_finite() { w.max(IMPORTANCE_FLOOR) } else { IMPORTANCE_FLOOR })
        .collect();
    let sum: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for wi in &w {
        acc += wi / sum;
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(count);
    let mut bin = 0;
    for k in 0..count {
        let xi: f64 = if jitter { rng.gen() } else { 0.5 };
        let u = ((k as f64 + xi) / count as f64).min(cdf[w.len()]);
        while bin + 1 < w.len() && cdf[bin + 1] < u {
            bin += 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = if mass > 0.0 { ((u - cdf[bin]) / mass).clamp(0.0, 1.0) } else { 0.5 };
        out.push(edges[bin] + frac * (edges[bin + 1] - edges[bin]));
    }
    Ok(out)
}

/// Sorted union of two sample sets with exact duplicates removed.
pub fn merge_samples(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.total_cmp(y));
    all.dedup();
    all
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub radiance: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance before each sample.
    pub transmittance: Vec<f64>,
    pub accumulation: f64,
    /// Expected termination distance in the samples' units.
    pub depth: f64,
}

/// Alpha compositing over `background`.
pub fn composite(
    samples: &RaySamples,
    densities: &[f64],
    radiances: &ArrayView2<f64>,
    background: &[f64],
) -> Result<RenderOutput> {
    let s = samples.len();
    if densities.len() != s || radiances.nrows() != s || radiances.ncols() != background.len() {
        return Err(Error::ShapeMismatch(format!(
            "{s} samples, {} densities, radiances {:?}, {} background channels",
            densities.len(),
            radiances.dim(),
            background.len()
        )));
    }
    if let Some(d) = densities.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative or NaN density {d}")));
    }
    Ok(composite_unchecked(samples, densities, radiances, background))
}

fn composite_unchecked(
    samples: &RaySamples,
    densities: &[f64],
    radiances: &ArrayView2<f64>,
    background: &[f64],
) -> RenderOutput {
    let s = samples.len();
    let mut weights = Vec::with_capacity(s);
    let mut transmittance = Vec::with_capacity(s);
    let mut optical: f64 = 0.0;
    for i in 0..s {
        let tau = densities[i] * samples.deltas[i];
        let t_i = (-optical).exp();
        let alpha = -(-tau).exp_m1();
        transmittance.push(t_i);
        weights.push(t_i * alpha);
        optical += tau;
    }
    let acc: f64 = weights.iter().sum();
    let mut radiance: Vec<f64> = background.iter().map(|b| (1.0 - acc) * b).collect();
    for (i, w) in weights.iter().enumerate() {
        for (c, r) in radiance.iter_mut().enumerate() {
            *r += w * radiances[[i, c]];
        }
    }
    let depth = weights.iter().zip(&samples.t).map(|(w, t)| w * t).sum::<f64>() / acc.max(DEPTH_EPS);
    RenderOutput {
        radiance,
        weights,
        transmittance,
        accumulation: acc,
        depth,
    }
}

/// Weights only, for the coarse pass.
fn composite_weights(deltas: &[f64], densities: &[f64]) -> Vec<f64> {
    let mut optical: f64 = 0.0;
    deltas
        .iter()
        .zip(densities)
        .map(|(d, s)| {
            let tau = s * d;
            let w = (-optical).exp() * -(-tau).exp_m1();
            optical += tau;
            w
        })
        .collect()
}

/// Gradients of a scalar with respect to per-sample densities and radiances
/// given its gradients with respect to the composited color and the weights.
pub fn composite_backward(
    samples: &RaySamples,
    densities: &[f64],
    radiances: &ArrayView2<f64>,
    background: &[f64],
    out: &RenderOutput,
    grad_color: &[f64],
    grad_weights: Option<&[f64]>,
) -> (Vec<f64>, Array2<f64>) {
    let s = samples.len();
    let n = background.len();
    let mut d_rad = Array2::zeros((s, n));
    // g_i: total adjoint of w_i (C = sum w_i (c_i - b) + b)
    let mut g = vec![0.0; s];
    for i in 0..s {
        let mut gi = grad_weights.map_or(0.0, |gw| gw[i]);
        for c in 0..n {
            gi += grad_color[c] * (radiances[[i, c]] - background[c]);
            d_rad[[i, c]] = out.weights[i] * grad_color[c];
        }
        g[i] = gi;
    }
    let mut d_sigma = vec![0.0; s];
    let mut tail = 0.0; // sum_{i>k} g_i w_i
    for k in (0..s).rev() {
        let tau = densities[k] * samples.deltas[k];
        let t_next = out.transmittance[k] * (-tau).exp();
        d_sigma[k] = samples.deltas[k] * (g[k] * t_next - tail);
        tail += g[k] * out.weights[k];
    }
    (d_sigma, d_rad)
}

/// Near/far of a field-frame ray against the padded bounds.
pub fn ray_bounds(ray: &Ray, bounds: &Aabb) -> Option<(f64, f64)> {
    bounds.intersect(ray).filter(|(a, b)| b > a)
}

/// Coarse stratified pass, density-only evaluation, then importance samples
/// merged with the coarse ones. `rays` are in the field frame.
pub fn plan_samples<R: Rng>(
    field: &RadianceField,
    rays: &[Ray],
    bounds: &Aabb,
    cfg: &RenderConfig,
    rng: &mut R,
) -> Result<Vec<RaySamples>> {
    let mut coarse = Vec::with_capacity(rays.len());
    let mut pts = Vec::new();
    for ray in rays {
        match ray_bounds(ray, bounds) {
            Some((near, far)) => {
                let t = sample_stratified(near, far, cfg.coarse_samples, cfg.jitter, rng)?;
                for ti in &t {
                    pts.extend_from_slice(ray.at(*ti).as_slice());
                }
                coarse.push(RaySamples::new(*ray, near, far, t)?);
            }
            None => coarse.push(RaySamples::empty(*ray)),
        }
    }
    if cfg.fine_samples == 0 || pts.is_empty() {
        return Ok(coarse);
    }
    let pts = Array2::from_shape_vec((pts.len() / 3, 3), pts).expect("flat xyz");
    let dens = field.density_batch(&pts.view());
    let mut offset = 0;
    let mut out = Vec::with_capacity(rays.len());
    for c in coarse {
        if c.is_empty() {
            out.push(c);
            continue;
        }
        let s = c.len();
        let w = composite_weights(&c.deltas, &dens.as_slice().expect("contiguous")[offset..offset + s]);
        offset += s;
        let fine = sample_importance(&c.t, &w, c.near, c.far, cfg.fine_samples, cfg.jitter, rng)?;
        let merged = merge_samples(&c.t, &fine);
        out.push(RaySamples::new(c.ray, c.near, c.far, merged)?);
    }
    Ok(out)
}

/// Field evaluation and compositing for a batch of planned rays, retaining
/// everything the backward pass needs. Density gradients (and so derived
/// normals) are evaluated on the samples of the first `normal_rays` rays.
pub struct BatchRender {
    pub samples: Vec<RaySamples>,
    /// `offsets[r]..offsets[r + 1]` indexes the samples of ray `r`.
    pub offsets: Vec<usize>,
    pub normal_rays: usize,
    pub field_out: BatchOutput,
    cache: ForwardCache,
    pub rays: Vec<RenderOutput>,
    pub background: Vec<f64>,
}

impl BatchRender {
    pub fn forward(
        field: &RadianceField,
        samples: Vec<RaySamples>,
        normal_rays: usize,
        background: f64,
    ) -> Result<Self> {
        let normal_rays = normal_rays.min(samples.len());
        let mut offsets = Vec::with_capacity(samples.len() + 1);
        offsets.push(0);
        let mut pts = Vec::new();
        let mut dirs = Vec::new();
        for s in &samples {
            for i in 0..s.len() {
                pts.extend_from_slice(s.point(i).as_slice());
                dirs.extend_from_slice(s.ray.direction.as_slice());
            }
            offsets.push(offsets.last().unwrap() + s.len());
        }
        let total = *offsets.last().unwrap();
        let pts = Array2::from_shape_vec((total, 3), pts).expect("flat xyz");
        let dirs = Array2::from_shape_vec((total, 3), dirs).expect("flat xyz");
        let m = offsets[normal_rays];
        let (field_out, cache) = field.forward(&pts.view(), &dirs.view(), m)?;
        let n = field.config().n_channels;
        let bg = vec![background; n];
        let dens = field_out.density.as_slice().expect("contiguous");
        let rays = samples
            .iter()
            .enumerate()
            .map(|(r, s)| {
                let (a, b) = (offsets[r], offsets[r + 1]);
                composite_unchecked(
                    s,
                    &dens[a..b],
                    &field_out.radiance.slice(ndarray::s![a..b, ..]),
                    &bg,
                )
            })
            .collect();
        Ok(BatchRender {
            samples,
            offsets,
            normal_rays,
            field_out,
            cache,
            rays,
            background: bg,
        })
    }

    pub fn n_rays(&self) -> usize {
        self.samples.len()
    }

    /// Number of samples carrying density gradients.
    pub fn normal_samples(&self) -> usize {
        self.offsets[self.normal_rays]
    }

    pub fn colors(&self) -> Array2<f64> {
        let n = self.background.len();
        let mut c = Array2::zeros((self.n_rays(), n));
        for (r, out) in self.rays.iter().enumerate() {
            for k in 0..n {
                c[[r, k]] = out.radiance[k];
            }
        }
        c
    }

    /// Derived normals of the gradient-carrying samples.
    pub fn derived_normals(&self) -> Vec<Option<Vec3>> {
        self.field_out
            .density_gradient
            .rows()
            .into_iter()
            .map(|g| derived_normal(&Vec3::new(g[0], g[1], g[2])))
            .collect()
    }

    pub fn predicted_normals(&self) -> Option<Vec<Vec3>> {
        let m = self.normal_samples();
        self.field_out.predicted_normal.as_ref().map(|p| {
            (0..m).map(|i| Vec3::new(p[[i, 0]], p[[i, 1]], p[[i, 2]])).collect()
        })
    }

    /// Flattened view directions of the gradient-carrying samples.
    pub fn normal_sample_dirs(&self) -> Vec<Vec3> {
        let mut v = Vec::with_capacity(self.normal_samples());
        for s in &self.samples[..self.normal_rays] {
            v.extend(std::iter::repeat(s.ray.direction).take(s.len()));
        }
        v
    }

    /// Chains loss gradients back to the field parameters, accumulating into
    /// `grads`. `grad_weights` is flattened like the samples; normal
    /// gradients cover the gradient-carrying samples.
    pub fn backward(
        &self,
        field: &RadianceField,
        grad_colors: &ArrayView2<f64>,
        grad_weights: Option<&[f64]>,
        grad_derived_normals: Option<&[Vec3]>,
        grad_pred_normals: Option<&[Vec3]>,
        grads: &mut [f64],
    ) -> Result<()> {
        let total = *self.offsets.last().unwrap();
        let n = self.background.len();
        let m = self.normal_samples();
        let mut adj = BatchAdjoint::zeros(total, n, m, self.field_out.predicted_normal.is_some());
        let dens = self.field_out.density.as_slice().expect("contiguous");
        for (r, s) in self.samples.iter().enumerate() {
            let (a, b) = (self.offsets[r], self.offsets[r + 1]);
            if a == b {
                continue;
            }
            let gc: Vec<f64> = grad_colors.row(r).to_vec();
            let (ds, dc) = composite_backward(
                s,
                &dens[a..b],
                &self.field_out.radiance.slice(ndarray::s![a..b, ..]),
                &self.background,
                &self.rays[r],
                &gc,
                grad_weights.map(|g| &g[a..b]),
            );
            for (i, v) in ds.into_iter().enumerate() {
                adj.density[a + i] = v;
            }
            adj.radiance.slice_mut(ndarray::s![a..b, ..]).assign(&dc);
        }
        if let Some(gn) = grad_derived_normals {
            let gg = adj.density_gradient.as_mut().expect("gradient rows present");
            for i in 0..m {
                let g = &self.field_out.density_gradient.row(i);
                let gv = Vec3::new(g[0], g[1], g[2]);
                let norm = gv.norm();
                if derived_normal(&gv).is_none() {
                    continue;
                }
                // n = -g/|g|  =>  dL/dg = -(I - n n^T) dL/dn / |g|
                let nh = -gv / norm;
                let d = -(gn[i] - nh * nh.dot(&gn[i])) / norm;
                for k in 0..3 {
                    gg[[i, k]] = d[k];
                }
            }
        }
        if let (Some(gp), Some(ap)) = (grad_pred_normals, adj.predicted_normal.as_mut()) {
            for i in 0..m {
                for k in 0..3 {
                    ap[[i, k]] = gp[i][k];
                }
            }
        }
        field.backward(&self.cache, &adj, grads)
    }
}

/// A rendered view in world units.
#[derive(Clone, Debug)]
pub struct RenderedView {
    pub cube: HyperCube,
    /// Expected termination distance in meters, row-major `H x W`.
    pub depth: Array2<f64>,
    pub accumulation: Array2<f64>,
}

/// Renders every pixel of a view in chunks (parallel across chunks). With
/// `cfg.jitter` off the result is deterministic.
pub fn render_view(
    field: &RadianceField,
    frame: &FieldFrame,
    bounds: &Aabb,
    cam: &CameraModel,
    pose: &Pose,
    wavelengths: &[f64],
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RenderedView> {
    cfg.validate()?;
    let n = field.config().n_channels;
    if wavelengths.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} wavelengths for a {n}-channel field",
            wavelengths.len()
        )));
    }
    let rays: Vec<Ray> = geometry::view_rays(cam, pose)
        .iter()
        .map(|r| frame.ray_to_field(r))
        .collect();
    let fb = frame.aabb_to_field(bounds).padded(cfg.aabb_padding);
    let chunks: Vec<&[Ray]> = rays.chunks(cfg.chunk).collect();
    let rendered: Vec<Result<Vec<RenderOutput>>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, chunk)| {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let samples = plan_samples(field, chunk, &fb, cfg, &mut rng)?;
            Ok(render_samples(field, &samples, cfg.background)?)
        })
        .collect();
    let (h, w) = (cam.height, cam.width);
    let mut data = Vec::with_capacity(h * w * n);
    let mut depth = Array2::zeros((h, w));
    let mut accumulation = Array2::zeros((h, w));
    let mut idx = 0;
    for chunk in rendered {
        for out in chunk? {
            data.extend(out.radiance.iter().map(|v| *v as f32));
            let (v, u) = (idx / w, idx % w);
            depth[[v, u]] = if out.accumulation > 0.0 {
                out.depth * frame.scale
            } else {
                f64::INFINITY
            };
            accumulation[[v, u]] = out.accumulation;
            idx += 1;
        }
    }
    let cube = HyperCube::new(h, w, wavelengths.to_vec(), data, CubeKind::Calibrated)?;
    Ok(RenderedView {
        cube,
        depth,
        accumulation,
    })
}

/// Forward-only rendering of planned samples (no tangents, no cache kept).
pub fn render_samples(
    field: &RadianceField,
    samples: &[RaySamples],
    background: f64,
) -> Result<Vec<RenderOutput>> {
    let n = field.config().n_channels;
    let bg = vec![background; n];
    let mut pts = Vec::new();
    let mut dirs = Vec::new();
    for s in samples {
        for i in 0..s.len() {
            pts.extend_from_slice(s.point(i).as_slice());
            dirs.extend_from_slice(s.ray.direction.as_slice());
        }
    }
    let total = pts.len() / 3;
    let pts = Array2::from_shape_vec((total, 3), pts).expect("flat xyz");
    let dirs = Array2::from_shape_vec((total, 3), dirs).expect("flat xyz");
    let (o, _) = field.forward(&pts.view(), &dirs.view(), 0)?;
    let dens = o.density.as_slice().expect("contiguous");
    let mut a = 0;
    Ok(samples
        .iter()
        .map(|s| {
            let b = a + s.len();
            let out = composite_unchecked(s, &dens[a..b], &o.radiance.slice(ndarray::s![a..b, ..]), &bg);
            a = b;
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(t: Vec<f64>, far: f64) -> RaySamples {
        RaySamples::new(Ray { origin: Vec3::zeros(), direction: Vec3::z() }, 0.0, far, t).unwrap()
    }

    #[test]
    fn stratified_midpoints_and_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_stratified(0.0, 1.0, 4, false, &mut rng).unwrap();
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
        let t = sample_stratified(2.0, 3.0, 10, true, &mut rng).unwrap();
        for (k, v) in t.iter().enumerate() {
            assert!(*v >= 2.0 + k as f64 * 0.1 - 1e-12 && *v <= 2.0 + (k + 1) as f64 * 0.1 + 1e-12);
        }
        let a = sample_stratified(0.0, 1.0, 8, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_stratified(0.0, 1.0, 8, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_stratified(1.0, 1.0, 4, false, &mut rng).is_err());
        assert!(sample_stratified(0.0, 1.0, 1, false, &mut rng).is_err());
    }

    #[test]
    fn importance_uniform_weights_pass_ks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coarse = sample_stratified(0.0, 1.0, 64, false, &mut rng).unwrap();
        let w = vec![1.0 / 64.0; 64];
        let mut s = sample_importance(&coarse, &w, 0.0, 1.0, 1024, true, &mut rng).unwrap();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len() as f64;
        let ks = s
            .iter()
            .enumerate()
            .map(|(i, x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.1, "KS statistic {ks}");
    }

    #[test]
    fn importance_spike_stays_in_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coarse = sample_stratified(0.0, 1.0, 64, false, &mut rng).unwrap();
        let mut w = vec![0.0; 64];
        w[20] = 1.0;
        let s = sample_importance(&coarse, &w, 0.0, 1.0, 64, false, &mut rng).unwrap();
        assert!(s.iter().all(|t| *t >= 20.0 / 64.0 && *t <= 21.0 / 64.0));
        let merged = merge_samples(&coarse, &s);
        assert!(merged.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn importance_zero_weights_fall_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_importance(&[0.25, 0.75], &[0.0, 0.0], 0.0, 1.0, 4, false, &mut rng).unwrap();
        assert_eq!(s, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn composite_two_sample_closed_form() {
        let ln2 = 2f64.ln();
        let s = line(vec![1.0, 2.0], 3.0);
        let rad = array![[0.2, 0.4], [0.6, 0.8]];
        let out = composite(&s, &[ln2, ln2], &rad.view(), &[1.0, 1.0]).unwrap();
        assert_relative_eq!(out.weights[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(out.weights[1], 0.25, epsilon = 1e-15);
        assert_relative_eq!(out.accumulation, 0.75, epsilon = 1e-15);
        assert_relative_eq!(out.radiance[0], 0.5 * 0.2 + 0.25 * 0.6 + 0.25, epsilon = 1e-15);
        assert_relative_eq!(out.radiance[1], 0.5 * 0.4 + 0.25 * 0.8 + 0.25, epsilon = 1e-15);
        assert_relative_eq!(out.depth, (0.5 + 0.5) / 0.75, epsilon = 1e-15);
    }

    #[test]
    fn composite_limits() {
        let s = line(vec![0.5], 1.0);
        let rad = array![[0.3, 0.7]];
        let out = composite(&s, &[1e6], &rad.view(), &[1.0, 1.0]).unwrap();
        assert_relative_eq!(out.accumulation, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.radiance[0], 0.3, epsilon = 1e-12);
        let s = line(vec![0.1, 0.4, 0.9], 1.0);
        let rad = array![[0.3], [0.2], [0.1]];
        let out = composite(&s, &[0.0; 3], &rad.view(), &[0.85]).unwrap();
        assert_eq!(out.accumulation, 0.0);
        assert_eq!(out.radiance, vec![0.85]);
        assert!(composite(&s, &[0.0, -1.0, 0.0], &rad.view(), &[1.0]).is_err());
    }

    #[test]
    fn zero_density_samples_are_transparent() {
        let s = line(vec![0.1, 0.4, 0.9], 1.0);
        let rad = array![[0.3], [0.2], [0.1]];
        let base = composite(&s, &[2.0, 1.0, 3.0], &rad.view(), &[1.0]).unwrap();
        // split the second interval in two with a zero-density sample in front
        let s2 = line(vec![0.1, 0.25, 0.4, 0.9], 1.0);
        let rad2 = array![[0.3], [0.9], [0.2], [0.1]];
        let d0 = 2.0 * 0.3 / 0.15;
        let out = composite(&s2, &[d0, 0.0, 1.0, 3.0], &rad2.view(), &[1.0]).unwrap();
        assert_relative_eq!(out.radiance[0], base.radiance[0], epsilon = 1e-12);
        assert_relative_eq!(out.accumulation, base.accumulation, epsilon = 1e-12);
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let s = line(vec![0.1, 0.3, 0.45, 0.8], 1.0);
        let dens = vec![1.5, 0.7, 3.0, 2.2];
        let rad = array![[0.3, 0.1], [0.2, 0.6], [0.9, 0.5], [0.4, 0.4]];
        let bg = [1.0, 0.8];
        let gc = [0.7, -1.1];
        let gw = [0.3, -0.2, 0.5, 0.1];
        let scalar = |d: &[f64], r: &Array2<f64>| {
            let o = composite(&s, d, &r.view(), &bg).unwrap();
            o.radiance[0] * gc[0] + o.radiance[1] * gc[1]
                + o.weights.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>()
        };
        let out = composite(&s, &dens, &rad.view(), &bg).unwrap();
        let (ds, dr) = composite_backward(&s, &dens, &rad.view(), &bg, &out, &gc, Some(&gw));
        let h = 1e-6;
        for k in 0..4 {
            let mut p = dens.clone();
            p[k] += h;
            let mut m = dens.clone();
            m[k] -= h;
            let fd = (scalar(&p, &rad) - scalar(&m, &rad)) / (2.0 * h);
            assert_relative_eq!(ds[k], fd, epsilon = 1e-8);
            for c in 0..2 {
                let mut p = rad.clone();
                p[[k, c]] += h;
                let mut m = rad.clone();
                m[[k, c]] -= h;
                let fd = (scalar(&dens, &p) - scalar(&dens, &m)) / (2.0 * h);
                assert_relative_eq!(dr[[k, c]], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn untrained_transparent_field_renders_background() {
        let mut field = RadianceField::new(FieldConfig::new(3), 0).unwrap();
        field.zero_density_head();
        field.set_density_bias(-60.0);
        let aabb = Aabb::cube(Vec3::zeros(), 0.08);
        let frame = FieldFrame::from_aabb(&aabb);
        let cam = CameraModel::centered(10.0, 8, 8).unwrap();
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, -0.3), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0)).unwrap();
        let cfg = RenderConfig {
            coarse_samples: 8,
            fine_samples: 8,
            jitter: false,
            ..RenderConfig::default()
        };
        let wl = [500.0, 600.0, 700.0];
        let a = render_view(&field, &frame, &aabb, &cam, &pose, &wl, &cfg, 0).unwrap();
        assert!(a.cube.data().iter().all(|v| (*v - 1.0).abs() < 1e-6));
        let b = render_view(&field, &frame, &aabb, &cam, &pose, &wl, &cfg, 9).unwrap();
        assert_eq!(a.cube.data(), b.cube.data());
    }

    #[test]
    fn frame_round_trip() {
        let aabb = Aabb::new(Vec3::new(-0.1, 0.0, 0.2), Vec3::new(0.1, 0.1, 0.3)).unwrap();
        let f = FieldFrame::from_aabb(&aabb);
        assert_relative_eq!(f.scale, 0.1);
        let p = Vec3::new(0.05, 0.02, 0.27);
        assert_relative_eq!(f.to_world(&f.to_field(&p)), p, epsilon = 1e-15);
        let fb = f.aabb_to_field(&aabb);
        assert_relative_eq!(fb.max.x, 1.0, epsilon = 1e-15);
    }
}
