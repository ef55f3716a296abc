//! Multi-channel radiance field: frequency encodings, a position-only trunk
//! with a scalar density head (shared by every wavelength), an optional
//! predicted-normal head, and a direction-conditioned radiance branch that
//! emits `n_channels` values in `(0, 1)`.
//!
//! Everything is evaluated in batches with exact reverse-mode gradients. The
//! spatial density gradient is carried forward as three tangent streams
//! through the trunk so that losses on derived normals can be differentiated
//! with respect to the parameters as well (second-order terms included).
//!
//! The field lives in a normalized frame: the scene bounds map to `[-1, 1]`
//! along their longest axis (see [`crate::render::FieldFrame`]). Densities
//! are per unit of that frame.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Gradient norm below which a derived normal is treated as undefined.
pub const DEGENERATE_GRADIENT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Softplus,
    /// `(z + sqrt(z^2 + 4)) / 2`: smooth like softplus, but only needs a
    /// square root.
    Squareplus,
}

impl Activation {
    #[inline]
    fn value(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus => softplus(z),
            Activation::Squareplus => 0.5 * (z + (z * z + 4.0).sqrt()),
        }
    }

    #[inline]
    fn first(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Squareplus => 0.5 * (1.0 + z / (z * z + 4.0).sqrt()),
        }
    }

    #[inline]
    fn second(self, z: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            Activation::Squareplus => {
                let q = z * z + 4.0;
                2.0 / (q * q.sqrt())
            }
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub n_channels: usize,
    pub pos_frequencies: usize,
    pub dir_frequencies: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub radiance_layers: usize,
    pub radiance_width: usize,
    pub predict_normals: bool,
    pub activation: Activation,
    /// Multiplier on the softplus density output.
    pub density_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig::new(1)
    }
}

impl FieldConfig {
    pub fn new(n_channels: usize) -> Self {
        FieldConfig {
            n_channels,
            pos_frequencies: 6,
            dir_frequencies: 4,
            trunk_layers: 4,
            trunk_width: 64,
            radiance_layers: 2,
            radiance_width: 64,
            predict_normals: true,
            activation: Activation::Squareplus,
            density_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_channels", self.n_channels),
            ("pos_frequencies", self.pos_frequencies),
            ("dir_frequencies", self.dir_frequencies),
            ("trunk_layers", self.trunk_layers),
            ("trunk_width", self.trunk_width),
            ("radiance_layers", self.radiance_layers),
            ("radiance_width", self.radiance_width),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !(self.density_scale > 0.0) {
            return Err(Error::InvalidArgument("density_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn pos_encoding_len(&self) -> usize {
        encoding_len(self.pos_frequencies)
    }

    pub fn dir_encoding_len(&self) -> usize {
        encoding_len(self.dir_frequencies)
    }
}

pub fn encoding_len(frequencies: usize) -> usize {
    3 + 6 * frequencies
}

/// `[x, sin(2^k pi x), cos(2^k pi x)]` for `k = 0..F`; each frequency block
/// holds the three sines followed by the three cosines.
pub fn encode(x: &Vec3, frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoding_len(frequencies)];
    encode_into(x, frequencies, &mut out);
    out
}

fn encode_into(x: &Vec3, frequencies: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(x.as_slice());
    for f in 0..frequencies {
        let w = (1u64 << f) as f64 * PI;
        let base = 3 + 6 * f;
        for a in 0..3 {
            let (s, c) = (w * x[a]).sin_cos();
            out[base + a] = s;
            out[base + 3 + a] = c;
        }
    }
}

/// Derivative of the encoding with respect to coordinate `axis`.
fn encode_tangent_into(x: &Vec3, frequencies: usize, axis: usize, out: &mut [f64]) {
    out.fill(0.0);
    out[axis] = 1.0;
    for f in 0..frequencies {
        let w = (1u64 << f) as f64 * PI;
        let base = 3 + 6 * f;
        let (s, c) = (w * x[axis]).sin_cos();
        out[base + axis] = w * c;
        out[base + 3 + axis] = -w * s;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    /// Offset of the row-major `inputs x outputs` weight matrix.
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSpec {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }
}

/// Named partition of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub trunk: Vec<LayerSpec>,
    pub density: LayerSpec,
    pub normal: Option<LayerSpec>,
    pub radiance: Vec<LayerSpec>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &FieldConfig) -> Self {
        let mut offset = 0;
        let mut make = |name: String, inputs: usize, outputs: usize| {
            let spec = LayerSpec {
                name,
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
            };
            offset += inputs * outputs + outputs;
            spec
        };
        let mut trunk = Vec::new();
        let mut fan_in = cfg.pos_encoding_len();
        for i in 0..cfg.trunk_layers {
            trunk.push(make(format!("trunk.{i}"), fan_in, cfg.trunk_width));
            fan_in = cfg.trunk_width;
        }
        let density = make("density".into(), cfg.trunk_width, 1);
        let normal = cfg
            .predict_normals
            .then(|| make("normal".into(), cfg.trunk_width, 3));
        let mut radiance = Vec::new();
        let mut fan_in = cfg.trunk_width + cfg.dir_encoding_len();
        for i in 0..cfg.radiance_layers {
            radiance.push(make(format!("radiance.{i}"), fan_in, cfg.radiance_width));
            fan_in = cfg.radiance_width;
        }
        radiance.push(make("radiance.out".into(), fan_in, cfg.n_channels));
        Layout {
            trunk,
            density,
            normal,
            radiance,
            total: offset,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.density))
            .chain(self.normal.iter())
            .chain(self.radiance.iter())
    }
}

/// Per-point field values.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub density: f64,
    pub radiance: Vec<f64>,
    pub predicted_normal: Option<Vec3>,
    pub density_gradient: Vec3,
}

/// Batched field values for `N` points; `density_gradient` covers the first
/// `M <= N` points (those requested with tangents).
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub density: Array1<f64>,
    pub radiance: Array2<f64>,
    pub predicted_normal: Option<Array2<f64>>,
    pub density_gradient: Array2<f64>,
}

/// Adjoints of a downstream scalar with respect to a [`BatchOutput`].
#[derive(Clone, Debug)]
pub struct BatchAdjoint {
    pub density: Array1<f64>,
    pub radiance: Array2<f64>,
    pub predicted_normal: Option<Array2<f64>>,
    pub density_gradient: Option<Array2<f64>>,
}

impl BatchAdjoint {
    pub fn zeros(n: usize, channels: usize, m: usize, normals: bool) -> Self {
        BatchAdjoint {
            density: Array1::zeros(n),
            radiance: Array2::zeros((n, channels)),
            predicted_normal: normals.then(|| Array2::zeros((n, 3))),
            density_gradient: (m > 0).then(|| Array2::zeros((m, 3))),
        }
    }
}

/// Intermediate values retained for the backward pass.
pub struct ForwardCache {
    n: usize,
    m: usize,
    /// Trunk activations `A_0 (encoding) .. A_L`.
    trunk_acts: Vec<Array2<f64>>,
    /// Trunk pre-activations `Z_1 .. Z_L`.
    trunk_pre: Vec<Array2<f64>>,
    /// Tangent activations `T_0 .. T_L`, `3M` rows (axis-major blocks).
    tan_acts: Vec<Array2<f64>>,
    /// Tangent pre-activations.
    tan_pre: Vec<Array2<f64>>,
    density_pre: Array1<f64>,
    density_tan: Array2<f64>,
    normal_raw: Option<Array2<f64>>,
    /// Radiance-branch activations, starting with `[A_L, enc(d)]`.
    rad_acts: Vec<Array2<f64>>,
    rad_pre: Vec<Array2<f64>>,
    radiance: Array2<f64>,
}

/// Trainable parameters plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    layout: Layout,
    params: Vec<f64>,
    seed: u64,
}

impl RadianceField {
    /// He-style uniform initialization `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in layout.layers() {
            let bound = (6.0 / l.inputs as f64).sqrt();
            for w in &mut params[l.weight_offset..l.weight_offset + l.weight_len()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(RadianceField {
            config,
            layout,
            params,
            seed,
        })
    }

    pub fn from_params(config: FieldConfig, params: Vec<f64>, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters supplied, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        Ok(RadianceField {
            config,
            layout,
            params,
            seed,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    fn weight(&self, l: &LayerSpec) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (l.inputs, l.outputs),
            &self.params[l.weight_offset..l.weight_offset + l.weight_len()],
        )
        .expect("layout is consistent")
    }

    fn bias(&self, l: &LayerSpec) -> &[f64] {
        &self.params[l.bias_offset..l.bias_offset + l.outputs]
    }

    /// Sets the density head's weights and bias to zero.
    pub fn zero_density_head(&mut self) {
        let l = self.layout.density.clone();
        self.params[l.weight_offset..l.bias_offset + l.outputs].fill(0.0);
    }

    /// Sets the density head bias (handy for starting nearly transparent).
    pub fn set_density_bias(&mut self, value: f64) {
        let off = self.layout.density.bias_offset;
        self.params[off] = value;
    }

    fn affine(&self, input: &ArrayView2<f64>, l: &LayerSpec) -> Array2<f64> {
        let mut z = input.dot(&self.weight(l));
        let b = self.bias(l);
        for mut row in z.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        z
    }

    fn encode_points(&self, points: &ArrayView2<f64>) -> Array2<f64> {
        let f = self.config.pos_frequencies;
        let mut enc = Array2::zeros((points.nrows(), encoding_len(f)));
        for (p, mut row) in points.rows().into_iter().zip(enc.rows_mut()) {
            let x = Vec3::new(p[0], p[1], p[2]);
            encode_into(&x, f, row.as_slice_mut().expect("standard layout"));
        }
        enc
    }

    /// Trunk to density only (no radiance branch, no tangents).
    pub fn density_batch(&self, points: &ArrayView2<f64>) -> Array1<f64> {
        let act = self.config.activation;
        let mut a = self.encode_points(points);
        for l in &self.layout.trunk {
            let mut z = self.affine(&a.view(), l);
            z.mapv_inplace(|v| act.value(v));
            a = z;
        }
        let z = self.affine(&a.view(), &self.layout.density);
        let scale = self.config.density_scale;
        z.column(0).mapv(|v| scale * softplus(v))
    }

    /// Full forward pass. Tangents (and so `density_gradient`) are computed
    /// for the first `grad_rows` points.
    pub fn forward(
        &self,
        points: &ArrayView2<f64>,
        dirs: &ArrayView2<f64>,
        grad_rows: usize,
    ) -> Result<(BatchOutput, ForwardCache)> {
        let n = points.nrows();
        if dirs.nrows() != n || points.ncols() != 3 || dirs.ncols() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "points {:?} vs dirs {:?}",
                points.dim(),
                dirs.dim()
            )));
        }
        if grad_rows > n {
            return Err(Error::ShapeMismatch(format!(
                "{grad_rows} gradient rows requested for {n} points"
            )));
        }
        let m = grad_rows;
        let act = self.config.activation;
        let f = self.config.pos_frequencies;

        // trunk with tangents
        let enc = self.encode_points(points);
        let mut tan0 = Array2::zeros((3 * m, encoding_len(f)));
        for axis in 0..3 {
            for i in 0..m {
                let p = points.row(i);
                let x = Vec3::new(p[0], p[1], p[2]);
                let mut row = tan0.row_mut(axis * m + i);
                encode_tangent_into(&x, f, axis, row.as_slice_mut().expect("standard layout"));
            }
        }
        let mut trunk_acts = vec![enc];
        let mut trunk_pre = Vec::with_capacity(self.layout.trunk.len());
        let mut tan_acts = vec![tan0];
        let mut tan_pre = Vec::with_capacity(self.layout.trunk.len());
        for l in &self.layout.trunk {
            let z = self.affine(&trunk_acts.last().unwrap().view(), l);
            let zt = tan_acts.last().unwrap().dot(&self.weight(l));
            let a = z.mapv(|v| act.value(v));
            let mut at = zt.clone();
            for axis in 0..3 {
                let mut block = at.slice_mut(s![axis * m..(axis + 1) * m, ..]);
                Zip::from(&mut block)
                    .and(&z.slice(s![..m, ..]))
                    .for_each(|t, &zz| *t *= act.first(zz));
            }
            trunk_pre.push(z);
            trunk_acts.push(a);
            tan_pre.push(zt);
            tan_acts.push(at);
        }
        let h = trunk_acts.last().unwrap();
        let ht = tan_acts.last().unwrap();

        // density and its spatial gradient
        let scale = self.config.density_scale;
        let density_pre = self.affine(&h.view(), &self.layout.density).column(0).to_owned();
        let density = density_pre.mapv(|v| scale * softplus(v));
        let density_tan = ht.dot(&self.weight(&self.layout.density));
        let mut density_gradient = Array2::zeros((m, 3));
        for axis in 0..3 {
            for i in 0..m {
                density_gradient[[i, axis]] =
                    scale * sigmoid(density_pre[i]) * density_tan[[axis * m + i, 0]];
            }
        }

        // predicted normals
        let (normal_raw, predicted_normal) = match &self.layout.normal {
            Some(l) => {
                let raw = self.affine(&h.view(), l);
                let mut unit = raw.clone();
                for mut row in unit.rows_mut() {
                    let norm = row.dot(&row).sqrt().max(1e-12);
                    row.mapv_inplace(|v| v / norm);
                }
                (Some(raw), Some(unit))
            }
            None => (None, None),
        };

        // radiance branch
        let dl = self.config.dir_encoding_len();
        let mut rin = Array2::zeros((n, h.ncols() + dl));
        rin.slice_mut(s![.., ..h.ncols()]).assign(h);
        for i in 0..n {
            let d = Vec3::new(dirs[[i, 0]], dirs[[i, 1]], dirs[[i, 2]]);
            let mut row = rin.row_mut(i);
            let slice = row.as_slice_mut().expect("standard layout");
            encode_into(&d, self.config.dir_frequencies, &mut slice[h.ncols()..]);
        }
        let mut rad_acts = vec![rin];
        let mut rad_pre = Vec::new();
        let last = self.layout.radiance.len() - 1;
        let mut radiance = Array2::zeros((0, 0));
        for (k, l) in self.layout.radiance.iter().enumerate() {
            let z = self.affine(&rad_acts.last().unwrap().view(), l);
            if k == last {
                radiance = z.mapv(sigmoid);
                rad_pre.push(z);
            } else {
                let a = z.mapv(|v| act.value(v));
                rad_pre.push(z);
                rad_acts.push(a);
            }
        }

        let output = BatchOutput {
            density,
            radiance: radiance.clone(),
            predicted_normal,
            density_gradient,
        };
        let cache = ForwardCache {
            n,
            m,
            trunk_acts,
            trunk_pre,
            tan_acts,
            tan_pre,
            density_pre,
            density_tan,
            normal_raw,
            rad_acts,
            rad_pre,
            radiance,
        };
        Ok((output, cache))
    }

    /// Accumulates `dLoss/dtheta` into `grads` given output adjoints.
    pub fn backward(&self, cache: &ForwardCache, adj: &BatchAdjoint, grads: &mut [f64]) -> Result<()> {
        let (n, m) = (cache.n, cache.m);
        if grads.len() != self.layout.total {
            return Err(Error::ShapeMismatch("gradient buffer size".into()));
        }
        if adj.density.len() != n || adj.radiance.dim() != (n, self.config.n_channels) {
            return Err(Error::ShapeMismatch("adjoint shape".into()));
        }
        let act = self.config.activation;
        let tw = self.config.trunk_width;

        // radiance branch
        let mut dz = cache.radiance.clone();
        Zip::from(&mut dz)
            .and(&adj.radiance)
            .for_each(|c, &g| *c = g * *c * (1.0 - *c));
        let mut d_h = Array2::<f64>::zeros((n, tw));
        for k in (0..self.layout.radiance.len()).rev() {
            let l = &self.layout.radiance[k];
            let input = &cache.rad_acts[k];
            self.accumulate_weight_grad(l, &input.view(), &dz.view(), grads);
            let d_in = dz.dot(&self.weight(l).t());
            if k == 0 {
                d_h += &d_in.slice(s![.., ..tw]);
            } else {
                dz = d_in;
                Zip::from(&mut dz)
                    .and(&cache.rad_pre[k - 1])
                    .for_each(|d, &z| *d *= act.first(z));
            }
        }

        // predicted-normal head
        if let (Some(l), Some(raw), Some(g)) =
            (&self.layout.normal, &cache.normal_raw, &adj.predicted_normal)
        {
            let mut dv = Array2::zeros((n, 3));
            for i in 0..n {
                let v = raw.row(i);
                let norm = v.dot(&v).sqrt().max(1e-12);
                let gi = g.row(i);
                let proj = v.dot(&gi) / (norm * norm);
                for c in 0..3 {
                    dv[[i, c]] = (gi[c] - v[c] * proj) / norm;
                }
            }
            let h = cache.trunk_acts.last().unwrap();
            self.accumulate_weight_grad(l, &h.view(), &dv.view(), grads);
            d_h += &dv.dot(&self.weight(l).t());
        }

        // density head, including the tangent stream
        let scale = self.config.density_scale;
        let dl = &self.layout.density;
        let mut dz_sigma = Array2::zeros((n, 1));
        for i in 0..n {
            dz_sigma[[i, 0]] = adj.density[i] * scale * sigmoid(cache.density_pre[i]);
        }
        let mut dzt_sigma = Array2::zeros((3 * m, 1));
        if let Some(gg) = &adj.density_gradient {
            if gg.nrows() != m {
                return Err(Error::ShapeMismatch("density-gradient adjoint rows".into()));
            }
            for axis in 0..3 {
                for i in 0..m {
                    let s = sigmoid(cache.density_pre[i]);
                    let g = gg[[i, axis]];
                    dzt_sigma[[axis * m + i, 0]] = g * scale * s;
                    dz_sigma[[i, 0]] +=
                        g * scale * s * (1.0 - s) * cache.density_tan[[axis * m + i, 0]];
                }
            }
        }
        let h = cache.trunk_acts.last().unwrap();
        let ht = cache.tan_acts.last().unwrap();
        self.accumulate_weight_grad(dl, &h.view(), &dz_sigma.view(), grads);
        if m > 0 {
            self.accumulate_weight_only(dl, &ht.view(), &dzt_sigma.view(), grads);
        }
        let w_sigma = self.weight(dl);
        d_h += &dz_sigma.dot(&w_sigma.t());
        let mut d_ht = dzt_sigma.dot(&w_sigma.t());

        // trunk, last layer first
        let mut d_a = d_h;
        for k in (0..self.layout.trunk.len()).rev() {
            let l = &self.layout.trunk[k];
            let z = &cache.trunk_pre[k];
            let zt = &cache.tan_pre[k];
            let mut dz = d_a;
            Zip::from(&mut dz).and(z).for_each(|d, &zz| *d *= act.first(zz));
            let mut dzt = d_ht;
            if m > 0 {
                for axis in 0..3 {
                    let rows = s![axis * m..(axis + 1) * m, ..];
                    let zm = z.slice(s![..m, ..]);
                    // second-order contribution to the primal pre-activation
                    let mut head = dz.slice_mut(s![..m, ..]);
                    Zip::from(&mut head)
                        .and(&dzt.slice(rows))
                        .and(&zt.slice(rows))
                        .and(&zm)
                        .for_each(|d, &dt, &t, &zz| *d += dt * act.second(zz) * t);
                    Zip::from(&mut dzt.slice_mut(rows))
                        .and(&zm)
                        .for_each(|dt, &zz| *dt *= act.first(zz));
                }
            }
            self.accumulate_weight_grad(l, &cache.trunk_acts[k].view(), &dz.view(), grads);
            if m > 0 {
                self.accumulate_weight_only(l, &cache.tan_acts[k].view(), &dzt.view(), grads);
            }
            if k > 0 {
                let w = self.weight(l);
                d_a = dz.dot(&w.t());
                d_ht = if m > 0 {
                    dzt.dot(&w.t())
                } else {
                    Array2::zeros((0, l.inputs))
                };
            } else {
                break;
            }
        }
        Ok(())
    }

    fn accumulate_weight_grad(
        &self,
        l: &LayerSpec,
        input: &ArrayView2<f64>,
        dz: &ArrayView2<f64>,
        grads: &mut [f64],
    ) {
        self.accumulate_weight_only(l, input, dz, grads);
        let db = dz.sum_axis(Axis(0));
        for (g, v) in grads[l.bias_offset..l.bias_offset + l.outputs]
            .iter_mut()
            .zip(db.iter())
        {
            *g += v;
        }
    }

    fn accumulate_weight_only(
        &self,
        l: &LayerSpec,
        input: &ArrayView2<f64>,
        dz: &ArrayView2<f64>,
        grads: &mut [f64],
    ) {
        let mut gw = ArrayViewMut2::from_shape(
            (l.inputs, l.outputs),
            &mut grads[l.weight_offset..l.weight_offset + l.weight_len()],
        )
        .expect("layout is consistent");
        ndarray::linalg::general_mat_mul(1.0, &input.t(), dz, 1.0, &mut gw);
    }

    /// Single-point query; `d` must be unit length within `1e-6`.
    pub fn query(&self, x: &Vec3, d: &Vec3) -> Result<FieldOutput> {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "view direction must be unit length, |d| = {}",
                d.norm()
            )));
        }
        let p = Array2::from_shape_vec((1, 3), x.as_slice().to_vec()).expect("shape");
        let dv = Array2::from_shape_vec((1, 3), d.as_slice().to_vec()).expect("shape");
        let (out, _) = self.forward(&p.view(), &dv.view(), 1)?;
        let g = out.density_gradient.row(0);
        Ok(FieldOutput {
            density: out.density[0],
            radiance: out.radiance.row(0).to_vec(),
            predicted_normal: out
                .predicted_normal
                .map(|pn| Vec3::new(pn[[0, 0]], pn[[0, 1]], pn[[0, 2]])),
            density_gradient: Vec3::new(g[0], g[1], g[2]),
        })
    }

    /// Forward plus backward in one call: returns outputs, parameter
    /// gradients of the scalar whose adjoints are `upstream`, and `dsigma/dx`
    /// for the first `grad_rows` points.
    pub fn query_batch_with_grad(
        &self,
        points: &ArrayView2<f64>,
        dirs: &ArrayView2<f64>,
        grad_rows: usize,
        upstream: &BatchAdjoint,
    ) -> Result<(BatchOutput, Vec<f64>, Array2<f64>)> {
        let (out, cache) = self.forward(points, dirs, grad_rows)?;
        let mut grads = vec![0.0; self.layout.total];
        self.backward(&cache, upstream, &mut grads)?;
        let dsdx = out.density_gradient.clone();
        Ok((out, grads, dsdx))
    }
}

/// Outward surface normal `-grad / |grad|`, or `None` when the gradient is
/// too small to define a direction.
pub fn derived_normal(density_gradient: &Vec3) -> Option<Vec3> {
    let norm = density_gradient.norm();
    if !(norm >= DEGENERATE_GRADIENT) || !norm.is_finite() {
        return None;
    }
    Some(-density_gradient / norm)
}
