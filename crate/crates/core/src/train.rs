//! Two-stage optimization: full-frame pre-training followed by mask-restricted
//! fine-tuning, with Adam, an exponential learning-rate schedule per stage and
//! bit-exact checkpoint/resume. Camera poses are inputs only; the optimizer
//! sees nothing but the field parameters.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::field::{FieldConfig, RadianceField};
use crate::geometry::{self, Aabb, Ray};
use crate::losses::{self, LossReport, LossWeights, COSINE_EPS};
use crate::render::{self, BatchRender, FieldFrame, RaySamples, RenderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }

    fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Finetune),
            t => Err(Error::parse("checkpoint", format!("unknown stage tag {t}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub rays_per_batch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    /// Separate multipliers for the fine-tune stage; `None` reuses `weights`.
    pub finetune_weights: Option<LossWeights>,
    pub seed: u64,
    /// Steps between loss lines in the log.
    pub eval_interval: usize,
    /// Rays per batch on which density gradients (and the normal losses)
    /// are evaluated.
    pub normal_rays: usize,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Initial density-head bias; negative values start more transparent.
    pub density_bias_init: f64,
    /// Fine-tuning updates only the radiance head; trunk, density and normal
    /// heads keep their pre-trained values.
    pub freeze_geometry_in_finetune: bool,
    pub field: FieldConfig,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_iters: 3000,
            finetune_iters: 3000,
            rays_per_batch: 1024,
            lr_init: 5e-4,
            lr_final: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-10,
            weights: LossWeights::default(),
            finetune_weights: None,
            seed: 0,
            eval_interval: 100,
            normal_rays: 64,
            grad_clip: None,
            density_bias_init: 0.0,
            freeze_geometry_in_finetune: true,
            field: FieldConfig::new(1),
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 {
            return Err(Error::InvalidArgument("rays_per_batch must be >= 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("adam_eps must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::InvalidArgument("eval_interval must be >= 1".into()));
        }
        self.weights.validate()?;
        if let Some(w) = &self.finetune_weights {
            w.validate()?;
        }
        self.render.validate()
    }

    pub fn iters(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.pretrain_iters,
            Stage::Finetune => self.finetune_iters,
        }
    }

    pub fn stage_weights(&self, stage: Stage) -> LossWeights {
        match stage {
            Stage::Pretrain => self.weights,
            Stage::Finetune => self.finetune_weights.unwrap_or(self.weights),
        }
    }

    /// `lr_init * (lr_final / lr_init)^(step / total)`.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr_init;
        }
        self.lr_init * (self.lr_final / self.lr_init).powf(step as f64 / total as f64)
    }
}

/// Adam moments for the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step_from(0, params, grads, lr, beta1, beta2, eps);
    }

    /// Like [`step`](Self::step) but leaves parameters (and moments) below
    /// `start` untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn step_from(
        &mut self,
        start: usize,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in start..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub stage: Stage,
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub field: RadianceField,
    pub frame: FieldFrame,
    /// Scene bounds in meters.
    pub bounds: Aabb,
    pub wavelengths: Vec<f64>,
    pub adam: AdamState,
    pub stage: Stage,
    /// Completed steps within `stage`.
    pub step: usize,
    pub seed: u64,
    /// Loss reports of this process (not checkpointed).
    pub history: Vec<LogEntry>,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut fc = cfg.field.clone();
        fc.n_channels = data.bands();
        let mut field = RadianceField::new(fc, cfg.seed)?;
        field.set_density_bias(cfg.density_bias_init);
        let n = field.n_params();
        Ok(TrainState {
            field,
            frame: FieldFrame::from_aabb(&data.aabb),
            bounds: data.aabb,
            wavelengths: data.wavelengths().to_vec(),
            adam: AdamState::new(n),
            stage: Stage::Pretrain,
            step: 0,
            seed: cfg.seed,
            history: Vec::new(),
        })
    }

    /// Scene bounds in the field frame, padded for near/far.
    pub fn field_bounds(&self, padding: f64) -> Aabb {
        self.frame.aabb_to_field(&self.bounds).padded(padding)
    }
}

/// One supervised ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RaySample {
    pub view: usize,
    pub row: usize,
    pub col: usize,
    pub ray: Ray,
    pub target: Vec<f64>,
}

/// Pixels eligible for sampling in a stage.
pub struct RayPool {
    views: Vec<usize>,
    /// `(view slot, pixel index)` of every masked pixel, fine-tune only.
    masked: Option<Vec<(u32, u32)>>,
    pixels_per_view: usize,
}

impl RayPool {
    pub fn new(data: &Dataset, stage: Stage) -> Result<Self> {
        let views = data.split.train.clone();
        let pixels_per_view = data.camera.pixel_count();
        let masked = match stage {
            Stage::Pretrain => None,
            Stage::Finetune => {
                if !data.has_masks(&views) {
                    return Err(Error::InvalidArgument(
                        "fine-tuning needs foreground masks for every training view".into(),
                    ));
                }
                let mut list = Vec::new();
                for (slot, &v) in views.iter().enumerate() {
                    let m = data.masks[v].as_ref().expect("checked above");
                    list.extend(m.indices().into_iter().map(|p| (slot as u32, p as u32)));
                }
                if list.is_empty() {
                    return Err(Error::EmptyRegion("union of training masks is empty".into()));
                }
                Some(list)
            }
        };
        Ok(RayPool {
            views,
            masked,
            pixels_per_view,
        })
    }

    pub fn len(&self) -> usize {
        match &self.masked {
            Some(m) => m.len(),
            None => self.views.len() * self.pixels_per_view,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let k = rng.gen_range(0..self.len());
        match &self.masked {
            Some(m) => (self.views[m[k].0 as usize], m[k].1 as usize),
            None => (self.views[k / self.pixels_per_view], k % self.pixels_per_view),
        }
    }
}

/// Uniform draws (with replacement) from the stage's pixel pool.
pub fn sample_ray_batch<R: Rng>(
    data: &Dataset,
    pool: &RayPool,
    count: usize,
    rng: &mut R,
) -> Result<Vec<RaySample>> {
    let w = data.camera.width;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (view, p) = pool.draw(rng);
        let (row, col) = (p / w, p % w);
        let ray = geometry::pixel_ray(&data.camera, &data.poses[view], col, row);
        let target = data.cubes[view].pixel(row, col).iter().map(|v| *v as f64).collect();
        out.push(RaySample {
            view,
            row,
            col,
            ray,
            target,
        });
    }
    Ok(out)
}

/// Per-step generator so that any step can be replayed from its index.
pub fn step_rng(seed: u64, stage: Stage, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage.tag() << 48 | step as u64);
    rng
}

/// Composite objective on planned samples: value, per-term report and
/// parameter gradient. Sample positions are treated as constants.
pub fn batch_loss(
    field: &RadianceField,
    samples: Vec<RaySamples>,
    targets: &Array2<f64>,
    weights: &LossWeights,
    normal_rays: usize,
    background: f64,
) -> Result<(LossReport, Vec<f64>)> {
    let want_normals = weights.ori > 0.0 || weights.pn > 0.0;
    let render = BatchRender::forward(field, samples, if want_normals { normal_rays } else { 0 }, background)?;
    let r = render.n_rays();
    let colors = render.colors();
    let mask = vec![true; r];
    let mut report = LossReport {
        batch_size: r,
        mask_coverage: 1.0,
        ..LossReport::default()
    };

    let (l_hsi, g_hsi) = losses::loss_hsi(&colors.view(), &targets.view(), &mask)?;
    let (l_ang, g_ang) = losses::loss_angular(&colors.view(), &targets.view(), &mask, COSINE_EPS)?;
    report.hsi = l_hsi;
    report.ang = l_ang;
    let grad_colors = g_hsi * weights.hsi + g_ang * weights.ang;

    let total_samples = *render.offsets.last().unwrap();
    let mut grad_w = vec![0.0; total_samples];
    let flat_w: Vec<f64> = render.rays.iter().flat_map(|o| o.weights.iter().copied()).collect();
    if r > 0 {
        let mut dist = 0.0;
        for (k, s) in render.samples.iter().enumerate() {
            if s.is_empty() {
                continue;
            }
            let (a, b) = (render.offsets[k], render.offsets[k + 1]);
            let (v, g) = losses::distortion(&s.s_mid(), &s.s_deltas(), &flat_w[a..b]);
            dist += v;
            for (i, gi) in g.into_iter().enumerate() {
                grad_w[a + i] += weights.dist * gi / r as f64;
            }
        }
        report.dist = dist / r as f64;
    }

    let m = render.normal_samples();
    let mut grad_dn = None;
    let mut grad_pn = None;
    if m > 0 {
        let derived = render.derived_normals();
        let dirs = render.normal_sample_dirs();
        let w = &flat_w[..m];
        let (l_ori, g_ori) = losses::loss_orientation(&derived, &dirs, w);
        report.ori = l_ori;
        let mut gdn: Vec<_> = g_ori.normals.iter().map(|g| g * weights.ori).collect();
        for i in 0..m {
            grad_w[i] += weights.ori * g_ori.weights[i];
        }
        if let Some(pred) = render.predicted_normals() {
            let (l_pn, g_pn, g_pred) =
                losses::loss_predicted_normal(&pred, &derived, w, &render.offsets[..=render.normal_rays]);
            report.pn = l_pn;
            for i in 0..m {
                gdn[i] += g_pn.normals[i] * weights.pn;
                grad_w[i] += weights.pn * g_pn.weights[i];
            }
            grad_pn = Some(g_pred.into_iter().map(|g| g * weights.pn).collect::<Vec<_>>());
        }
        grad_dn = Some(gdn);
    }
    report.total = weights.hsi * report.hsi
        + weights.ang * report.ang
        + weights.dist * report.dist
        + weights.ori * report.ori
        + weights.pn * report.pn;

    let mut grads = vec![0.0; field.n_params()];
    render.backward(
        field,
        &grad_colors.view(),
        Some(&grad_w),
        grad_dn.as_deref(),
        grad_pn.as_deref(),
        &mut grads,
    )?;
    Ok((report, grads))
}

/// Runs up to `max_steps` further steps of `stage`, stopping at the stage's
/// configured iteration count.
pub fn train_steps(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &Dataset,
    stage: Stage,
    max_steps: usize,
) -> Result<()> {
    cfg.validate()?;
    if state.stage != stage {
        state.stage = stage;
        state.step = 0;
    }
    let total = cfg.iters(stage);
    if state.step >= total || max_steps == 0 {
        return Ok(());
    }
    let pool = RayPool::new(data, stage)?;
    let weights = cfg.stage_weights(stage);
    let fb = state.field_bounds(cfg.render.aabb_padding);
    let end = state.step.saturating_add(max_steps).min(total);
    let frozen = stage == Stage::Finetune && cfg.freeze_geometry_in_finetune;
    // The normal losses only reach frozen parameters.
    let normal_rays = if frozen { 0 } else { cfg.normal_rays };
    let first_trainable = if frozen {
        state.field.layout().radiance[0].weight_offset
    } else {
        0
    };
    while state.step < end {
        let step = state.step;
        let mut rng = step_rng(state.seed, stage, step);
        let batch = sample_ray_batch(data, &pool, cfg.rays_per_batch, &mut rng)?;
        let rays: Vec<Ray> = batch.iter().map(|b| state.frame.ray_to_field(&b.ray)).collect();
        let mut targets = Array2::zeros((batch.len(), data.bands()));
        for (i, b) in batch.iter().enumerate() {
            for (c, v) in b.target.iter().enumerate() {
                targets[[i, c]] = *v;
            }
        }
        let samples = render::plan_samples(&state.field, &rays, &fb, &cfg.render, &mut rng)?;
        let (mut report, mut grads) =
            batch_loss(&state.field, samples, &targets, &weights, normal_rays, cfg.render.background)?;
        if !report.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{stage} stage: {report:?}"),
            });
        }
        report.mask_coverage = coverage(data, &batch);
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                grads.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let lr = cfg.learning_rate(step, total);
        state.adam.step_from(
            first_trainable,
            state.field.params_mut(),
            &grads,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        );
        state.step += 1;
        if state.step % cfg.eval_interval == 0 || state.step == total {
            log::info!(
                "{stage} {}/{total}: total {:.5} hsi {:.5} ang {:.5} lr {lr:.2e}",
                state.step,
                report.total,
                report.hsi,
                report.ang
            );
        }
        state.history.push(LogEntry {
            stage,
            step: state.step,
            lr,
            report,
        });
    }
    Ok(())
}

fn coverage(data: &Dataset, batch: &[RaySample]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inside = batch
        .iter()
        .filter(|b| data.masks[b.view].as_ref().map_or(true, |m| m.get(b.row, b.col)))
        .count();
    inside as f64 / batch.len() as f64
}

/// Runs the remaining iterations of `stage`.
pub fn train_stage(mut state: TrainState, cfg: &TrainConfig, data: &Dataset, stage: Stage) -> Result<TrainState> {
    if cfg.weights.prop > 0.0 && stage == Stage::Pretrain && state.step == 0 {
        log::warn!("lambda_prop has no effect: sampling uses a coarse pass of the same field");
    }
    train_steps(&mut state, cfg, data, stage, usize::MAX)?;
    Ok(state)
}

/// Pre-training on full frames, then fine-tuning on masked pixels.
pub fn two_stage(cfg: &TrainConfig, data: &Dataset) -> Result<TrainState> {
    let state = TrainState::init(cfg, data)?;
    let state = train_stage(state, cfg, data, Stage::Pretrain)?;
    train_stage(state, cfg, data, Stage::Finetune)
}

const MAGIC: &[u8; 8] = b"HYFIELD\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    field: FieldConfig,
    frame: FieldFrame,
    bounds: Aabb,
    wavelengths: Vec<f64>,
    init_seed: u64,
}

/// Binary checkpoint: magic, version, JSON metadata, then the stage, step,
/// train seed, parameters and Adam moments as little-endian words.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        field: state.field.config().clone(),
        frame: state.frame,
        bounds: state.bounds,
        wavelengths: state.wavelengths.clone(),
        init_seed: state.field.seed(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::with_capacity(64 + json.len() + 24 * state.field.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for w in [
        state.stage.tag(),
        state.step as u64,
        state.seed,
        state.adam.t,
        state.field.n_params() as u64,
    ] {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for v in state.field.params().iter().chain(&state.adam.m).chain(&state.adam.v) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Error::ensure_parent(path)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut cur = Cursor { bytes: &bytes, pos: 0, ctx: &ctx };
    if cur.take(8)? != MAGIC {
        return Err(Error::parse(ctx.clone(), "not a field checkpoint"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::parse(ctx.clone(), format!("unsupported version {version}")));
    }
    let len = cur.u64()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(cur.take(len)?).map_err(|e| Error::parse(ctx.clone(), e.to_string()))?;
    let stage = Stage::from_tag(cur.u64()?)?;
    let step = cur.u64()? as usize;
    let seed = cur.u64()?;
    let t = cur.u64()?;
    let n = cur.u64()? as usize;
    let read_vec = |cur: &mut Cursor| -> Result<Vec<f64>> { (0..n).map(|_| cur.f64()).collect() };
    let params = read_vec(&mut cur)?;
    let m = read_vec(&mut cur)?;
    let v = read_vec(&mut cur)?;
    if cur.pos != bytes.len() {
        return Err(Error::parse(ctx.clone(), "trailing bytes"));
    }
    let field = RadianceField::from_params(meta.field, params, meta.init_seed)?;
    Ok(TrainState {
        field,
        frame: meta.frame,
        bounds: meta.bounds,
        wavelengths: meta.wavelengths,
        adam: AdamState { m, v, t },
        stage,
        step,
        seed,
        history: Vec::new(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.ctx.to_string(), "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
