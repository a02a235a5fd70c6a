//! Training loop: Adam with decoupled weight decay, learning-rate schedules,
//! constrained-objective state threading, curve logging, and checkpointing.
//!
//! Training is a pure function of (model config, train config, dataset bytes,
//! seed): every random draw comes from a counter-derived stream, so reruns and
//! checkpoint resumes are bitwise reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::graph::Graph;
use crate::backend::BackendError;
use crate::backend::rng::{RngState, Stream};
use crate::backend::tensor::Tensor;
use crate::io::archive::{self, ArchiveError, Record};
use crate::io::config::{self, ConfigError};
use crate::model::{
    build_parameters, decode_with_latents, posterior_forward, unet_encode, BoundParams,
    ModelConfig, ModelError, ParameterStore, PosteriorMode,
};
use crate::objectives::{
    elbo_loss, geco_step, hierarchical_kl_per_scale, topk_mask, GecoState, ObjectiveError,
    TopkSelection,
};
use crate::synthdata::{colorize_instances, one_hot, DataError, DatasetManifest, TaskParams, TaskSample};

/// Version tag written into checkpoint archives.
pub const CHECKPOINT_VERSION: i32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {message}")]
    InvalidConfig { message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset does not fit the model: {message}")]
    DataModelMismatch { message: String },
    #[error("resume checkpoint was built for a different model configuration")]
    ResumeModelMismatch,
    #[error("non-finite loss at step {step}; last metrics: {record}")]
    NonFiniteLoss { step: usize, record: Box<StepRecord> },
    #[error("no gradient recorded for parameter {name:?}")]
    MissingGradient { name: String },
    #[error("gradient for {name:?} has {got} elements, parameter has {want}")]
    GradientLength { name: String, want: usize, got: usize },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: i32, expected: i32 },
    #[error("malformed checkpoint: {message}")]
    BadCheckpoint { message: String },
    #[error("checkpoint {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        #[source]
        source: ArchiveError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Loss family used for the reconstruction/KL trade-off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `ce + beta * kl` with a fixed weight.
    Elbo { beta: f64 },
    /// Constrained objective with a moving multiplier targeting
    /// `ce_per_pixel = kappa`.
    Geco { kappa: f64 },
}

/// Multiplier-dynamics hyperparameters for the constrained objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GecoSettings {
    pub ema_decay: f64,
    pub step_size: f64,
    pub lambda_init: f64,
    pub lambda_bounds: (f64, f64),
}

impl Default for GecoSettings {
    fn default() -> Self {
        GecoSettings {
            ema_decay: 0.99,
            step_size: 1e-2,
            lambda_init: 1.0,
            lambda_bounds: (1e-6, 1e6),
        }
    }
}

/// Full description of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// `(step, value)` pairs; steps strictly increasing, the first must be 0.
    /// The rate for step `s` comes from the last pair with step <= s.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Decoupled weight decay, applied to kernels only (never biases).
    pub weight_decay: f64,
    pub objective: Objective,
    /// Worst-pixel fraction for the stochastic top-k mask; 1.0 disables
    /// selection entirely (all pixels contribute, no noise drawn).
    pub topk_k: f64,
    pub seed: u64,
    /// Curve-logging cadence in steps (rows at multiples plus the final step).
    pub eval_every: usize,
    /// Numbered-checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub augment_hflip: bool,
    pub augment_translate: bool,
    pub geco: GecoSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 4,
            lr_schedule: vec![(0, 1e-4)],
            weight_decay: 1e-5,
            objective: Objective::Geco { kappa: 0.05 },
            topk_k: 0.02,
            seed: 0,
            eval_every: 10,
            checkpoint_every: 0,
            augment_hflip: false,
            augment_translate: false,
            geco: GecoSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |message: String| Err(TrainError::InvalidConfig { message });
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.lr_schedule.is_empty() {
            return fail("lr_schedule must have at least one (step, value) pair".into());
        }
        if self.lr_schedule[0].0 != 0 {
            return fail(format!(
                "lr_schedule must start at step 0, got step {}",
                self.lr_schedule[0].0
            ));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return fail(format!(
                    "lr_schedule steps must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                ));
            }
        }
        for &(step, value) in &self.lr_schedule {
            if !value.is_finite() || value <= 0.0 {
                return fail(format!("learning rate at step {step} must be positive, got {value}"));
            }
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.topk_k > 0.0 && self.topk_k <= 1.0) {
            return fail(format!("topk_k must lie in (0, 1], got {}", self.topk_k));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        match self.objective {
            Objective::Elbo { beta } => {
                if !beta.is_finite() || beta < 0.0 {
                    return fail(format!("beta must be >= 0, got {beta}"));
                }
            }
            Objective::Geco { kappa } => {
                if !kappa.is_finite() || kappa <= 0.0 {
                    return fail(format!("kappa must be > 0, got {kappa}"));
                }
            }
        }
        let g = &self.geco;
        if !(g.ema_decay > 0.0 && g.ema_decay < 1.0) {
            return fail(format!("geco ema decay must lie in (0, 1), got {}", g.ema_decay));
        }
        if !g.step_size.is_finite() || g.step_size <= 0.0 {
            return fail(format!("geco step size must be > 0, got {}", g.step_size));
        }
        let (lo, hi) = g.lambda_bounds;
        if !(lo > 0.0 && lo.is_finite() && hi >= lo && hi.is_finite()) {
            return fail(format!("geco lambda bounds must satisfy 0 < lo <= hi, got ({lo}, {hi})"));
        }
        if !(g.lambda_init >= lo && g.lambda_init <= hi) {
            return fail(format!(
                "geco lambda init {} outside bounds ({lo}, {hi})",
                g.lambda_init
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based optimization step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.lr_schedule[0].1;
        for &(s, v) in &self.lr_schedule {
            if s <= step {
                lr = v;
            } else {
                break;
            }
        }
        lr
    }

    fn initial_geco(&self) -> GecoState {
        let kappa = match self.objective {
            Objective::Geco { kappa } => kappa,
            Objective::Elbo { .. } => 0.0,
        };
        GecoState {
            lambda: self.geco.lambda_init,
            ema_constraint: 0.0,
            ema_decay: self.geco.ema_decay,
            step_size: self.geco.step_size,
            lambda_bounds: self.geco.lambda_bounds,
            kappa,
        }
    }
}

/// Adam moment estimates, one pair of buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed optimizer steps (bias-correction exponent).
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update: moment tracking, bias correction, and the parameter step.
    /// Decoupled weight decay is applied only to parameters named `*/kernel`,
    /// using the pre-step parameter value.
    pub fn apply(
        &mut self,
        params: &mut ParameterStore<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| TrainError::MissingGradient { name: name.clone() })?;
            let data = tensor.data_mut();
            if grad.len() != data.len() {
                return Err(TrainError::GradientLength {
                    name: name.clone(),
                    want: data.len(),
                    got: grad.len(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; data.len()]);
            let decay = if name.ends_with("/kernel") { weight_decay } else { 0.0 };
            for i in 0..data.len() {
                let g = grad[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p = data[i] as f64;
                let step = lr * m_hat / (v_hat.sqrt() + self.epsilon);
                data[i] = (p - step - lr * decay * p) as f32;
            }
        }
        Ok(())
    }
}

/// Metrics recorded after each optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Completed-update count after this step (first step records 1).
    pub step: usize,
    pub loss: f64,
    /// Masked cross-entropy divided by the number of selected pixels.
    pub ce_per_pixel: f64,
    pub kl_total: f64,
    /// One entry per enabled latent scale, global to local.
    pub kl_per_scale: Vec<f64>,
    /// Multiplier used in this step's loss (beta for the fixed objective).
    pub lambda: f64,
    pub lr: f64,
    /// Number of pixels the top-k mask kept.
    pub selected: usize,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss={} ce_per_pixel={} lambda={} lr={} kl_total={} kl_per_scale={:?} selected={}",
            self.step,
            self.loss,
            self.ce_per_pixel,
            self.lambda,
            self.lr,
            self.kl_total,
            self.kl_per_scale,
            self.selected,
        )
    }
}

/// One assembled training batch.
pub struct Batch {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    /// `[N, H, W]` integer class labels.
    pub targets: Tensor<i32>,
}

fn hflip_f32(t: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = t.clone();
    let (src, dst) = (t.data(), out.data_mut());
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                dst[ci * h * w + y * w + x] = src[ci * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

fn hflip_i32(t: &Tensor<i32>) -> Tensor<i32> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = t.clone();
    let (src, dst) = (t.data(), out.data_mut());
    for y in 0..h {
        for x in 0..w {
            dst[y * w + x] = src[y * w + (w - 1 - x)];
        }
    }
    out
}

fn translate_f32(t: &Tensor<f32>, dx: isize, dy: isize) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = Tensor::zeros(t.shape());
    let (src, dst) = (t.data(), out.data_mut());
    for ci in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y - dy, x - dx);
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    dst[ci * h * w + y as usize * w + x as usize] =
                        src[ci * h * w + sy as usize * w + sx as usize];
                }
            }
        }
    }
    out
}

fn translate_i32(t: &Tensor<i32>, dx: isize, dy: isize) -> Tensor<i32> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(t.shape());
    let (src, dst) = (t.data(), out.data_mut());
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sy, sx) = (y - dy, x - dx);
            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                dst[y as usize * w + x as usize] = src[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// For the inpainting task the class assignment lives in the input's one-hot
/// channels, so a fresh assignment must recolor the visible channels and the
/// target together (the grayscale channel and the mask channel are
/// assignment-independent).
fn recolor_extrapolation_input(
    image: &Tensor<f32>,
    target: &Tensor<i32>,
    mask: &Tensor<f32>,
    num_classes: usize,
) -> Tensor<f32> {
    let (h, w) = (target.shape()[0], target.shape()[1]);
    let oh = one_hot(target, num_classes);
    let mut out = image.clone();
    let dst = out.data_mut();
    for c in 0..num_classes {
        for p in 0..h * w {
            dst[(1 + c) * h * w + p] = oh.data()[c * h * w + p] * (1.0 - mask.data()[p]);
        }
    }
    out
}

/// Draws `batch_size` items: a uniform sample index plus one uniformly drawn
/// target per image (a grader for the graded task, a fresh id assignment for
/// the instance tasks), then optional augmentation (hflip coin, then integer
/// translation up to 1/8 of the side, background-filled).
pub fn assemble_batch(
    manifest: &DatasetManifest,
    samples: &[TaskSample],
    batch_size: usize,
    augment_hflip: bool,
    augment_translate: bool,
    rng: &mut RngState,
) -> Result<Batch, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let num_classes = manifest.num_classes();
    let shape = samples[0].image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut images = Tensor::<f32>::zeros(&[batch_size, c, h, w]);
    let mut targets = Tensor::<i32>::zeros(&[batch_size, h, w]);
    for n in 0..batch_size {
        let sample = &samples[rng.below(samples.len())];
        let (mut image, mut target) = match &manifest.params {
            TaskParams::Lesions { .. } => {
                let grader = rng.below(sample.targets.len());
                (sample.image.clone(), sample.targets[grader].clone())
            }
            TaskParams::Instances { class_ids, .. } => {
                let instances = sample.instances.as_ref().ok_or_else(|| {
                    TrainError::DataModelMismatch {
                        message: "instance task sample is missing its instance map".into(),
                    }
                })?;
                let count = sample.meta.instance_count.unwrap_or(0);
                let target = colorize_instances(instances, count, *class_ids, rng)?;
                (sample.image.clone(), target)
            }
            TaskParams::Extrapolation { class_ids, .. } => {
                let instances = sample.instances.as_ref().ok_or_else(|| {
                    TrainError::DataModelMismatch {
                        message: "extrapolation task sample is missing its instance map".into(),
                    }
                })?;
                let mask = sample.mask.as_ref().ok_or_else(|| {
                    TrainError::DataModelMismatch {
                        message: "extrapolation task sample is missing its column mask".into(),
                    }
                })?;
                let count = sample.meta.instance_count.unwrap_or(0);
                let target = colorize_instances(instances, count, *class_ids, rng)?;
                let image =
                    recolor_extrapolation_input(&sample.image, &target, mask, num_classes);
                (image, target)
            }
        };
        if augment_hflip && rng.coin(0.5) {
            image = hflip_f32(&image);
            target = hflip_i32(&target);
        }
        if augment_translate {
            let range = (h / 8).max(1) as isize;
            let dx = rng.below(2 * range as usize + 1) as isize - range;
            let dy = rng.below(2 * range as usize + 1) as isize - range;
            if dx != 0 || dy != 0 {
                image = translate_f32(&image, dx, dy);
                target = translate_i32(&target, dx, dy);
            }
        }
        images.data_mut()[n * c * h * w..(n + 1) * c * h * w].copy_from_slice(image.data());
        targets.data_mut()[n * h * w..(n + 1) * h * w].copy_from_slice(target.data());
    }
    Ok(Batch { images, targets })
}

fn batch_one_hot(targets: &Tensor<i32>, num_classes: usize) -> Tensor<f32> {
    let (n, h, w) = (targets.shape()[0], targets.shape()[1], targets.shape()[2]);
    let mut out = Tensor::<f32>::zeros(&[n, num_classes, h, w]);
    let plane = num_classes * h * w;
    for b in 0..n {
        let item = Tensor::from_vec(&[h, w], targets.data()[b * h * w..(b + 1) * h * w].to_vec())
            .expect("slice length matches [h, w]");
        let oh = one_hot(&item, num_classes);
        out.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(oh.data());
    }
    out
}

/// Mutable training state: parameters, moments, multiplier, step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParameterStore<f32>,
    pub adam: AdamState,
    pub geco: GecoState,
    /// Completed optimization steps.
    pub step: usize,
}

impl Trainer {
    /// Fresh state with parameters drawn from the init stream of `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self, TrainError> {
        model_cfg.validate()?;
        cfg.validate()?;
        let mut rng = RngState::for_stream(cfg.seed, Stream::Init, 0);
        let params = build_parameters(&model_cfg, &mut rng)?;
        let geco = cfg.initial_geco();
        Ok(Trainer {
            model_cfg,
            cfg,
            params,
            adam: AdamState::new(),
            geco,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.model_cfg.validate()?;
        ckpt.cfg.validate()?;
        Ok(Trainer {
            model_cfg: ckpt.model_cfg,
            cfg: ckpt.cfg,
            params: ckpt.params,
            adam: ckpt.adam,
            geco: ckpt.geco,
            step: ckpt.iteration,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_cfg: self.model_cfg.clone(),
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            geco: self.geco,
            iteration: self.step,
        }
    }

    /// One optimization step. Draws the batch, runs a single posterior
    /// sampling pass, decodes with the posterior z injected (which also
    /// yields the priors conditioned on those z), builds the configured
    /// loss, backpropagates, and applies the optimizer.
    pub fn train_step(
        &mut self,
        manifest: &DatasetManifest,
        samples: &[TaskSample],
    ) -> Result<StepRecord, TrainError> {
        let step_index = self.step;
        let lr = self.cfg.lr_at(step_index);
        let mut rng = RngState::for_stream(self.cfg.seed, Stream::TrainStep, step_index as u64);

        let batch = assemble_batch(
            manifest,
            samples,
            self.cfg.batch_size,
            self.cfg.augment_hflip,
            self.cfg.augment_translate,
            &mut rng,
        )?;
        let onehot = batch_one_hot(&batch.targets, self.model_cfg.num_classes);

        let mut g: Graph<f32> = Graph::new();
        let bound = BoundParams::bind(&mut g, &self.params);
        let image = g.leaf(&batch.images);
        let target_oh = g.leaf(&onehot);
        let (posteriors, zs) = posterior_forward(
            &mut g,
            &bound,
            &self.model_cfg,
            image,
            target_oh,
            PosteriorMode::Sample,
            &mut rng,
        )?;
        let pyramid = unet_encode(&mut g, &bound, &self.model_cfg, image)?;
        let out = decode_with_latents(&mut g, &bound, &self.model_cfg, &pyramid, &zs)?;
        let ce_map = g.softmax_ce_map(out.logits, &batch.targets, None)?;
        let (kl_total, kl_scales) = hierarchical_kl_per_scale(&mut g, &posteriors, &out.priors)?;

        let ce_host: Vec<f32> = g.value(ce_map).to_vec();
        let selection = if (self.cfg.topk_k - 1.0).abs() < 1e-12 {
            TopkSelection {
                mask: vec![1.0f32; ce_host.len()],
                selected: ce_host.len(),
            }
        } else {
            topk_mask(&ce_host, self.cfg.topk_k, &mut rng, None)?
        };
        let ce_selected: f64 = ce_host
            .iter()
            .zip(&selection.mask)
            .map(|(&ce, &m)| ce as f64 * m as f64)
            .sum();
        let ce_per_pixel = ce_selected / selection.selected as f64;

        // Catch divergence before the multiplier update sees the constraint.
        let kl_total_value = g.scalar_value(kl_total) as f64;
        if !ce_per_pixel.is_finite() || !kl_total_value.is_finite() {
            let lambda = match self.cfg.objective {
                Objective::Elbo { beta } => beta,
                Objective::Geco { .. } => self.geco.lambda,
            };
            return Err(TrainError::NonFiniteLoss {
                step: step_index,
                record: Box::new(StepRecord {
                    step: step_index + 1,
                    loss: f64::NAN,
                    ce_per_pixel,
                    kl_total: kl_total_value,
                    kl_per_scale: kl_scales.iter().map(|&v| g.scalar_value(v) as f64).collect(),
                    lambda,
                    lr,
                    selected: selection.selected,
                }),
            });
        }

        let (loss, next_geco, lambda_logged) = match self.cfg.objective {
            Objective::Elbo { beta } => {
                let loss = elbo_loss(&mut g, ce_map, &selection.mask, kl_total, beta)?;
                (loss, self.geco, beta)
            }
            Objective::Geco { .. } => {
                let masked = g.mul_mask(ce_map, selection.mask.clone())?;
                let ce_sum = g.sum_all(masked);
                let lambda_used = self.geco.lambda;
                let (loss, next) = geco_step(&mut g, &self.geco, ce_sum, selection.selected, kl_total)?;
                (loss, next, lambda_used)
            }
        };

        let record = StepRecord {
            step: step_index + 1,
            loss: g.scalar_value(loss) as f64,
            ce_per_pixel,
            kl_total: g.scalar_value(kl_total) as f64,
            kl_per_scale: kl_scales.iter().map(|&v| g.scalar_value(v) as f64).collect(),
            lambda: lambda_logged,
            lr,
            selected: selection.selected,
        };
        if !record.loss.is_finite()
            || !record.ce_per_pixel.is_finite()
            || !record.kl_total.is_finite()
        {
            return Err(TrainError::NonFiniteLoss {
                step: step_index,
                record: Box::new(record),
            });
        }

        g.backward(loss)?;
        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for (name, var) in bound.iter() {
            grads.insert(name.clone(), g.grad(var).to_vec());
        }
        self.adam
            .apply(&mut self.params, &grads, lr, self.cfg.weight_decay)?;
        self.geco = next_geco;
        self.step += 1;
        Ok(record)
    }
}

/// Everything a resumed run needs, plus config echoes for provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParameterStore<f32>,
    pub adam: AdamState,
    pub geco: GecoState,
    pub iteration: usize,
}

fn tensor_record(name: String, tensor: &Tensor<f32>) -> Result<Record, TrainError> {
    let extents: Vec<u32> = tensor.shape().iter().map(|&e| e as u32).collect();
    Ok(Record::f32(name, extents, tensor.data().to_vec())
        .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut records = Vec::new();
    records.push(
        Record::i32("meta/version", vec![1], vec![CHECKPOINT_VERSION])
            .expect("fixed extents"),
    );
    records.push(
        Record::i32("meta/iteration", vec![1], vec![ckpt.iteration as i32])
            .expect("fixed extents"),
    );
    records.push(Record::text(
        "meta/config",
        config::resolved_text(&ckpt.model_cfg, &ckpt.cfg),
    ));
    let mut geco_bytes = Vec::with_capacity(16);
    geco_bytes.extend_from_slice(&ckpt.geco.lambda.to_le_bytes());
    geco_bytes.extend_from_slice(&ckpt.geco.ema_constraint.to_le_bytes());
    records.push(Record::u8("geco/state", vec![16], geco_bytes).expect("fixed extents"));
    records.push(
        Record::u8("adam/t", vec![8], ckpt.adam.t.to_le_bytes().to_vec()).expect("fixed extents"),
    );
    for (name, tensor) in ckpt.params.iter() {
        records.push(tensor_record(format!("params/{name}"), tensor)?);
    }
    for (name, buf) in &ckpt.adam.m {
        let rec = Record::f32(format!("adam/m/{name}"), vec![buf.len() as u32], buf.clone())
            .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
        records.push(rec);
    }
    for (name, buf) in &ckpt.adam.v {
        let rec = Record::f32(format!("adam/v/{name}"), vec![buf.len() as u32], buf.clone())
            .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
        records.push(rec);
    }
    archive::archive_write(path, &records).map_err(|source| TrainError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })
}

fn le_bytes<const N: usize>(rec: &Record, name: &str) -> Result<[u8; N], TrainError> {
    let bytes = rec.as_u8().map_err(|source| TrainError::BadCheckpoint {
        message: source.to_string(),
    })?;
    bytes
        .try_into()
        .map_err(|_| TrainError::BadCheckpoint {
            message: format!("record {name:?} holds {} bytes, expected {N}", bytes.len()),
        })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let records = archive::archive_read(path).map_err(|source| TrainError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })?;
    let need = |name: &str| -> Result<&Record, TrainError> {
        archive::require(&records, name).map_err(|source| TrainError::CheckpointIo {
            path: path.to_path_buf(),
            source,
        })
    };
    let version_rec = need("meta/version")?;
    let version = version_rec
        .as_i32()
        .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
    if version.len() != 1 || version[0] != CHECKPOINT_VERSION {
        return Err(TrainError::CheckpointVersion {
            found: version.first().copied().unwrap_or(-1),
            expected: CHECKPOINT_VERSION,
        });
    }
    let iteration_rec = need("meta/iteration")?;
    let iteration = iteration_rec
        .as_i32()
        .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
    let iteration = match iteration.first() {
        Some(&i) if i >= 0 => i as usize,
        other => {
            return Err(TrainError::BadCheckpoint {
                message: format!("bad iteration record {other:?}"),
            })
        }
    };
    let config_text = need("meta/config")?
        .as_text()
        .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
    let (model_cfg, cfg) = config::parse_config(config_text)?;

    let geco_rec = need("geco/state")?;
    let geco_bytes: [u8; 16] = le_bytes(geco_rec, "geco/state")?;
    let mut geco = cfg.initial_geco();
    geco.lambda = f64::from_le_bytes(geco_bytes[0..8].try_into().unwrap());
    geco.ema_constraint = f64::from_le_bytes(geco_bytes[8..16].try_into().unwrap());

    let t_rec = need("adam/t")?;
    let t_bytes: [u8; 8] = le_bytes(t_rec, "adam/t")?;
    let mut adam = AdamState::new();
    adam.t = u64::from_le_bytes(t_bytes);

    let mut params = ParameterStore::new();
    for rec in &records {
        if let Some(name) = rec.name.strip_prefix("params/") {
            let data = rec
                .as_f32()
                .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
            let tensor = Tensor::from_vec(&rec.shape(), data.to_vec()).map_err(|e| {
                TrainError::BadCheckpoint { message: e.to_string() }
            })?;
            params.insert(name.to_string(), tensor)?;
        } else if let Some(name) = rec.name.strip_prefix("adam/m/") {
            let data = rec
                .as_f32()
                .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
            adam.m.insert(name.to_string(), data.to_vec());
        } else if let Some(name) = rec.name.strip_prefix("adam/v/") {
            let data = rec
                .as_f32()
                .map_err(|source| TrainError::BadCheckpoint { message: source.to_string() })?;
            adam.v.insert(name.to_string(), data.to_vec());
        }
    }
    if params.is_empty() {
        return Err(TrainError::BadCheckpoint {
            message: "checkpoint holds no parameter records".into(),
        });
    }
    Ok(Checkpoint {
        model_cfg,
        cfg,
        params,
        adam,
        geco,
        iteration,
    })
}

/// CSV with one `kl_scale_{i}` column per latent scale after the fixed
/// prefix. Scales disabled for the run report 0, so ablations of the same
/// architecture share one schema.
pub fn curves_csv(model_cfg: &ModelConfig, records: &[StepRecord]) -> String {
    let mut out = String::from("step,ce_per_pixel,lambda,lr,kl_total");
    for i in 0..model_cfg.latent_scales {
        out.push_str(&format!(",kl_scale_{i}"));
    }
    out.push('\n');
    let enabled = model_cfg.enabled_latents();
    for rec in records {
        out.push_str(&format!(
            "{},{},{},{},{}",
            rec.step, rec.ce_per_pixel, rec.lambda, rec.lr, rec.kl_total
        ));
        let mut per_scale = rec.kl_per_scale.iter();
        for i in 0..model_cfg.latent_scales {
            if enabled.contains(&i) {
                let v = per_scale.next().copied().unwrap_or(0.0);
                out.push_str(&format!(",{v}"));
            } else {
                out.push_str(",0");
            }
        }
        out.push('\n');
    }
    out
}

/// Results of a completed (or resumed-and-completed) run.
pub struct RunArtifacts {
    pub checkpoint: Checkpoint,
    /// Every step's metrics, regardless of the logging cadence.
    pub records: Vec<StepRecord>,
    pub curves_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_curves(
    out_dir: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    records: &[StepRecord],
) -> Result<PathBuf, TrainError> {
    let logged: Vec<StepRecord> = records
        .iter()
        .filter(|r| r.step % cfg.eval_every == 0 || r.step == cfg.iterations)
        .cloned()
        .collect();
    let path = out_dir.join("curves.csv");
    write_file(&path, curves_csv(model_cfg, &logged).as_bytes())?;
    Ok(path)
}

/// Runs (or resumes) training: per-step metrics are collected for every
/// step, the curves CSV holds rows at the `eval_every` cadence plus the
/// final step, numbered checkpoints are written at the `checkpoint_every`
/// cadence, and a final checkpoint is always written (for `iterations = 0`
/// that is the initial state). On a non-finite abort the curves collected
/// so far are flushed before the error is returned.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    samples: &[TaskSample],
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<RunArtifacts, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if manifest.num_classes() != model_cfg.num_classes {
        return Err(TrainError::DataModelMismatch {
            message: format!(
                "dataset has {} classes, model expects {}",
                manifest.num_classes(),
                model_cfg.num_classes
            ),
        });
    }
    if manifest.input_channels() != model_cfg.input_channels {
        return Err(TrainError::DataModelMismatch {
            message: format!(
                "dataset provides {} input channels, model expects {}",
                manifest.input_channels(),
                model_cfg.input_channels
            ),
        });
    }
    let mut trainer = match resume {
        Some(ckpt) => {
            if ckpt.model_cfg != *model_cfg {
                return Err(TrainError::ResumeModelMismatch);
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.cfg = cfg.clone();
            t.cfg.validate()?;
            t
        }
        None => Trainer::new(model_cfg.clone(), cfg.clone())?,
    };
    fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let mut records = Vec::new();
    while trainer.step < cfg.iterations {
        match trainer.train_step(manifest, samples) {
            Ok(rec) => records.push(rec),
            Err(e) => {
                let _ = write_curves(out_dir, model_cfg, cfg, &records);
                return Err(e);
            }
        }
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_{:06}.hput", trainer.step));
            save_checkpoint(&path, &trainer.checkpoint())?;
        }
    }

    let curves_path = write_curves(out_dir, model_cfg, cfg, &records)?;
    let checkpoint = trainer.checkpoint();
    let checkpoint_path = out_dir.join("checkpoint_final.hput");
    save_checkpoint(&checkpoint_path, &checkpoint)?;
    Ok(RunArtifacts {
        checkpoint,
        records,
        curves_path,
        checkpoint_path,
    })
}
