//! Fitting a field to posed images and teacher features: ray batches, the
//! combined color and feature loss, the feature-head warm-up freeze, Adam with
//! cosine decay, and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, EVAL_SAMPLES};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetError};
use crate::diffkernel::{adam_step, AdamConfig, AdamState, Gradients, KernelError, LrSchedule, Real, Tape, Tensor, Var};
use crate::field::NeuralField;
use crate::imageio::{self, ImageError};
use crate::renderer::{self, Camera, Ray, RenderConfig, RenderError};
use crate::teacher::{self, FeatureMap, PcaModel, TeacherError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: total {total}, rgb {rgb}, feat {feat}")]
    NonFinite { step: usize, total: f64, rgb: f64, feat: f64 },
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Color and features together from a fresh field.
    Joint,
    /// Features distilled into a field already fitted to color.
    Finetune,
}

/// Feature-loss weight suited to a field trained mainly for color.
pub const LAMBDA_NERF: f64 = 0.001;
/// Mixed into the seed of the stratified-sampling stream.
const JITTER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Feature-loss weight when features matter as much as color.
pub const LAMBDA_BALANCED: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch_rays: usize,
    /// Steps during which only the feature head is updated.
    pub freeze_steps: usize,
    pub lr0: f64,
    pub min_lr: f64,
    pub mode: TrainMode,
    pub seed: u64,
    /// Sampling used while training; `stratified` should normally be on.
    pub render: RenderConfig,
    /// Data-parallel sub-batches per step. Results depend on this number, not
    /// on the thread count.
    pub workers: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: LAMBDA_BALANCED,
            steps: 5000,
            batch_rays: 1024,
            freeze_steps: 1000,
            lr0: 5e-4,
            min_lr: 0.0,
            mode: TrainMode::Joint,
            seed: 0,
            render: RenderConfig { stratified: true, ..RenderConfig::new(1.0, 5.0, 32) },
            workers: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if self.steps == 0 || self.batch_rays == 0 || self.workers == 0 {
            return bad("steps, batch_rays and workers must be positive".into());
        }
        if self.freeze_steps > self.steps {
            return bad(format!("freeze_steps {} exceeds steps {}", self.freeze_steps, self.steps));
        }
        if self.lr0.is_nan() || self.lr0 <= 0.0 || self.min_lr.is_nan() || self.min_lr < 0.0 {
            return bad("learning rates must be positive".into());
        }
        self.render.validate()?;
        Ok(())
    }
}

/// Training views held in memory: colors, processed teacher targets, cameras.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub cameras: Vec<Camera>,
    /// Per view, `H × W × 3` in `[0,1]`.
    pub rgb: Vec<Vec<f32>>,
    /// Per view, processed teacher features at render resolution.
    pub features: Vec<FeatureMap>,
    pub pca: PcaModel,
    /// Dataset view index of each entry.
    pub views: Vec<usize>,
}

impl TrainingData {
    /// Loads the training split and preprocesses its teacher maps down to
    /// `feature_dim` channels.
    pub fn load(dataset: &Dataset, feature_dim: usize) -> Result<Self, TrainError> {
        let views = dataset.split.train.clone();
        let mut cameras = Vec::with_capacity(views.len());
        let mut rgb = Vec::with_capacity(views.len());
        let mut raw = Vec::with_capacity(views.len());
        for &v in &views {
            let cam = dataset.camera(v)?.clone();
            let (w, h, px) = imageio::read_rgb_unit(&dataset.path(&dataset::frame_rel(v)))?;
            if (w, h) != (cam.width, cam.height) {
                return Err(TrainError::Config(format!("frame {v} is {w}×{h} but its camera is {}×{}", cam.width, cam.height)));
            }
            rgb.push(px);
            raw.push(teacher::read_feature_map(&dataset.path(&dataset::teacher_rel(v)))?);
            cameras.push(cam);
        }
        Self::from_parts(cameras, rgb, &raw, feature_dim, views)
    }

    pub fn from_parts(
        cameras: Vec<Camera>,
        rgb: Vec<Vec<f32>>,
        raw_teacher: &[FeatureMap],
        feature_dim: usize,
        views: Vec<usize>,
    ) -> Result<Self, TrainError> {
        let first = cameras.first().ok_or_else(|| TrainError::Config("no training views".into()))?;
        let (h, w) = (first.height, first.width);
        if cameras.iter().any(|c| (c.height, c.width) != (h, w)) {
            return Err(TrainError::Config("training views must share one resolution".into()));
        }
        let (features, pca) = teacher::preprocess_teacher(raw_teacher, feature_dim, h, w)?;
        Ok(Self { cameras, rgb, features, pca, views })
    }

    pub fn pixel_count(&self) -> usize {
        self.cameras.iter().map(|c| c.width * c.height).sum()
    }
}

/// One sampled batch. Targets are row-major `B × 3` and `B × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rays: Vec<Ray>,
    pub rgb: Vec<f64>,
    pub feat: Vec<f64>,
}

/// Draws `size` pixels uniformly over all training (view, pixel) pairs, with
/// replacement.
pub fn make_batch(data: &TrainingData, size: usize, rng: &mut impl Rng) -> Result<Batch, TrainError> {
    let total = data.pixel_count();
    let c = data.pca.output_dim;
    let mut batch = Batch { rays: Vec::with_capacity(size), rgb: Vec::with_capacity(size * 3), feat: Vec::with_capacity(size * c) };
    for _ in 0..size {
        let mut idx = rng.random_range(0..total);
        let mut view = 0;
        while idx >= data.cameras[view].width * data.cameras[view].height {
            idx -= data.cameras[view].width * data.cameras[view].height;
            view += 1;
        }
        let cam = &data.cameras[view];
        let (row, col) = (idx / cam.width, idx % cam.width);
        let mut ray = renderer::generate_ray(cam, view, row, col)?;
        ray.view = data.views[view];
        batch.rays.push(ray);
        batch.rgb.extend(data.rgb[view][idx * 3..idx * 3 + 3].iter().map(|&v| v as f64));
        batch.feat.extend(data.features[view].pixel(row, col));
    }
    Ok(batch)
}

/// Loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rgb: Var,
    pub feat: Var,
}

/// Squared error summed and divided by `rows · channels`; with `rows` equal to
/// the batch size this is the mean. Sub-batches pass the full batch size so
/// their losses add up to the full-batch loss.
fn squared_error<T: Real>(tape: &mut Tape<T>, pred: Var, target: Tensor<T>, rows: usize) -> Result<Var, KernelError> {
    let cols = tape.value(pred).cols();
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::lit(1.0 / (rows * cols) as f64)))
}

fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    pred_rgb: Var,
    pred_feat: Var,
    target_rgb: Tensor<T>,
    target_feat: Tensor<T>,
    lambda: f64,
    rows: usize,
) -> Result<LossVars, KernelError> {
    let rgb = squared_error(tape, pred_rgb, target_rgb, rows)?;
    let feat = squared_error(tape, pred_feat, target_feat, rows)?;
    let weighted = tape.scale(feat, T::lit(lambda));
    let total = tape.add(rgb, weighted)?;
    Ok(LossVars { total, rgb, feat })
}

/// Mean-squared color and feature losses and `rgb + λ·feat`.
pub fn compute_loss<T: Real>(
    tape: &mut Tape<T>,
    pred_rgb: Var,
    pred_feat: Var,
    target_rgb: Tensor<T>,
    target_feat: Tensor<T>,
    lambda: f64,
) -> Result<LossVars, KernelError> {
    let rows = tape.value(pred_rgb).rows();
    if target_rgb.dims() != tape.value(pred_rgb).dims() || target_feat.dims() != tape.value(pred_feat).dims() {
        return Err(KernelError::Shape("loss targets do not match predictions".into()));
    }
    combined_loss(tape, pred_rgb, pred_feat, target_rgb, target_feat, lambda, rows)
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub rgb: f64,
    pub feat: f64,
    pub lr: f64,
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "step,total,rgb,feat,lr").map_err(io)?;
    for r in log {
        writeln!(out, "{},{},{},{},{}", r.step, r.total, r.rgb, r.feat, r.lr).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainRun<T> {
    pub field: NeuralField<T>,
    pub log: Vec<LossRecord>,
    /// Global norm of the feature-head gradient at the first step.
    pub initial_feature_grad_norm: f64,
}

struct StepResult<T> {
    grads: Gradients<T>,
    total: f64,
    rgb: f64,
    feat: f64,
}

fn slice_rows(data: &[f64], start: usize, end: usize, cols: usize) -> &[f64] {
    &data[start * cols..end * cols]
}

/// Traces one sub-batch and returns its gradients and loss parts.
#[allow(clippy::too_many_arguments)]
fn trace_chunk<T: Real>(
    field: &NeuralField<T>,
    batch: &Batch,
    range: std::ops::Range<usize>,
    cfg: &TrainConfig,
    trainable: &(dyn Fn(crate::diffkernel::ParamId) -> bool + Sync),
    rng: &mut ChaCha8Rng,
) -> Result<StepResult<T>, TrainError> {
    let c = field.config().feature_dim;
    let rays = &batch.rays[range.clone()];
    let mut tape = Tape::new(true);
    let bound = field.bind_with(&mut tape, trainable);
    let out = renderer::render_batch(field, &mut tape, &bound, rays, &cfg.render, None, Some(rng))?;
    let target_rgb = Tensor::from_f64(&[rays.len(), 3], slice_rows(&batch.rgb, range.start, range.end, 3))?;
    let target_feat = Tensor::from_f64(&[rays.len(), c], slice_rows(&batch.feat, range.start, range.end, c))?;
    let loss = combined_loss(&mut tape, out.rgb, out.feat, target_rgb, target_feat, cfg.lambda, batch.rays.len())?;
    let grads = tape.backward(loss.total)?;
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    Ok(StepResult { grads, total: scalar(loss.total), rgb: scalar(loss.rgb), feat: scalar(loss.feat) })
}

/// Optimizes `field` in place. Until `freeze_steps`, only feature-head
/// parameters receive updates; frozen tensors are left bit-identical.
pub fn train<T: Real>(
    data: &TrainingData,
    mut field: NeuralField<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainRun<T>, TrainError> {
    cfg.validate()?;
    if field.config().feature_dim != data.pca.output_dim {
        return Err(TrainError::Config(format!(
            "field has {} feature channels but teacher targets have {}",
            field.config().feature_dim,
            data.pca.output_dim
        )));
    }
    let schedule = LrSchedule::new(cfg.lr0, cfg.steps, cfg.min_lr)?;
    let mut state = AdamState::new(field.params());
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut initial_feature_grad_norm = 0.0;
    let workers = cfg.workers.min(cfg.batch_rays);

    for step in 0..cfg.steps {
        let lr = schedule.lr(step);
        let frozen = step < cfg.freeze_steps;
        let feature_ids: Vec<_> = field.params().ids().filter(|&id| field.is_feature_head(id)).collect();
        let trainable = move |id| !frozen || feature_ids.contains(&id);
        let batch = make_batch(data, cfg.batch_rays, &mut batch_rng)?;

        let bounds: Vec<_> = (0..workers)
            .map(|w| (w * cfg.batch_rays / workers)..((w + 1) * cfg.batch_rays / workers))
            .collect();
        let results: Vec<StepResult<T>> = bounds
            .into_par_iter()
            .map(|range| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ JITTER_SALT);
                rng.set_stream(step as u64);
                // one 64-bit draw per sample, so ray i's jitter is the same for any split
                rng.set_word_pos((range.start * cfg.render.n_samples * 2) as u128);
                trace_chunk(&field, &batch, range, cfg, &trainable, &mut rng)
            })
            .collect::<Result<_, _>>()?;

        let mut it = results.into_iter();
        let mut acc = it.next().expect("at least one worker");
        for r in it {
            acc.grads.accumulate(&r.grads);
            acc.total += r.total;
            acc.rgb += r.rgb;
            acc.feat += r.feat;
        }
        if !(acc.total.is_finite() && acc.rgb.is_finite() && acc.feat.is_finite()) {
            return Err(TrainError::NonFinite { step, total: acc.total, rgb: acc.rgb, feat: acc.feat });
        }
        if step == 0 {
            let head = field.feature_layer();
            initial_feature_grad_norm = [head.weight, head.bias]
                .iter()
                .filter_map(|&id| acc.grads.get(id))
                .map(|g| g.norm().powi(2))
                .sum::<f64>()
                .sqrt();
        }
        adam_step(field.params_mut(), &acc.grads, &mut state, lr, &cfg.adam, &trainable)?;
        let record = LossRecord { step, total: acc.total, rgb: acc.rgb, feat: acc.feat, lr };
        if step % 250 == 0 || step + 1 == cfg.steps {
            log::info!("step {step}: total {:.5} rgb {:.5} feat {:.5} lr {:.2e}", acc.total, acc.rgb, acc.feat, lr);
        }
        on_step(&record);
        log.push(record);
    }
    Ok(TrainRun { field, log, initial_feature_grad_norm })
}

/// Color-only pretraining followed by feature distillation, the two-stage
/// recipe behind [`TrainMode::Finetune`].
pub fn train_finetune<T: Real>(
    data: &TrainingData,
    field: NeuralField<T>,
    pretrain_steps: usize,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainRun<T>, TrainError> {
    let pre_cfg = TrainConfig { lambda: 0.0, steps: pretrain_steps, freeze_steps: 0, mode: TrainMode::Joint, ..cfg.clone() };
    let pre = train(data, field, &pre_cfg, &mut on_step)?;
    let offset = pretrain_steps;
    let run = train(data, pre.field, cfg, |r| on_step(&LossRecord { step: r.step + offset, ..*r }))?;
    let mut log = pre.log;
    log.extend(run.log.iter().map(|r| LossRecord { step: r.step + offset, ..*r }));
    Ok(TrainRun { log, ..run })
}

/// Stratified training samples spanning every camera's view of the scene
/// bounds, over the scene background.
pub fn dataset_render_config(dataset: &Dataset, n_samples: usize) -> RenderConfig {
    RenderConfig {
        stratified: true,
        background: dataset.scene.background,
        ..RenderConfig::fit_to_bounds(&dataset.scene.bounds, &dataset.cameras, n_samples)
    }
}

/// Deterministic render settings for a trained field: the training depth
/// range and background, bin midpoints.
pub fn eval_render_config(train: &RenderConfig, n_samples: usize) -> RenderConfig {
    RenderConfig { stratified: false, n_samples, ..train.clone() }
}
