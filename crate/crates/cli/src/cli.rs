//! Batch commands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use n3f::apps::{self, AppThresholds, FeatureSource};
use n3f::dataset::{self, Dataset};
use n3f::field::{init_field, FieldConfig};
use n3f::imageio;
use n3f::synthscene::{self, NoiseConfig, SceneSpec};
use n3f::teacher::{self, FeatureMap};
use n3f::trainer::{self, Checkpoint, CheckpointMeta, TrainConfig, TrainMode, TrainingData};

use crate::pipeline;

#[derive(Debug, Parser)]
#[command(name = "n3f", version, about = "Neural feature fields: synthesize, train, render, query, evaluate")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a scene description.
    Synth(SynthArgs),
    /// Distill teacher features into a field.
    Train(TrainArgs),
    /// Render color, features, depth and opacity for one view.
    Render(RenderArgs),
    /// Distance heatmap and match mask for a region query.
    Query(QueryArgs),
    /// Retrieval mAP of teacher maps or of a trained field.
    Eval(EvalArgs),
    /// Extract the 3D region matching a query as a PLY point cloud.
    Segment3d(SegmentArgs),
    /// Render a view with the matching object removed.
    Edit(OverrideArgs),
    /// Opacity mask of the matching object seen through its occluders.
    Amodal(OverrideArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene JSON, or `desk` for the built-in table-top scene.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Teacher corruption as `bias_std,pixel_std,blur_radius`.
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<(f64, f64, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Joint,
    Finetune,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = trainer::LAMBDA_BALANCED)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Defaults to 1000, capped at `--steps`.
    #[arg(long)]
    pub freeze_steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Joint)]
    pub mode: ModeArg,
    /// Color-only steps before distillation in finetune mode; defaults to `--steps`.
    #[arg(long, conflicts_with = "init")]
    pub pretrain_steps: Option<usize>,
    /// Start from this checkpoint's field instead of a fresh initialization;
    /// in finetune mode it replaces the color-only stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1024)]
    pub batch_rays: usize,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Feature channels after PCA; defaults to min(64, teacher channels).
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 10)]
    pub pos_freqs: usize,
    #[arg(long, default_value_t = 4)]
    pub dir_freqs: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub view: usize,
    /// Writes `<P>_rgb.png`, `<P>_feat.n3fm`, `<P>_depth.png`, `<P>_acc.png`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// View the query mask is drawn on.
    #[arg(long)]
    pub view: usize,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub tau: f64,
    /// View to search; defaults to `--view`.
    #[arg(long)]
    pub target_view: Option<usize>,
    /// Heatmap PNG; the match mask goes to `<stem>_match.png` and the raw
    /// distances to `<stem>.f32`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "teacher", required_unless_present = "teacher")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub teacher: bool,
    /// Report JSON; the per-triple CSV is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DescriptorArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// View the descriptor mask is drawn on.
    #[arg(long)]
    pub desc_view: usize,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub tau_phi: f64,
    /// Compare unit vectors instead of raw features.
    #[arg(long)]
    pub normalize_3d: bool,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub desc: DescriptorArgs,
    #[arg(long)]
    pub tau_sigma: f64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverrideArgs {
    #[command(flatten)]
    pub desc: DescriptorArgs,
    /// View to render.
    #[arg(long)]
    pub view: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Static web UI directory served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

fn parse_noise(s: &str) -> Result<(f64, f64, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [b, p, r] = parts.as_slice() else {
        return Err(format!("expected bias_std,pixel_std,blur_radius, got {s:?}"));
    };
    let num = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(b)?, num(p)?, r.parse().map_err(|e| format!("{r:?}: {e}"))?))
}

/// Runs a parsed command, printing a one-line summary on success.
pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Segment3d(a) => segment(a),
        Command::Edit(a) => edit(a, false),
        Command::Amodal(a) => edit(a, true),
        Command::Serve(a) => crate::server::serve_blocking(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = if a.spec == "desk" {
        synthscene::desk_spec(0)
    } else {
        SceneSpec::load(Path::new(&a.spec))?
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some((bias_std, pixel_std, blur_radius)) = a.noise {
        spec.noise = NoiseConfig { bias_std, pixel_std, blur_radius, ..spec.noise };
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let emitted = synthscene::emit_dataset(&spec, &a.out)?;
    println!("wrote {} views to {}", emitted.views, a.out.display());
    Ok(())
}

fn teacher_channels(ds: &Dataset) -> Result<usize> {
    let v = ds.split.train[0];
    Ok(teacher::read_feature_map(&ds.path(&dataset::teacher_rel(v)))?.channels())
}

/// `ckpt.n3fc` → `ckpt.loss.csv`
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let init = a.init.as_deref().map(trainer::load_checkpoint).transpose()?;
    let field_cfg = match &init {
        Some(c) => c.meta.field.clone(),
        None => FieldConfig {
            pos_freqs: a.pos_freqs,
            dir_freqs: a.dir_freqs,
            trunk_layers: a.layers,
            trunk_width: a.width,
            feature_dim: match a.feature_dim {
                Some(d) => d,
                None => teacher_channels(&ds)?.min(64),
            },
            include_input: true,
        },
    };
    let feature_dim = field_cfg.feature_dim;
    let data = TrainingData::load(&ds, feature_dim)?;
    let cfg = TrainConfig {
        lambda: a.lambda,
        steps: a.steps,
        batch_rays: a.batch_rays,
        freeze_steps: a.freeze_steps.unwrap_or(TrainConfig::default().freeze_steps.min(a.steps)),
        lr0: a.lr,
        mode: match a.mode {
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::Finetune => TrainMode::Finetune,
        },
        seed: a.seed,
        render: trainer::dataset_render_config(&ds, a.samples),
        workers: a.workers,
        ..TrainConfig::default()
    };
    let resumed = init.is_some();
    let (field, prior_steps) = match init {
        Some(c) => (c.field, c.meta.step),
        None => (init_field::<f32>(&field_cfg, a.seed)?, 0),
    };
    let progress = |r: &trainer::LossRecord| {
        if r.step.is_multiple_of(500) {
            log::info!("step {} loss {:.5}", r.step, r.total);
        }
    };
    let (run, steps) = match cfg.mode {
        TrainMode::Joint => (trainer::train(&data, field, &cfg, progress)?, prior_steps + cfg.steps),
        TrainMode::Finetune if resumed => (trainer::train(&data, field, &cfg, progress)?, prior_steps + cfg.steps),
        TrainMode::Finetune => {
            let pre = a.pretrain_steps.unwrap_or(cfg.steps);
            (trainer::train_finetune(&data, field, pre, &cfg, progress)?, pre + cfg.steps)
        }
    };
    let meta = CheckpointMeta {
        field: field_cfg,
        pca: data.pca.clone(),
        train: cfg,
        step: steps,
        cameras: ds.cameras.clone(),
        bounds: ds.scene.bounds,
    };
    trainer::save_checkpoint(&Checkpoint { field: run.field, meta }, &a.out)?;
    trainer::write_loss_csv(&loss_log_path(&a.out), &run.log)?;
    let last = run.log.last().expect("at least one step");
    println!("trained {steps} steps, final loss {:.6}, saved {}", last.total, a.out.display());
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn render(a: RenderArgs) -> Result<()> {
    let ckpt = trainer::load_checkpoint(&a.ckpt)?;
    let out = pipeline::render_view(&ckpt, a.view, None)?;
    let far = ckpt.meta.render_config().far;
    std::fs::write(with_suffix(&a.out_prefix, "_rgb.png"), pipeline::rgb_png(&out)?)?;
    teacher::write_feature_map(&out.feat, &with_suffix(&a.out_prefix, "_feat.n3fm"))?;
    let depth: Vec<u16> = out.depth.iter().map(|&d| ((d as f64 / far).clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    imageio::write_gray16(&with_suffix(&a.out_prefix, "_depth.png"), out.width, out.height, &depth)?;
    let acc: Vec<u8> = out.acc.iter().map(|&v| imageio::to_u8(v as f64)).collect();
    imageio::write_gray8(&with_suffix(&a.out_prefix, "_acc.png"), out.width, out.height, &acc)?;
    println!("rendered view {} to {}_*", a.view, a.out_prefix.display());
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let ckpt = trainer::load_checkpoint(&a.ckpt)?;
    let ds = Dataset::open(&a.data)?;
    if ds.cameras.len() != ckpt.meta.cameras.len() {
        bail!("dataset has {} views but the checkpoint was trained with {}", ds.cameras.len(), ckpt.meta.cameras.len());
    }
    let region = pipeline::region_from_mask_file(&a.mask, a.view)?;
    let source = pipeline::render_view(&ckpt, a.view, None)?;
    let desc = pipeline::descriptor(&source.feat, &region, true)?;
    let target_view = a.target_view.unwrap_or(a.view);
    let target = if target_view == a.view { source } else { pipeline::render_view(&ckpt, target_view, None)? };
    let dist = pipeline::distances(&target.feat, &desc)?;
    let matched = apps::match_region(&dist, a.tau);
    std::fs::write(&a.out, pipeline::heatmap_png(&dist, target.width, target.height)?)?;
    std::fs::write(a.out.with_extension("f32"), pipeline::raw_grid(&dist))?;
    let stem = a.out.with_extension("");
    std::fs::write(with_suffix(&stem, "_match.png"), pipeline::mask_png(&matched, target.width, target.height)?)?;
    println!("{} of {} pixels within {}", matched.iter().filter(|&&m| m).count(), matched.len(), a.tau);
    Ok(())
}

/// Feature maps of one source for every held-out view of `ds`.
pub fn feature_provider<'a>(
    ds: &'a Dataset,
    ckpt: Option<&'a Checkpoint>,
) -> impl Fn(usize) -> Result<FeatureMap, apps::AppError> + Sync + 'a {
    move |view| match ckpt {
        Some(c) => pipeline::render_view(c, view, None).map(|o| o.feat).map_err(|e| apps::AppError::Source(e.to_string())),
        None => Ok(teacher::read_feature_map(&ds.path(&dataset::teacher_rel(view)))?),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let ckpt = a.ckpt.as_deref().map(trainer::load_checkpoint).transpose()?;
    let source = if ckpt.is_some() { FeatureSource::Distilled } else { FeatureSource::Teacher };
    let report = apps::evaluate_retrieval(&ds, source, feature_provider(&ds, ckpt.as_ref()))?;
    report.write_json(&a.out)?;
    report.write_csv(&a.out.with_extension("csv"))?;
    for s in &report.skipped {
        log::warn!("skipped object {} view {}: {}", s.object, s.view, s.reason);
    }
    println!("{} scene mAP {:.4}", source.label(), report.scene_map);
    Ok(())
}

fn load_descriptor(a: &DescriptorArgs) -> Result<(Checkpoint, apps::QueryDescriptor)> {
    let ckpt = trainer::load_checkpoint(&a.ckpt)?;
    let region = pipeline::region_from_mask_file(&a.mask, a.desc_view)?;
    let source = pipeline::render_view(&ckpt, a.desc_view, None)?;
    let desc = pipeline::descriptor(&source.feat, &region, a.normalize_3d)?;
    Ok((ckpt, desc))
}

fn segment(a: SegmentArgs) -> Result<()> {
    let (ckpt, desc) = load_descriptor(&a.desc)?;
    let thresholds = AppThresholds {
        tau_phi: a.desc.tau_phi,
        tau_sigma: a.tau_sigma,
        normalize_3d: a.desc.normalize_3d,
        ..AppThresholds::default()
    };
    let cloud = apps::segment_3d(&ckpt.field, &desc, &thresholds, &ckpt.meta.bounds, a.res)?;
    apps::export_ply(&cloud, &a.out)?;
    println!("wrote {} points to {}", cloud.len(), a.out.display());
    Ok(())
}

fn edit(a: OverrideArgs, amodal: bool) -> Result<()> {
    let (ckpt, desc) = load_descriptor(&a.desc)?;
    let (tau, norm) = (a.desc.tau_phi, a.desc.normalize_3d);
    let png = if amodal {
        let gate = apps::build_amodal_override(&desc, tau, norm);
        let out = pipeline::render_view(&ckpt, a.view, Some(&gate))?;
        pipeline::mask_png(&pipeline::opacity_mask(&out), out.width, out.height)?
    } else {
        let gate = apps::build_edit_override(&desc, tau, norm);
        pipeline::rgb_png(&pipeline::render_view(&ckpt, a.view, Some(&gate))?)?
    };
    std::fs::write(&a.out, png).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
