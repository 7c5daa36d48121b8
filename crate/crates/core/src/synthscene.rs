//! Procedural analytic scenes: exact occupancy, color, and object identity,
//! plus the camera rig, corrupted teacher maps, and dataset emission used to
//! check distillation end to end.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, AnnotatedObject, Annotations, CameraRecord, DatasetError, Split, SplitFile};
use crate::geom::{self, Aabb, Vec3};
use crate::imageio::{self, ImageError};
use crate::renderer::{self, Camera, RenderConfig, RenderError};
use crate::teacher::{self, FeatureMap, TeacherError};

/// Sample count below which ground-truth renders are refused.
pub const MIN_GT_SAMPLES: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
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
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extents: Vec3 },
}

impl Shape {
    pub fn contains(&self, x: Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => geom::distance(x, center) <= radius,
            Shape::Box { center, half_extents } => (0..3).all(|i| (x[i] - center[i]).abs() <= half_extents[i]),
        }
    }

    pub fn center(&self) -> Vec3 {
        match *self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => center,
        }
    }

    /// Grows the shape by `margin` in every direction (boxes stay boxes).
    pub fn dilated(&self, margin: f64) -> Shape {
        match *self {
            Shape::Sphere { center, radius } => Shape::Sphere { center, radius: radius + margin },
            Shape::Box { center, half_extents } => Shape::Box { center, half_extents: half_extents.map(|h| h + margin) },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f64,
    pub albedo: [f64; 3],
    pub object_id: u32,
    /// Unit identity vector; left empty in hand-written specs and filled by
    /// [`AnalyticScene::resolve`].
    #[serde(default)]
    pub feat_id: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub bounds: Aabb,
    pub feature_dim: usize,
}

/// Ground truth at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub feat: Vec<f64>,
    pub object_id: u32,
}

/// Random orthonormal rows by Gram–Schmidt on a Gaussian matrix.
pub fn random_orthonormal(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.iter().map(|a| a / norm).collect());
        }
    }
    rows
}

impl AnalyticScene {
    /// Assigns missing identity vectors from a seeded random rotation of the
    /// one-hot basis, then validates.
    pub fn resolve(mut self, seed: u64) -> Result<Self, SynthError> {
        if self.feature_dim == 0 {
            return Err(SynthError::Invalid("feature_dim must be ≥ 1".into()));
        }
        if self.primitives.len() > self.feature_dim {
            return Err(SynthError::Invalid(format!(
                "{} objects need feature_dim ≥ {} for distinct identities",
                self.primitives.len(),
                self.primitives.len()
            )));
        }
        let basis = random_orthonormal(self.feature_dim, seed);
        for (k, p) in self.primitives.iter_mut().enumerate() {
            if p.feat_id.is_empty() {
                p.feat_id = basis[k].clone();
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        for (i, p) in self.primitives.iter().enumerate() {
            if p.object_id == 0 {
                return bad("object ids start at 1".into());
            }
            if self.primitives[..i].iter().any(|q| q.object_id == p.object_id) {
                return bad(format!("duplicate object id {}", p.object_id));
            }
            if p.density.is_nan() || p.density <= 0.0 {
                return bad(format!("object {} needs positive density", p.object_id));
            }
            if p.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad(format!("object {} albedo outside [0,1]", p.object_id));
            }
            if p.feat_id.len() != self.feature_dim {
                return bad(format!("object {} identity has {} channels, expected {}", p.object_id, p.feat_id.len(), self.feature_dim));
            }
            let norm = p.feat_id.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return bad(format!("object {} identity is not unit length", p.object_id));
            }
            for q in &self.primitives[..i] {
                let cos: f64 = p.feat_id.iter().zip(&q.feat_id).map(|(a, b)| a * b).sum();
                if cos > 0.5 {
                    return bad(format!("identities of objects {} and {} are too similar", q.object_id, p.object_id));
                }
            }
        }
        Ok(())
    }

    pub fn primitive(&self, object_id: u32) -> Option<&Primitive> {
        self.primitives.iter().find(|p| p.object_id == object_id)
    }

    pub fn object_ids(&self) -> Vec<u32> {
        self.primitives.iter().map(|p| p.object_id).collect()
    }

    /// The same scene with one object deleted.
    pub fn without(&self, object_id: u32) -> Self {
        Self { primitives: self.primitives.iter().filter(|p| p.object_id != object_id).cloned().collect(), ..self.clone() }
    }

    pub fn eval(&self, x: Vec3) -> SceneSample {
        let hit = self
            .primitives
            .iter()
            .filter(|p| p.shape.contains(x))
            .min_by(|a, b| geom::distance(x, a.shape.center()).total_cmp(&geom::distance(x, b.shape.center())));
        match hit {
            Some(p) => SceneSample { sigma: p.density, rgb: p.albedo, feat: p.feat_id.clone(), object_id: p.object_id },
            None => SceneSample { sigma: 0.0, rgb: self.background, feat: vec![0.0; self.feature_dim], object_id: 0 },
        }
    }
}

/// Ground-truth render of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct GtRender {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub feat: FeatureMap,
    pub depth: Vec<f64>,
    pub acc: Vec<f64>,
    /// Object id of the highest-weight sample, or 0 where acc < 0.5.
    pub mask: Vec<u32>,
}

impl GtRender {
    pub fn object_mask(&self, object_id: u32) -> Vec<bool> {
        self.mask.iter().map(|&m| m == object_id).collect()
    }

    pub fn rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|&v| imageio::to_u8(v)).collect()
    }
}

pub fn render_gt(scene: &AnalyticScene, camera: &Camera, cfg: &RenderConfig) -> Result<GtRender, SynthError> {
    if cfg.n_samples < MIN_GT_SAMPLES {
        return Err(SynthError::Invalid(format!("ground truth needs ≥ {MIN_GT_SAMPLES} samples per ray, got {}", cfg.n_samples)));
    }
    cfg.validate()?;
    camera.validate()?;
    let (h, w, c) = (camera.height, camera.width, scene.feature_dim);
    let t = renderer::sample_along_ray::<ChaCha8Rng>(cfg, None);
    let pixels: Vec<_> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let ray = renderer::generate_ray(camera, 0, i / w, i % w)?;
            let samples: Vec<SceneSample> = t.iter().map(|&ti| scene.eval(geom::add(ray.origin, geom::scale(ray.dir, ti)))).collect();
            let sigma: Vec<f64> = samples.iter().map(|s| s.sigma).collect();
            let rgb: Vec<f64> = samples.iter().flat_map(|s| s.rgb).collect();
            let feat: Vec<f64> = samples.iter().flat_map(|s| s.feat.iter().copied()).collect();
            let comp = renderer::composite(&sigma, &rgb, &feat, &t, cfg);
            let best = comp.weights.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k);
            let id = match best {
                Some(k) if comp.acc >= 0.5 => samples[k].object_id,
                _ => 0,
            };
            Ok((comp, id))
        })
        .collect::<Result<_, RenderError>>()?;
    let mut out = GtRender {
        width: w,
        height: h,
        rgb: Vec::with_capacity(h * w * 3),
        feat: FeatureMap::zeros(c, h, w),
        depth: Vec::with_capacity(h * w),
        acc: Vec::with_capacity(h * w),
        mask: Vec::with_capacity(h * w),
    };
    for (i, (comp, id)) in pixels.into_iter().enumerate() {
        out.rgb.extend(comp.rgb);
        out.feat.set_pixel(i / w, i % w, &comp.feat);
        out.depth.push(comp.depth);
        out.acc.push(comp.acc);
        out.mask.push(id);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub bias_std: f64,
    pub pixel_std: f64,
    pub blur_radius: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { bias_std: 0.3, pixel_std: 0.2, blur_radius: 2, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { bias_std: 0.0, pixel_std: 0.0, blur_radius: 0, seed: 0 }
    }
}

/// Box blur with a `(2r+1)²` window and replicated borders.
pub fn box_blur(map: &FeatureMap, radius: usize) -> FeatureMap {
    if radius == 0 {
        return map.clone();
    }
    let (c, h, w) = (map.channels(), map.height(), map.width());
    let r = radius as isize;
    let norm = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut data = vec![0f32; c * h * w];
    let src = map.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[yy * w + xx] as f64;
                    }
                }
                data[ch * h * w + y * w + x] = (acc * norm) as f32;
            }
        }
    }
    FeatureMap::new(c, h, w, data).expect("same shape as input")
}

/// Adds a per-view bias and per-pixel Gaussian noise, L2-normalizes each
/// pixel, then box-blurs. The random stream depends only on the seed and the
/// view index.
pub fn corrupt_teacher(gt: &FeatureMap, noise: &NoiseConfig, view: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(view as u64);
    let c = gt.channels();
    let bias: Vec<f64> = (0..c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise.bias_std * z
        })
        .collect();
    let mut pixels = gt.to_pixels();
    for px in pixels.chunks_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += bias[k] + noise.pixel_std * e;
        }
        teacher::l2_normalize(px);
    }
    let noisy = FeatureMap::from_pixels(c, gt.height(), gt.width(), &pixels).expect("same shape as input");
    box_blur(&noisy, noise.blur_radius)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub train_views: usize,
    pub heldout_views: usize,
    pub width: usize,
    pub height: usize,
    pub radius: f64,
    pub elevation_deg: f64,
    pub heldout_elevation_deg: f64,
    pub fov_deg: f64,
    pub gt_samples: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            train_views: 24,
            heldout_views: 8,
            width: 64,
            height: 64,
            radius: 3.2,
            elevation_deg: 20.0,
            heldout_elevation_deg: 30.0,
            fov_deg: 40.0,
            gt_samples: MIN_GT_SAMPLES,
        }
    }
}

/// Cameras on two rings around the scene center; held-out views alternate
/// between the query and gallery sets.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub split: SplitFile,
}

impl CameraRig {
    pub fn records(&self) -> Vec<CameraRecord> {
        self.cameras
            .iter()
            .enumerate()
            .map(|(i, cam)| {
                let split = if self.split.query.contains(&i) {
                    Split::Query
                } else if self.split.gallery.contains(&i) {
                    Split::Gallery
                } else {
                    Split::Train
                };
                CameraRecord { camera: cam.clone(), split }
            })
            .collect()
    }
}

pub fn build_rig(scene: &AnalyticScene, rig: &RigConfig) -> CameraRig {
    let center = scene.bounds.center();
    let ring = |n: usize, elevation: f64, offset: f64| -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let az = std::f64::consts::TAU * (i as f64 + offset) / n as f64;
                let el = elevation.to_radians();
                let eye = geom::add(center, geom::scale([el.cos() * az.cos(), el.sin(), el.cos() * az.sin()], rig.radius));
                Camera::look_at(eye, center, [0.0, 1.0, 0.0], rig.fov_deg, rig.width, rig.height)
            })
            .collect()
    };
    let mut cameras = ring(rig.train_views, rig.elevation_deg, 0.0);
    cameras.extend(ring(rig.heldout_views, rig.heldout_elevation_deg, 0.5));
    let held: Vec<usize> = (rig.train_views..rig.train_views + rig.heldout_views).collect();
    let split = SplitFile {
        train: (0..rig.train_views).collect(),
        query: held.iter().copied().step_by(2).collect(),
        gallery: held.iter().copied().skip(1).step_by(2).collect(),
    };
    CameraRig { cameras, split }
}

/// Sampling setup for ground-truth renders: tight depth range around the
/// scene bounds, the scene background, no jitter.
pub fn gt_render_config(scene: &AnalyticScene, cameras: &[Camera], n_samples: usize) -> RenderConfig {
    RenderConfig { background: scene.background, ..RenderConfig::fit_to_bounds(&scene.bounds, cameras, n_samples) }
}

/// Everything needed to regenerate a dataset; this is what `scene.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(flatten)]
    pub scene: AnalyticScene,
    #[serde(default)]
    pub rig: RigConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(dataset::read_json(path)?)
    }
}

/// Three objects on a small table-top: two spheres and a box that hides part
/// of the rear sphere from roughly a third of the training ring.
pub fn desk_scene() -> AnalyticScene {
    AnalyticScene {
        primitives: vec![
            Primitive {
                shape: Shape::Sphere { center: [-0.15, 0.0, -0.1], radius: 0.38 },
                density: 400.0,
                albedo: [0.85, 0.25, 0.2],
                object_id: 1,
                feat_id: Vec::new(),
            },
            Primitive {
                shape: Shape::Sphere { center: [-0.35, -0.05, 0.7], radius: 0.25 },
                density: 400.0,
                albedo: [0.2, 0.7, 0.3],
                object_id: 2,
                feat_id: Vec::new(),
            },
            Primitive {
                shape: Shape::Box { center: [0.55, -0.08, -0.1], half_extents: [0.16, 0.3, 0.3] },
                density: 400.0,
                albedo: [0.25, 0.35, 0.9],
                object_id: 3,
                feat_id: Vec::new(),
            },
        ],
        background: [1.0, 1.0, 1.0],
        bounds: Aabb::new([-1.0, -0.6, -1.0], [1.0, 0.6, 1.0]),
        feature_dim: 8,
    }
}

pub fn desk_spec(seed: u64) -> SceneSpec {
    SceneSpec { scene: desk_scene(), rig: RigConfig::default(), noise: NoiseConfig { seed, ..NoiseConfig::default() }, seed }
}

fn create_dir(path: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(path).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

/// Summary of an emitted dataset.
#[derive(Clone, Debug)]
pub struct Emitted {
    pub scene: AnalyticScene,
    pub rig: CameraRig,
    pub views: usize,
}

/// Writes frames, teacher and ground-truth feature maps, instance masks,
/// cameras, split, and annotations. Output bytes depend only on `spec`.
pub fn emit_dataset(spec: &SceneSpec, out_dir: &Path) -> Result<Emitted, SynthError> {
    let scene = spec.scene.clone().resolve(spec.seed)?;
    let rig = build_rig(&scene, &spec.rig);
    let cfg = gt_render_config(&scene, &rig.cameras, spec.rig.gt_samples);
    for sub in ["frames", "teacher", "gt_feat"] {
        create_dir(&out_dir.join(sub))?;
    }
    for id in scene.object_ids() {
        create_dir(&out_dir.join(format!("masks/obj{id}")))?;
    }
    let held = rig.split.held_out();
    let visible: Vec<Vec<u32>> = rig
        .cameras
        .par_iter()
        .enumerate()
        .map(|(view, cam)| {
            let gt = render_gt(&scene, cam, &cfg)?;
            let (w, h) = (gt.width, gt.height);
            imageio::write_rgb8(&out_dir.join(dataset::frame_rel(view)), w, h, &gt.rgb8())?;
            teacher::write_feature_map(&gt.feat, &out_dir.join(dataset::gt_feat_rel(view)))?;
            let noisy = corrupt_teacher(&gt.feat, &spec.noise, view);
            teacher::write_feature_map(&noisy, &out_dir.join(dataset::teacher_rel(view)))?;
            let mut present = Vec::new();
            for id in scene.object_ids() {
                let mask = gt.object_mask(id);
                if mask.iter().any(|&m| m) {
                    present.push(id);
                }
                imageio::write_mask(&out_dir.join(dataset::mask_rel(id, view)), w, h, &mask)?;
            }
            Ok(present)
        })
        .collect::<Result<_, SynthError>>()?;

    let resolved = SceneSpec { scene: scene.clone(), ..spec.clone() };
    dataset::write_json(&out_dir.join("scene.json"), &resolved)?;
    dataset::write_json(&out_dir.join("cameras.json"), &rig.records())?;
    dataset::write_json(&out_dir.join("split.json"), &rig.split)?;
    let annotations = Annotations {
        objects: scene
            .object_ids()
            .into_iter()
            .map(|id| AnnotatedObject {
                id,
                masks: held
                    .iter()
                    .filter(|&&v| visible[v].contains(&id))
                    .map(|&v| (v.to_string(), dataset::mask_rel(id, v)))
                    .collect(),
            })
            .collect(),
    };
    dataset::write_json(&out_dir.join("annotations.json"), &annotations)?;
    Ok(Emitted { scene, views: rig.cameras.len(), rig })
}
