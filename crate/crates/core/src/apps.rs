//! Uses of a distilled field: region descriptors, 2D retrieval and its
//! AP/mAP evaluation, 3D segmentation to point clouds, object removal, and
//! amodal masks.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError};
use crate::diffkernel::Real;
use crate::field::NeuralField;
use crate::geom::{Aabb, Vec3};
use crate::imageio::{self, ImageError};
use crate::renderer::OccupancyOverride;
use crate::teacher::{self, FeatureMap, TeacherError};

/// Distance assigned to all-zero feature vectors, beyond any chord between
/// unit vectors.
pub const ZERO_FEATURE_DISTANCE: f64 = std::f64::consts::SQRT_2 + 1.0;

const NORM_EPS: f64 = 1e-12;
const GRID_BATCH: usize = 8192;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error("{0}")]
    Source(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Teacher,
    Distilled,
    GroundTruth,
}

impl FeatureSource {
    pub fn label(self) -> &'static str {
        match self {
            FeatureSource::Teacher => "teacher",
            FeatureSource::Distilled => "distilled",
            FeatureSource::GroundTruth => "ground_truth",
        }
    }
}

/// A binary image region on one view.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRegion {
    pub view: usize,
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl QueryRegion {
    pub fn new(view: usize, width: usize, height: usize, mask: Vec<bool>) -> Result<Self, AppError> {
        if mask.len() != width * height {
            return Err(AppError::Contract(format!("mask has {} pixels, view is {width}×{height}", mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AppError::Contract("query region is empty".into()));
        }
        Ok(Self { view, width, height, mask })
    }

    /// Inclusive pixel rectangle `[x0, y0, x1, y1]`, clipped to the image.
    pub fn from_rect(view: usize, width: usize, height: usize, rect: [usize; 4]) -> Result<Self, AppError> {
        let [x0, y0, x1, y1] = rect;
        let mut mask = vec![false; width * height];
        for y in y0..=y1.min(height.saturating_sub(1)) {
            for x in x0..=x1.min(width.saturating_sub(1)) {
                mask[y * width + x] = true;
            }
        }
        Self::new(view, width, height, mask)
    }

    /// Run-length `[start, length]` pairs over row-major pixels.
    pub fn from_rle(view: usize, width: usize, height: usize, runs: &[[usize; 2]]) -> Result<Self, AppError> {
        let mut mask = vec![false; width * height];
        for &[start, len] in runs {
            let end = start.checked_add(len).filter(|&e| e <= mask.len()).ok_or_else(|| {
                AppError::Contract(format!("run [{start}, {len}] exceeds {} pixels", width * height))
            })?;
            mask[start..end].iter_mut().for_each(|m| *m = true);
        }
        Self::new(view, width, height, mask)
    }
}

/// Row-major run-length encoding of a mask.
pub fn mask_to_rle(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDescriptor {
    pub vector: Vec<f64>,
    pub normalized: bool,
    pub source: FeatureSource,
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > NORM_EPS).then(|| v.iter().map(|x| x / n).collect())
}

/// Mean feature over the region, optionally scaled to unit length.
pub fn mean_descriptor(
    map: &FeatureMap,
    region: &QueryRegion,
    normalize: bool,
    source: FeatureSource,
) -> Result<QueryDescriptor, AppError> {
    if (map.height(), map.width()) != (region.height, region.width) {
        return Err(AppError::Contract(format!(
            "region is {}×{} but the feature map is {}×{}",
            region.width,
            region.height,
            map.width(),
            map.height()
        )));
    }
    let mut sum = vec![0.0; map.channels()];
    let mut count = 0usize;
    for (i, _) in region.mask.iter().enumerate().filter(|(_, &m)| m) {
        for (s, v) in sum.iter_mut().zip(map.pixel_at(i)) {
            *s += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(AppError::Contract("query region is empty".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let vector = if normalize { normalized(&mean).unwrap_or(mean) } else { mean };
    Ok(QueryDescriptor { vector, normalized: normalize, source })
}

/// Euclidean distance between unit-normalized `feature` and `unit_desc`;
/// zero features get [`ZERO_FEATURE_DISTANCE`].
fn chord_distance(feature: &[f64], unit_desc: &[f64]) -> f64 {
    match normalized(feature) {
        Some(f) => f.iter().zip(unit_desc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        None => ZERO_FEATURE_DISTANCE,
    }
}

/// Per-pixel distance between the normalized pixel features and the
/// normalized descriptor, row-major `H × W`.
pub fn distance_map(map: &FeatureMap, desc: &QueryDescriptor) -> Result<Vec<f64>, AppError> {
    if map.channels() != desc.vector.len() {
        return Err(AppError::Contract(format!(
            "descriptor has {} channels, feature map has {}",
            desc.vector.len(),
            map.channels()
        )));
    }
    let unit = normalized(&desc.vector);
    Ok((0..map.pixel_count())
        .map(|i| match &unit {
            Some(u) => chord_distance(&map.pixel_at(i), u),
            None => ZERO_FEATURE_DISTANCE,
        })
        .collect())
}

pub fn match_region(distances: &[f64], tau: f64) -> Vec<bool> {
    distances.iter().map(|&d| d <= tau).collect()
}

/// Average precision of a ranked label list.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    /// Set when the list holds no positives; `ap` is then 0.
    pub no_positives: bool,
}

pub fn average_precision(sorted_labels: &[bool]) -> ApResult {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (k, &label) in sorted_labels.iter().enumerate() {
        if label {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits == 0 {
        return ApResult { ap: 0.0, no_positives: true };
    }
    ApResult { ap: sum / hits as f64, no_positives: false }
}

/// Labels ordered by ascending distance, ties by pixel index.
pub fn rank_labels(distances: &[f64], labels: &[bool]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.into_iter().map(|i| labels[i]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleAp {
    pub object: u32,
    pub query: usize,
    pub gallery: usize,
    pub ap: f64,
    pub no_positives: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMap {
    pub query: usize,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMap {
    pub object: u32,
    pub map: f64,
    pub queries: Vec<QueryMap>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub object: u32,
    pub view: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: FeatureSource,
    pub scene_map: f64,
    pub objects: Vec<ObjectMap>,
    pub triples: Vec<TripleAp>,
    pub skipped: Vec<Skipped>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<(), AppError> {
        crate::dataset::write_json(path, self).map_err(AppError::from)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("object,query,gallery,ap\n");
        for t in &self.triples {
            s.push_str(&format!("{},{},{},{}\n", t.object, t.query, t.gallery, t.ap));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), AppError> {
        std::fs::write(path, self.to_csv()).map_err(|source| AppError::Io { path: path.to_path_buf(), source })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

type ViewMask = (usize, Vec<bool>);

/// Retrieval protocol over the annotated query and gallery views: each
/// object's region on each query view yields a descriptor, every gallery
/// view's pixels are ranked by distance to it, and AP against the object's
/// gallery region is averaged over galleries, then queries, then objects.
///
/// `features(view)` supplies the source feature map; maps smaller than the
/// masks are upsampled by nearest neighbour.
pub fn evaluate_retrieval(
    dataset: &Dataset,
    source: FeatureSource,
    features: impl Fn(usize) -> Result<FeatureMap, AppError> + Sync,
) -> Result<EvalReport, AppError> {
    let annotations = dataset
        .annotations
        .as_ref()
        .ok_or_else(|| AppError::Contract("dataset has no annotations.json".into()))?;
    let (query_set, gallery_set) = (&dataset.split.query, &dataset.split.gallery);
    let mut skipped = Vec::new();
    // per object: (view, mask) for every held-out view with a usable mask
    let mut masks: Vec<(u32, Vec<ViewMask>)> = Vec::new();
    for obj in &annotations.objects {
        let mut views = Vec::new();
        for (view, rel) in obj.views()? {
            if !query_set.contains(&view) && !gallery_set.contains(&view) {
                continue;
            }
            match imageio::read_mask(&dataset.path(rel)) {
                Ok((_, _, m)) if m.iter().any(|&b| b) => views.push((view, m)),
                Ok(_) => skipped.push(Skipped { object: obj.id, view, reason: "empty mask".into() }),
                Err(e) => skipped.push(Skipped { object: obj.id, view, reason: e.to_string() }),
            }
        }
        masks.push((obj.id, views));
    }

    let needed: Vec<usize> = dataset.split.held_out();
    let maps: Vec<(usize, FeatureMap)> = needed
        .par_iter()
        .map(|&v| {
            let cam = dataset.camera(v)?;
            let map = features(v)?;
            let map = if (map.height(), map.width()) == (cam.height, cam.width) {
                map
            } else {
                teacher::upsample_nn(&map, cam.height, cam.width)?
            };
            Ok((v, map))
        })
        .collect::<Result<_, AppError>>()?;
    let map_of = |v: usize| &maps.iter().find(|(w, _)| *w == v).expect("held-out view loaded").1;

    let mut triples = Vec::new();
    let mut objects = Vec::new();
    for (object, views) in &masks {
        let queries: Vec<&(usize, Vec<bool>)> = views.iter().filter(|(v, _)| query_set.contains(v)).collect();
        let galleries: Vec<&(usize, Vec<bool>)> = views.iter().filter(|(v, _)| gallery_set.contains(v)).collect();
        let mut query_maps = Vec::new();
        for (q, qmask) in queries {
            let cam = dataset.camera(*q)?;
            let region = QueryRegion::new(*q, cam.width, cam.height, qmask.clone())?;
            let desc = mean_descriptor(map_of(*q), &region, true, source)?;
            let aps: Vec<TripleAp> = galleries
                .par_iter()
                .map(|(g, gmask)| {
                    let dist = distance_map(map_of(*g), &desc)?;
                    let r = average_precision(&rank_labels(&dist, gmask));
                    Ok(TripleAp { object: *object, query: *q, gallery: *g, ap: r.ap, no_positives: r.no_positives })
                })
                .collect::<Result<_, AppError>>()?;
            if aps.is_empty() {
                continue;
            }
            query_maps.push(QueryMap { query: *q, map: mean(aps.iter().map(|t| t.ap)) });
            triples.extend(aps);
        }
        if !query_maps.is_empty() {
            objects.push(ObjectMap { object: *object, map: mean(query_maps.iter().map(|q| q.map)), queries: query_maps });
        }
    }
    for t in triples.iter().filter(|t| t.no_positives) {
        log::warn!("object {} absent from gallery view {}; AP counted as 0", t.object, t.gallery);
    }
    Ok(EvalReport { source, scene_map: mean(objects.iter().map(|o| o.map)), objects, triples, skipped })
}

/// Distance used by the 3D predicates: raw Euclidean, or between unit
/// vectors when `normalize` is set.
pub fn feature_distance(feature: &[f64], desc: &[f64], normalize: bool) -> f64 {
    if normalize {
        match normalized(desc) {
            Some(u) => chord_distance(feature, &u),
            None => ZERO_FEATURE_DISTANCE,
        }
    } else {
        feature.iter().zip(desc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppThresholds {
    /// 2D match threshold.
    pub tau: f64,
    /// 3D feature threshold.
    pub tau_phi: f64,
    /// 3D density threshold.
    pub tau_sigma: f64,
    pub normalize_3d: bool,
}

impl Default for AppThresholds {
    fn default() -> Self {
        Self { tau: 0.5, tau_phi: 0.5, tau_sigma: 10.0, normalize_3d: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub position: Vec3,
    pub rgb: [f64; 3],
    pub density: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid coordinate `i` of `res` evenly spaced samples spanning `[lo, hi]`.
pub fn grid_coord(lo: f64, hi: f64, i: usize, res: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (res - 1) as f64
}

/// Keeps grid points whose feature lies within `tau_phi` of the descriptor and
/// whose density is at least `tau_sigma`. Colors are queried looking along +z.
pub fn segment_3d<T: Real>(
    field: &NeuralField<T>,
    desc: &QueryDescriptor,
    thresholds: &AppThresholds,
    bbox: &Aabb,
    resolution: usize,
) -> Result<PointCloud, AppError> {
    if resolution < 2 {
        return Err(AppError::Contract(format!("grid resolution must be ≥ 2, got {resolution}")));
    }
    if desc.vector.len() != field.config().feature_dim {
        return Err(AppError::Contract(format!(
            "descriptor has {} channels, field has {}",
            desc.vector.len(),
            field.config().feature_dim
        )));
    }
    let r = resolution;
    let grid: Vec<Vec3> = (0..r * r * r)
        .map(|i| {
            let (x, y, z) = (i / (r * r), (i / r) % r, i % r);
            [
                grid_coord(bbox.min[0], bbox.max[0], x, r),
                grid_coord(bbox.min[1], bbox.max[1], y, r),
                grid_coord(bbox.min[2], bbox.max[2], z, r),
            ]
        })
        .collect();
    let c = field.config().feature_dim;
    let chunks: Vec<Vec<CloudPoint>> = grid
        .par_chunks(GRID_BATCH)
        .map(|pts| {
            let dirs = vec![[0.0, 0.0, 1.0]; pts.len()];
            let out = field.evaluate(pts, &dirs).map_err(|e| AppError::Contract(e.to_string()))?;
            let mut kept = Vec::new();
            for (p, &x) in pts.iter().enumerate() {
                let sigma = out.sigma[p].as_f64();
                if sigma < thresholds.tau_sigma {
                    continue;
                }
                let f: Vec<f64> = out.feat[p * c..(p + 1) * c].iter().map(|v| v.as_f64()).collect();
                if feature_distance(&f, &desc.vector, thresholds.normalize_3d) <= thresholds.tau_phi {
                    let rgb = [0, 1, 2].map(|k| out.rgb[p * 3 + k].as_f64());
                    kept.push(CloudPoint { position: x, rgb, density: sigma });
                }
            }
            Ok(kept)
        })
        .collect::<Result<_, AppError>>()?;
    Ok(PointCloud { points: chunks.into_iter().flatten().collect() })
}

/// Density gate driven by feature similarity to a descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGate {
    desc: Vec<f64>,
    tau_phi: f64,
    normalize: bool,
    keep_matching: bool,
}

impl FeatureGate {
    pub fn matches(&self, feature: &[f64]) -> bool {
        feature_distance(feature, &self.desc, self.normalize) <= self.tau_phi
    }
}

impl OccupancyOverride for FeatureGate {
    fn gate(&self, _point: Vec3, feature: &[f64]) -> f64 {
        if self.matches(feature) == self.keep_matching {
            1.0
        } else {
            0.0
        }
    }
}

/// Removes matching material: density is zeroed where the feature is within
/// `tau_phi` of the descriptor.
pub fn build_edit_override(desc: &QueryDescriptor, tau_phi: f64, normalize_3d: bool) -> FeatureGate {
    FeatureGate { desc: desc.vector.clone(), tau_phi, normalize: normalize_3d, keep_matching: false }
}

/// Keeps only matching material, so occluders dissimilar to the query vanish.
pub fn build_amodal_override(desc: &QueryDescriptor, tau_phi: f64, normalize_3d: bool) -> FeatureGate {
    FeatureGate { desc: desc.vector.clone(), tau_phi, normalize: normalize_3d, keep_matching: true }
}

/// ASCII PLY with float `x y z`, uchar `red green blue`, and float `density`.
pub fn write_ply(cloud: &PointCloud, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(out, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(out, "property uchar {p}")?;
    }
    writeln!(out, "property float density")?;
    writeln!(out, "end_header")?;
    for pt in &cloud.points {
        let [x, y, z] = pt.position.map(|v| v as f32);
        let [r, g, b] = pt.rgb.map(imageio::to_u8);
        writeln!(out, "{x} {y} {z} {r} {g} {b} {}", pt.density as f32)?;
    }
    Ok(())
}

pub fn export_ply(cloud: &PointCloud, path: &Path) -> Result<(), AppError> {
    let io = |source| AppError::Io { path: path.to_path_buf(), source };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_ply(cloud, &mut file).map_err(io)?;
    file.flush().map_err(io)
}
