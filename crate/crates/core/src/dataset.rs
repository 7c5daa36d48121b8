//! On-disk dataset layout shared by the scene generator, the trainer, and the
//! retrieval evaluator.
//!
//! ```text
//! scene.json  cameras.json  split.json  annotations.json
//! frames/0000.png  teacher/0000.n3fm  gt_feat/0000.n3fm  masks/obj1/0000.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::geom::Aabb;
use crate::renderer::Camera;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(flatten)]
    pub camera: Camera,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

impl SplitFile {
    /// Fails when a view appears in more than one partition.
    pub fn validate(&self, view_count: usize) -> Result<(), DatasetError> {
        let mut seen = vec![false; view_count];
        for &v in self.train.iter().chain(&self.query).chain(&self.gallery) {
            if v >= view_count {
                return Err(DatasetError::Invalid(format!("split names view {v} but only {view_count} cameras exist")));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(DatasetError::Invalid(format!("view {v} appears in more than one split")));
            }
        }
        Ok(())
    }

    pub fn held_out(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.query.iter().chain(&self.gallery).copied().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub id: u32,
    /// View index (decimal string) to mask path relative to the dataset root.
    pub masks: BTreeMap<String, String>,
}

impl AnnotatedObject {
    /// `(view, relative path)` pairs in ascending view order.
    pub fn views(&self) -> Result<Vec<(usize, &str)>, DatasetError> {
        let mut out = self
            .masks
            .iter()
            .map(|(k, p)| {
                k.parse::<usize>()
                    .map(|v| (v, p.as_str()))
                    .map_err(|_| DatasetError::Invalid(format!("annotation key {k:?} is not a view index")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.sort_by_key(|&(v, _)| v);
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub objects: Vec<AnnotatedObject>,
}

pub fn frame_rel(view: usize) -> String {
    format!("frames/{view:04}.png")
}

pub fn teacher_rel(view: usize) -> String {
    format!("teacher/{view:04}.n3fm")
}

pub fn gt_feat_rel(view: usize) -> String {
    format!("gt_feat/{view:04}.n3fm")
}

pub fn mask_rel(object: u32, view: usize) -> String {
    format!("masks/obj{object}/{view:04}.png")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text + "\n").map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

/// The parts of `scene.json` that consumers other than the generator need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub bounds: Aabb,
    pub background: [f64; 3],
}

/// A dataset directory with its camera list, split, and optional annotations.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub cameras: Vec<Camera>,
    pub split: SplitFile,
    pub annotations: Option<Annotations>,
    pub scene: SceneMeta,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let records: Vec<CameraRecord> = read_json(&root.join("cameras.json"))?;
        let split: SplitFile = read_json(&root.join("split.json"))?;
        split.validate(records.len())?;
        if split.train.is_empty() {
            return Err(DatasetError::Invalid("no training views".into()));
        }
        let ann_path = root.join("annotations.json");
        let annotations = if ann_path.exists() { Some(read_json(&ann_path)?) } else { None };
        let scene = read_json(&root.join("scene.json"))?;
        Ok(Self { root: root.to_path_buf(), cameras: records.into_iter().map(|r| r.camera).collect(), split, annotations, scene })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn camera(&self, view: usize) -> Result<&Camera, DatasetError> {
        self.cameras
            .get(view)
            .ok_or_else(|| DatasetError::Invalid(format!("view {view} out of range (dataset has {})", self.cameras.len())))
    }
}
