//! `.n3fc` checkpoints.
//!
//! Little-endian: magic `N3FC`, u32 version, u32 tensor count; per tensor a
//! u32 name length, the UTF-8 name, u32 rank, u32 dims, then f32 values; then
//! a u32-prefixed UTF-8 JSON trailer holding [`CheckpointMeta`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffkernel::{KernelError, Tensor};
use crate::field::{FieldConfig, NeuralField};
use crate::geom::Aabb;
use crate::renderer::{Camera, RenderConfig};
use crate::teacher::PcaModel;

const MAGIC: [u8; 4] = *b"N3FC";

/// Samples per ray when rendering a trained field.
pub const EVAL_SAMPLES: usize = 64;
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint payload truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the checkpoint trailer")]
    TrailingData(usize),
    #[error("checkpoint tensor mismatch: {0}")]
    Shape(String),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Field(#[from] KernelError),
}

/// Everything besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub field: FieldConfig,
    pub pca: PcaModel,
    pub train: TrainConfig,
    pub step: usize,
    /// All dataset cameras, so views can be rendered without the dataset.
    pub cameras: Vec<Camera>,
    pub bounds: Aabb,
}

impl CheckpointMeta {
    /// Deterministic render settings matching the training depth range.
    pub fn render_config(&self) -> RenderConfig {
        super::eval_render_config(&self.train.render, EVAL_SAMPLES)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: NeuralField<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let params = self.field.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, name, tensor) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.dims().len() as u32).to_le_bytes());
            for &d in tensor.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")? as usize;
        let mut named = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::Shape("tensor name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor payload"))?, "tensor payload")?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            let tensor = Tensor::new(dims, data).map_err(|e| CheckpointError::Shape(format!("{name}: {e}")))?;
            named.push((name, tensor));
        }
        let json_len = r.u32("trailer length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len, "trailer")?)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingData(bytes.len() - r.pos));
        }
        let field = NeuralField::from_params(meta.field.clone(), named)?;
        Ok(Self { field, meta })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Checkpoint::from_bytes(&bytes)
}
