//! Teacher feature maps: the `.n3fm` file format and the preprocessing chain
//! (per-pixel L2 normalization, joint PCA, tanh-range scaling, nearest-neighbour
//! upsampling) that turns raw 2D features into distillation targets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffkernel::Real;

const MAGIC: &[u8; 4] = b"N3FM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Largest absolute value of processed targets.
pub const TANH_RANGE: f64 = 0.95;

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"N3FM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature-map version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated feature map: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("feature map has {0} trailing bytes")]
    TrailingData(usize),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Dense `C × H × W` feature image, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, TeacherError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(TeacherError::Contract(format!(
                "feature map dims must be positive, got {channels}×{height}×{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(TeacherError::Contract(format!(
                "{channels}×{height}×{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Builds a map from per-pixel vectors in row-major pixel order.
    pub fn from_pixels(channels: usize, height: usize, width: usize, pixels: &[f64]) -> Result<Self, TeacherError> {
        if pixels.len() != channels * height * width {
            return Err(TeacherError::Contract(format!(
                "expected {} pixel values, got {}",
                channels * height * width,
                pixels.len()
            )));
        }
        let mut map = Self::zeros(channels, height, width);
        for (i, px) in pixels.chunks_exact(channels).enumerate() {
            map.set_pixel(i / width, i % width, px);
        }
        Ok(map)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn pixel(&self, h: usize, w: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        let off = h * self.width + w;
        (0..self.channels).map(|c| self.data[c * plane + off] as f64).collect()
    }

    /// Pixel by row-major index.
    pub fn pixel_at(&self, index: usize) -> Vec<f64> {
        self.pixel(index / self.width, index % self.width)
    }

    pub fn set_pixel(&mut self, h: usize, w: usize, v: &[f64]) {
        let plane = self.height * self.width;
        let off = h * self.width + w;
        for (c, &x) in v.iter().enumerate().take(self.channels) {
            self.data[c * plane + off] = x as f32;
        }
    }

    /// All pixels as row-major `(H·W) × C` values.
    pub fn to_pixels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.pixel_count() {
            out.extend(self.pixel_at(i));
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.channels as u32, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TeacherError> {
        if bytes.len() < 4 {
            return Err(TeacherError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if &magic != MAGIC {
            return Err(TeacherError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(TeacherError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("four bytes"));
        let version = word(1);
        if version != VERSION {
            return Err(TeacherError::UnsupportedVersion(version));
        }
        let (c, h, w) = (word(2) as usize, word(3) as usize, word(4) as usize);
        let expected = HEADER_LEN + 4 * c * h * w;
        if bytes.len() < expected {
            return Err(TeacherError::Truncated { expected, actual: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(TeacherError::TrailingData(bytes.len() - expected));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        Self::new(c, h, w, data)
    }
}

pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<(), TeacherError> {
    fs::write(path, map.to_bytes()).map_err(|source| TeacherError::Io { path: path.to_path_buf(), source })
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap, TeacherError> {
    let bytes = fs::read(path).map_err(|source| TeacherError::Io { path: path.to_path_buf(), source })?;
    FeatureMap::from_bytes(&bytes)
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// Divides each pixel's channel vector by `max(‖v‖, 1e-12)`.
pub fn l2_normalize_map(map: &FeatureMap) -> FeatureMap {
    let mut out = map.clone();
    for h in 0..map.height {
        for w in 0..map.width {
            let mut v = map.pixel(h, w);
            l2_normalize(&mut v);
            out.set_pixel(h, w, &v);
        }
    }
    out
}

/// `out(h, w) = in(⌊h·H/H_out⌋, ⌊w·W/W_out⌋)`.
pub fn upsample_nn(map: &FeatureMap, height: usize, width: usize) -> Result<FeatureMap, TeacherError> {
    if height < map.height || width < map.width {
        return Err(TeacherError::Contract(format!(
            "upsample_nn cannot shrink {}×{} to {height}×{width}",
            map.height, map.width
        )));
    }
    let mut data = Vec::with_capacity(map.channels * height * width);
    for c in 0..map.channels {
        for h in 0..height {
            let sh = h * map.height / height;
            for w in 0..width {
                let sw = w * map.width / width;
                data.push(map.get(c, sh, sw));
            }
        }
    }
    FeatureMap::new(map.channels, height, width, data)
}

/// Principal subspace of the teacher features plus the tanh-range scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// `output_dim × input_dim`, rows are principal directions.
    pub basis: Vec<f64>,
    pub scale: f64,
    /// Eigenvalues of the kept directions, non-increasing.
    pub explained_variance: Vec<f64>,
    #[serde(default)]
    pub rank_deficient: bool,
}

impl PcaModel {
    pub fn basis_row(&self, k: usize) -> &[f64] {
        &self.basis[k * self.input_dim..(k + 1) * self.input_dim]
    }

    /// `s · basis · (v − mean)`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.project_unscaled(v).into_iter().map(|x| x * self.scale).collect()
    }

    fn project_unscaled(&self, v: &[f64]) -> Vec<f64> {
        (0..self.output_dim)
            .map(|k| {
                self.basis_row(k).iter().zip(v).zip(&self.mean).map(|((b, x), m)| b * (x - m)).sum()
            })
            .collect()
    }

    /// `mean + basisᵀ · (y / s)`: exact inverse of [`project`](Self::project) when the basis is square.
    pub fn back_project(&self, y: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, &yk) in y.iter().enumerate().take(self.output_dim) {
            let a = yk / self.scale;
            for (o, b) in out.iter_mut().zip(self.basis_row(k)) {
                *o += a * b;
            }
        }
        out
    }
}

/// Eigen-decomposition of a symmetric `n × n` matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues and the matching eigenvectors as rows of an `n × n`
/// matrix, in the order the sweeps leave them (unsorted).
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[i * n + i]).collect();
    // columns of v are eigenvectors; hand them back as rows
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            rows[i * n + k] = v[k * n + i];
        }
    }
    (values, rows)
}

/// Fits a joint PCA over every pixel of every map.
pub fn pca_fit(maps: &[FeatureMap], dim: usize) -> Result<PcaModel, TeacherError> {
    let first = maps.first().ok_or_else(|| TeacherError::Contract("pca_fit needs at least one map".into()))?;
    let c = first.channels;
    if dim == 0 || dim > c {
        return Err(TeacherError::Contract(format!("PCA output dim {dim} must be in 1..={c}")));
    }
    if let Some(m) = maps.iter().find(|m| m.channels != c) {
        return Err(TeacherError::Contract(format!("maps mix {c} and {} channels", m.channels)));
    }
    let total: usize = maps.iter().map(FeatureMap::pixel_count).sum();
    if total < 2 {
        return Err(TeacherError::Contract("PCA needs at least two pixels".into()));
    }

    let mut mean = vec![0.0; c];
    for m in maps {
        for i in 0..m.pixel_count() {
            for (acc, v) in mean.iter_mut().zip(m.pixel_at(i)) {
                *acc += v;
            }
        }
    }
    mean.iter_mut().for_each(|v| *v /= total as f64);

    // Σ (v − μ)(v − μ)ᵀ, accumulated in fixed chunk order
    const CHUNK: usize = 4096;
    let mut cov = vec![0.0; c * c];
    let mut block = Vec::with_capacity(CHUNK * c);
    let flush = |block: &mut Vec<f64>, cov: &mut Vec<f64>| {
        let rows = block.len() / c;
        if rows > 0 {
            accumulate_gram(rows, c, block, cov);
        }
        block.clear();
    };
    for m in maps {
        for i in 0..m.pixel_count() {
            block.extend(m.pixel_at(i).iter().zip(&mean).map(|(v, mu)| v - mu));
            if block.len() == CHUNK * c {
                flush(&mut block, &mut cov);
            }
        }
    }
    flush(&mut block, &mut cov);
    cov.iter_mut().for_each(|v| *v /= (total - 1) as f64);

    let (values, vectors) = jacobi_eigen(&cov, c);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut basis = Vec::with_capacity(dim * c);
    let mut explained = Vec::with_capacity(dim);
    for &k in order.iter().take(dim) {
        let mut row = vectors[k * c..(k + 1) * c].to_vec();
        let lead = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > row[best].abs() { i } else { best });
        if row[lead] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.extend(row);
        explained.push(values[k].max(0.0));
    }
    let top = explained[0].max(f64::MIN_POSITIVE);
    let rank_deficient = explained[dim - 1] <= 1e-12 * top;
    if rank_deficient {
        log::warn!("PCA: data spans fewer than {dim} directions; trailing components are an arbitrary orthonormal completion");
    }

    let mut model = PcaModel {
        input_dim: c,
        output_dim: dim,
        mean,
        basis,
        scale: 1.0,
        explained_variance: explained,
        rank_deficient,
    };
    let mut max_abs = 0.0f64;
    for m in maps {
        for i in 0..m.pixel_count() {
            let y = model.project_unscaled(&m.pixel_at(i));
            max_abs = y.iter().fold(max_abs, |acc, v| acc.max(v.abs()));
        }
    }
    model.scale = TANH_RANGE / max_abs.max(1e-12);
    Ok(model)
}

/// `acc += xᵀ x` for `x: rows × cols`.
fn accumulate_gram(rows: usize, cols: usize, x: &[f64], acc: &mut [f64]) {
    f64::gemm(cols, rows, cols, 1.0, (x, 1, cols as isize), (x, cols as isize, 1), 1.0, (acc, cols as isize, 1));
}

pub fn pca_apply(model: &PcaModel, map: &FeatureMap) -> Result<FeatureMap, TeacherError> {
    if map.channels != model.input_dim {
        return Err(TeacherError::Contract(format!(
            "map has {} channels, PCA expects {}",
            map.channels, model.input_dim
        )));
    }
    let mut out = FeatureMap::zeros(model.output_dim, map.height, map.width);
    for h in 0..map.height {
        for w in 0..map.width {
            out.set_pixel(h, w, &model.project(&map.pixel(h, w)));
        }
    }
    Ok(out)
}

/// Normalize, fit one PCA over all maps, project, and upsample to `(height, width)`.
pub fn preprocess_teacher(
    raw: &[FeatureMap],
    dim: usize,
    height: usize,
    width: usize,
) -> Result<(Vec<FeatureMap>, PcaModel), TeacherError> {
    if let Some(first) = raw.first() {
        if let Some(m) = raw.iter().find(|m| m.channels != first.channels) {
            return Err(TeacherError::Contract(format!(
                "teacher maps mix {} and {} channels",
                first.channels, m.channels
            )));
        }
    }
    let normalized: Vec<FeatureMap> = raw.iter().map(l2_normalize_map).collect();
    let model = pca_fit(&normalized, dim)?;
    let processed = normalized
        .iter()
        .map(|m| pca_apply(&model, m).and_then(|p| upsample_nn(&p, height, width)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((processed, model))
}
