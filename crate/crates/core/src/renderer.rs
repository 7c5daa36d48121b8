//! Pinhole cameras, ray sampling, and emission-absorption compositing of
//! color, features, depth, and opacity.
//!
//! Camera frame: +x right, +y up, the camera looks down −z; pixel centers sit
//! at half-integer coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{CustomOp, KernelError, Real, Tape, Tensor, Var};
use crate::field::{BoundField, NeuralField};
use crate::geom::{self, Aabb, Vec3};
use crate::teacher::FeatureMap;

/// Rays per untraced render chunk.
const RENDER_CHUNK: usize = 512;
const DEPTH_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("pixel (row {row}, col {col}) outside {height}×{width} image")]
    PixelOutOfBounds { row: usize, col: usize, height: usize, width: usize },
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid render config: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world rigid transform, row-major 4×4.
    pub pose: [f64; 16],
}

impl Camera {
    /// A camera at `eye` looking at `target`, vertical field of view in degrees.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y_deg: f64, width: usize, height: usize) -> Self {
        let back = geom::normalize(geom::sub(eye, target));
        let right = geom::normalize(geom::cross(up, back));
        let true_up = geom::cross(back, right);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let mut pose = [0.0; 16];
        for i in 0..3 {
            pose[i * 4] = right[i];
            pose[i * 4 + 1] = true_up[i];
            pose[i * 4 + 2] = back[i];
            pose[i * 4 + 3] = eye[i];
        }
        pose[15] = 1.0;
        Self { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64, width, height, pose }
    }

    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        let mut pose = [0.0; 16];
        for i in 0..4 {
            pose[i * 5] = 1.0;
        }
        Self { fx, fy, cx, cy, width, height, pose }
    }

    pub fn position(&self) -> Vec3 {
        [self.pose[3], self.pose[7], self.pose[11]]
    }

    fn rot(&self, r: usize, c: usize) -> f64 {
        self.pose[r * 4 + c]
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera(format!(
                "focal lengths ({}, {}) and size {}×{} must be positive",
                self.fx, self.fy, self.width, self.height
            )));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| self.rot(k, i) * self.rot(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() >= 1e-5 {
                    return Err(RenderError::Camera("rotation block is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    /// World point to `(col, row, depth)` in continuous pixel coordinates,
    /// where depth is the distance along the viewing axis. `None` behind the camera.
    pub fn project(&self, x: Vec3) -> Option<(f64, f64, f64)> {
        let d = geom::sub(x, self.position());
        let cam: Vec<f64> = (0..3).map(|c| (0..3).map(|r| self.rot(r, c) * d[r]).sum()).collect();
        let depth = -cam[2];
        if depth <= 0.0 {
            return None;
        }
        let col = self.fx * cam[0] / depth + self.cx;
        let row = -self.fy * cam[1] / depth + self.cy;
        Some((col, row, depth))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

pub fn generate_ray(camera: &Camera, view: usize, row: usize, col: usize) -> Result<Ray, RenderError> {
    if row >= camera.height || col >= camera.width {
        return Err(RenderError::PixelOutOfBounds { row, col, height: camera.height, width: camera.width });
    }
    let d_cam = [
        (col as f64 + 0.5 - camera.cx) / camera.fx,
        -(row as f64 + 0.5 - camera.cy) / camera.fy,
        -1.0,
    ];
    let d_world = [0, 1, 2].map(|r| (0..3).map(|c| camera.rot(r, c) * d_cam[c]).sum::<f64>());
    Ok(Ray { origin: camera.position(), dir: geom::normalize(d_world), view, row, col })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    pub stratified: bool,
    pub background: [f64; 3],
    pub seed: u64,
}

impl RenderConfig {
    pub fn new(near: f64, far: f64, n_samples: usize) -> Self {
        Self { near, far, n_samples, stratified: false, background: [0.0; 3], seed: 0 }
    }

    /// Tight `[near, far]` around `bounds` for cameras looking at it.
    pub fn fit_to_bounds(bounds: &Aabb, cameras: &[Camera], n_samples: usize) -> Self {
        let (c, r) = (bounds.center(), bounds.half_diagonal());
        let (mut near, mut far) = (f64::INFINITY, 0.0f64);
        for cam in cameras {
            let d = geom::distance(cam.position(), c);
            near = near.min(d - r);
            far = far.max(d + r);
        }
        Self::new(near.max(0.05), far.max(near.max(0.05) + 1e-3), n_samples)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.near > 0.0 && self.near < self.far) || self.n_samples == 0 {
            return Err(RenderError::Config(format!(
                "need 0 < near < far and n_samples ≥ 1, got near {}, far {}, n {}",
                self.near, self.far, self.n_samples
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(RenderError::Config("background must lie in [0,1]³".into()));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.far - self.near) / self.n_samples as f64
    }
}

/// Sample depths along a ray: bin midpoints, or uniform jitter inside each bin
/// when the config is stratified and an RNG is supplied, in which case exactly
/// one `f64` is drawn per sample.
pub fn sample_along_ray<R: Rng>(cfg: &RenderConfig, rng: Option<&mut R>) -> Vec<f64> {
    let delta = cfg.bin_width();
    match rng {
        Some(rng) if cfg.stratified => (0..cfg.n_samples)
            .map(|i| {
                let u: f64 = rng.random();
                // keep strictly inside the bin so depths stay strictly increasing
                let u = u.clamp(1e-9, 1.0 - 1e-9);
                cfg.near + (i as f64 + u) * delta
            })
            .collect(),
        _ => (0..cfg.n_samples).map(|i| cfg.near + (i as f64 + 0.5) * delta).collect(),
    }
}

/// Interval lengths: `t[i+1] − t[i]`, and `far − t[N−1]` for the last sample.
pub fn interval_lengths(t: &[f64], far: f64) -> Vec<f64> {
    let mut d: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if let Some(&last) = t.last() {
        d.push((far - last).max(0.0));
    }
    d
}

/// Quadrature of the rendering integral along one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RayComposite {
    pub rgb: [f64; 3],
    pub feat: Vec<f64>,
    pub depth: f64,
    pub acc: f64,
    pub weights: Vec<f64>,
    /// Transmittance past the last sample, `T_{N+1}`.
    pub residual_transmittance: f64,
}

/// Per-sample weights `wᵢ = Tᵢ αᵢ` and the residual transmittance.
pub fn ray_weights(sigma: &[f64], deltas: &[f64]) -> (Vec<f64>, f64) {
    let mut trans = 1.0;
    let mut w = Vec::with_capacity(sigma.len());
    for (&s, &d) in sigma.iter().zip(deltas) {
        let keep = (-s * d).exp();
        w.push(trans * (1.0 - keep));
        trans *= keep;
    }
    (w, trans)
}

/// Composites per-sample density, color (`N × 3`), and features (`N × C`)
/// at depths `t`.
pub fn composite(sigma: &[f64], rgb: &[f64], feat: &[f64], t: &[f64], cfg: &RenderConfig) -> RayComposite {
    let deltas = interval_lengths(t, cfg.far);
    composite_with_deltas(sigma, rgb, feat, t, &deltas, cfg.background)
}

fn composite_with_deltas(
    sigma: &[f64],
    rgb: &[f64],
    feat: &[f64],
    t: &[f64],
    deltas: &[f64],
    background: [f64; 3],
) -> RayComposite {
    let n = sigma.len();
    let c = feat.len().checked_div(n).unwrap_or(0);
    let (weights, residual) = ray_weights(sigma, deltas);
    let mut out_rgb = [0.0; 3];
    let mut out_feat = vec![0.0; c];
    let (mut acc, mut depth_num) = (0.0, 0.0);
    for (i, &w) in weights.iter().enumerate() {
        for k in 0..3 {
            out_rgb[k] += w * rgb[i * 3 + k];
        }
        for k in 0..c {
            out_feat[k] += w * feat[i * c + k];
        }
        acc += w;
        depth_num += w * t[i];
    }
    for k in 0..3 {
        out_rgb[k] += residual * background[k];
    }
    RayComposite {
        rgb: out_rgb,
        feat: out_feat,
        depth: depth_num / acc.max(DEPTH_EPS),
        acc,
        weights,
        residual_transmittance: residual,
    }
}

/// Multiplicative gate on density, evaluated per sample from its position and
/// the field's feature there. The rendered density is `gate · σ`.
pub trait OccupancyOverride: Sync {
    fn gate(&self, point: Vec3, feature: &[f64]) -> f64;

    fn apply(&self, point: Vec3, feature: &[f64], sigma: f64) -> f64 {
        self.gate(point, feature) * sigma
    }
}

/// Zeroes density everywhere.
pub struct ZeroDensity;

impl OccupancyOverride for ZeroDensity {
    fn gate(&self, _: Vec3, _: &[f64]) -> f64 {
        0.0
    }
}

/// Leaves density untouched.
pub struct KeepDensity;

impl OccupancyOverride for KeepDensity {
    fn gate(&self, _: Vec3, _: &[f64]) -> f64 {
        1.0
    }
}

/// Tape primitive for compositing a batch of rays with a shared sample count.
///
/// Inputs: `σ (R·N × 1)`, `rgb (R·N × 3)`, `feat (R·N × C)`.
/// Output: `R × (3 + C + 1)` laid out as `[rgb | feat | acc]`.
struct CompositeOp {
    samples: usize,
    channels: usize,
    deltas: Vec<f64>,
    background: [f64; 3],
}

impl<T: Real> CustomOp<T> for CompositeOp {
    fn name(&self) -> &'static str {
        "composite"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (n, c) = (self.samples, self.channels);
        let width = 4 + c;
        let rays = grad.rows();
        let sigma = inputs[0].data();
        let rgb = inputs[1].data();
        let feat = inputs[2].data();
        let mut d_sigma = vec![T::zero(); rays * n];
        let mut d_rgb = vec![T::zero(); rays * n * 3];
        let mut d_feat = vec![T::zero(); rays * n * c];
        let mut dot = vec![0.0; n];
        let mut after = vec![0.0; n];
        for r in 0..rays {
            let g = &grad.data()[r * width..(r + 1) * width];
            let g64: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
            let s: Vec<f64> = sigma[r * n..(r + 1) * n].iter().map(|v| v.as_f64()).collect();
            let deltas = &self.deltas[r * n..(r + 1) * n];
            let (w, residual) = ray_weights(&s, deltas);
            // dot[i] = channels of sample i contracted with the upstream gradient
            for i in 0..n {
                let p = r * n + i;
                let mut acc = g64[3 + c];
                for k in 0..3 {
                    acc += rgb[p * 3 + k].as_f64() * g64[k];
                    d_rgb[p * 3 + k] = T::lit(w[i] * g64[k]);
                }
                for k in 0..c {
                    acc += feat[p * c + k].as_f64() * g64[3 + k];
                    d_feat[p * c + k] = T::lit(w[i] * g64[3 + k]);
                }
                dot[i] = acc;
            }
            // after[i] = Σ_{j>i} w_j dot_j + T_{N+1} (bg · g_rgb)
            let mut tail = residual * (0..3).map(|k| self.background[k] * g64[k]).sum::<f64>();
            for i in (0..n).rev() {
                after[i] = tail;
                tail += w[i] * dot[i];
            }
            let mut trans = 1.0;
            for i in 0..n {
                trans *= (-s[i] * deltas[i]).exp();
                d_sigma[r * n + i] = T::lit(deltas[i] * (dot[i] * trans - after[i]));
            }
        }
        vec![
            Some(Tensor::new(inputs[0].dims().to_vec(), d_sigma).expect("shape of σ")),
            Some(Tensor::new(inputs[1].dims().to_vec(), d_rgb).expect("shape of rgb")),
            Some(Tensor::new(inputs[2].dims().to_vec(), d_feat).expect("shape of feat")),
        ]
    }
}

/// Tape outputs of [`render_batch`]; `depth` is forward-only.
#[derive(Clone, Debug)]
pub struct RenderedBatch {
    /// `R × 3`
    pub rgb: Var,
    /// `R × C`
    pub feat: Var,
    /// `R × 1`
    pub acc: Var,
    pub depth: Vec<f64>,
}

/// Renders `rays` through `field` on `tape`. When the tape traces, the outputs
/// are differentiable with respect to the bound parameters.
#[allow(clippy::too_many_arguments)]
pub fn render_batch<T: Real>(
    field: &NeuralField<T>,
    tape: &mut Tape<T>,
    bound: &BoundField,
    rays: &[Ray],
    cfg: &RenderConfig,
    occupancy: Option<&dyn OccupancyOverride>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<RenderedBatch, RenderError> {
    cfg.validate()?;
    if rays.is_empty() {
        return Err(RenderError::Config("render_batch needs at least one ray".into()));
    }
    let n = cfg.n_samples;
    let c = field.config().feature_dim;
    let mut ts = Vec::with_capacity(rays.len() * n);
    let mut deltas = Vec::with_capacity(rays.len() * n);
    let mut points = Vec::with_capacity(rays.len() * n);
    let mut dirs = Vec::with_capacity(rays.len() * n);
    for ray in rays {
        let t = sample_along_ray(cfg, rng.as_deref_mut());
        deltas.extend(interval_lengths(&t, cfg.far));
        for &ti in &t {
            points.push(geom::add(ray.origin, geom::scale(ray.dir, ti)));
            dirs.push(ray.dir);
        }
        ts.extend(t);
    }
    let ep = tape.constant(field.encode_positions(&points));
    let ed = tape.constant(field.encode_directions(&dirs));
    let out = field.forward(tape, bound, ep, ed)?;

    let sigma = match occupancy {
        None => out.sigma,
        Some(gate) => {
            let feats = tape.value(out.feat).data();
            let gates: Vec<T> = points
                .iter()
                .enumerate()
                .map(|(p, &x)| {
                    let f: Vec<f64> = feats[p * c..(p + 1) * c].iter().map(|v| v.as_f64()).collect();
                    T::lit(gate.gate(x, &f))
                })
                .collect();
            let g = tape.constant(Tensor::matrix(points.len(), 1, gates)?);
            tape.mul(out.sigma, g)?
        }
    };

    let (sv, rv, fv) = (tape.value(sigma).data(), tape.value(out.rgb).data(), tape.value(out.feat).data());
    let width = 4 + c;
    let mut packed = Vec::with_capacity(rays.len() * width);
    let mut depth = Vec::with_capacity(rays.len());
    for r in 0..rays.len() {
        let s: Vec<f64> = sv[r * n..(r + 1) * n].iter().map(|v| v.as_f64()).collect();
        let rgb: Vec<f64> = rv[r * n * 3..(r + 1) * n * 3].iter().map(|v| v.as_f64()).collect();
        let feat: Vec<f64> = fv[r * n * c..(r + 1) * n * c].iter().map(|v| v.as_f64()).collect();
        let comp = composite_with_deltas(
            &s,
            &rgb,
            &feat,
            &ts[r * n..(r + 1) * n],
            &deltas[r * n..(r + 1) * n],
            cfg.background,
        );
        packed.extend(comp.rgb.iter().map(|&v| T::lit(v)));
        packed.extend(comp.feat.iter().map(|&v| T::lit(v)));
        packed.push(T::lit(comp.acc));
        depth.push(comp.depth);
    }
    let value = Tensor::matrix(rays.len(), width, packed)?;
    let op = CompositeOp { samples: n, channels: c, deltas, background: cfg.background };
    let composite = tape.custom(&[sigma, out.rgb, out.feat], value, Box::new(op));
    Ok(RenderedBatch {
        rgb: tape.slice_cols(composite, 0, 3)?,
        feat: tape.slice_cols(composite, 3, c)?,
        acc: tape.slice_cols(composite, 3 + c, 1)?,
        depth,
    })
}

/// One rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H × W × 3`
    pub rgb: Vec<f32>,
    pub feat: FeatureMap,
    pub depth: Vec<f32>,
    pub acc: Vec<f32>,
}

/// Renders every pixel of `camera`. Chunks run in parallel; the result does
/// not depend on the thread count.
pub fn render_image<T: Real>(
    field: &NeuralField<T>,
    camera: &Camera,
    cfg: &RenderConfig,
    occupancy: Option<&dyn OccupancyOverride>,
) -> Result<RenderOutput, RenderError> {
    camera.validate()?;
    cfg.validate()?;
    let (h, w) = (camera.height, camera.width);
    let c = field.config().feature_dim;
    let rays: Vec<Ray> = (0..h * w)
        .map(|i| generate_ray(camera, 0, i / w, i % w))
        .collect::<Result<_, _>>()?;
    let chunks: Vec<[Vec<f64>; 4]> = rays
        .par_chunks(RENDER_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(ci as u64);
            let mut tape = Tape::new(false);
            let bound = field.bind(&mut tape);
            let out = render_batch(field, &mut tape, &bound, chunk, cfg, occupancy, Some(&mut rng))?;
            let to64 = |v: Var| tape.value(v).data().iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
            Ok([to64(out.rgb), to64(out.feat), out.depth.clone(), to64(out.acc)])
        })
        .collect::<Result<_, RenderError>>()?;

    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut feat_px = Vec::with_capacity(h * w * c);
    let mut depth = Vec::with_capacity(h * w);
    let mut acc = Vec::with_capacity(h * w);
    for [r, f, d, a] in chunks {
        rgb.extend(r.iter().map(|&v| v as f32));
        feat_px.extend(f);
        depth.extend(d.iter().map(|&v| v as f32));
        acc.extend(a.iter().map(|&v| v as f32));
    }
    let feat = FeatureMap::from_pixels(c, h, w, &feat_px)
        .map_err(|e| RenderError::Config(e.to_string()))?;
    Ok(RenderOutput { width: w, height: h, rgb, feat, depth, acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{init_field, FieldConfig};
    use proptest::prelude::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn ray_examples() {
        let cam = Camera::identity(10.0, 10.0, 2.0, 3.0, 4, 6);
        let cam_c = Camera { cx: 2.5, cy: 3.5, ..cam.clone() };
        let r = generate_ray(&cam_c, 0, 3, 2).unwrap();
        assert_eq!(r.origin, [0.0; 3]);
        assert!(close(r.dir, [0.0, 0.0, -1.0], 1e-15));

        let unit = Camera::identity(1.0, 1.0, 0.0, 0.0, 2, 2);
        let r = generate_ray(&unit, 0, 0, 0).unwrap();
        let n = (0.25f64 + 0.25 + 1.0).sqrt();
        assert!(close(r.dir, [0.5 / n, -0.5 / n, -1.0 / n], 1e-15));

        let mut moved = unit.clone();
        moved.pose[3] = 1.0;
        moved.pose[7] = 2.0;
        moved.pose[11] = 3.0;
        assert_eq!(generate_ray(&moved, 0, 1, 1).unwrap().origin, [1.0, 2.0, 3.0]);
        assert!(matches!(generate_ray(&unit, 0, 2, 0), Err(RenderError::PixelOutOfBounds { .. })));
    }

    #[test]
    fn look_at_points_at_target() {
        let cam = Camera::look_at([3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 40.0, 32, 32);
        cam.validate().unwrap();
        let (col, row, depth) = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((col - 16.0).abs() < 1e-9 && (row - 16.0).abs() < 1e-9);
        assert!((depth - 14f64.sqrt()).abs() < 1e-9);
        // projection inverts ray generation
        let ray = generate_ray(&cam, 0, 5, 20).unwrap();
        let p = geom::add(ray.origin, geom::scale(ray.dir, 2.5));
        let (c2, r2, _) = cam.project(p).unwrap();
        assert!((c2 - 20.5).abs() < 1e-9 && (r2 - 5.5).abs() < 1e-9);
        let mut bad = cam.clone();
        bad.pose[0] = 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_samples() {
        let cfg = RenderConfig::new(1e-9, 1.0, 4);
        let t = sample_along_ray::<ChaCha8Rng>(&RenderConfig { near: 0.0, ..cfg.clone() }, None);
        assert_eq!(t, vec![0.125, 0.375, 0.625, 0.875]);
        let one = sample_along_ray::<ChaCha8Rng>(&RenderConfig { near: 0.0, n_samples: 1, ..cfg }, None);
        assert_eq!(one, vec![0.5]);
    }

    #[test]
    fn stratified_samples_stay_in_bins() {
        let cfg = RenderConfig { stratified: true, ..RenderConfig::new(0.5, 2.5, 16) };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = sample_along_ray(&cfg, Some(&mut rng));
            for (i, &ti) in t.iter().enumerate() {
                let lo = cfg.near + i as f64 * cfg.bin_width();
                assert!(ti >= lo && ti <= lo + cfg.bin_width());
            }
            assert!(t.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn composite_vacuum_and_opaque_limits() {
        let cfg = RenderConfig { background: [0.2, 0.4, 0.6], ..RenderConfig::new(1.0, 3.0, 4) };
        let t = sample_along_ray::<ChaCha8Rng>(&cfg, None);
        let rgb = [0.9, 0.1, 0.3].repeat(4);
        let feat = [0.5, -0.5].repeat(4);
        let vac = composite(&[0.0; 4], &rgb, &feat, &t, &cfg);
        assert_eq!(vac.rgb, [0.2, 0.4, 0.6]);
        assert_eq!(vac.feat, vec![0.0, 0.0]);
        assert_eq!(vac.acc, 0.0);

        let mut rgb2 = rgb.clone();
        rgb2[3..].iter_mut().for_each(|v| *v = 0.0);
        let opaque = composite(&[1e6, 0.0, 0.0, 0.0], &rgb2, &feat, &t, &cfg);
        assert!(close(opaque.rgb, [0.9, 0.1, 0.3], 1e-4));
        assert!((opaque.feat[0] - 0.5).abs() < 1e-4);
        assert!((opaque.acc - 1.0).abs() < 1e-4);
        assert!((opaque.depth - t[0]).abs() < 1e-4);
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        let cfg = RenderConfig::new(2.0, 3.0, 256);
        let t = sample_along_ray::<ChaCha8Rng>(&cfg, None);
        let sigma = vec![1.0; 256];
        let out = composite(&sigma, &vec![0.0; 768], &[0.0; 256], &t, &cfg);
        assert!((out.acc - (1.0 - (-1.0f64).exp())).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn weights_conserve_mass(sigma in proptest::collection::vec(0.0f64..50.0, 1..64)) {
            let cfg = RenderConfig::new(0.5, 4.0, sigma.len());
            let t = sample_along_ray::<ChaCha8Rng>(&cfg, None);
            let (w, residual) = ray_weights(&sigma, &interval_lengths(&t, cfg.far));
            prop_assert!((w.iter().sum::<f64>() + residual - 1.0).abs() < 1e-5);
        }

        #[test]
        fn opacity_is_monotone(sigma in proptest::collection::vec(0.0f64..5.0, 2..32), bump in 0.0f64..10.0, at in 0usize..32) {
            let cfg = RenderConfig::new(0.5, 4.0, sigma.len());
            let t = sample_along_ray::<ChaCha8Rng>(&cfg, None);
            let d = interval_lengths(&t, cfg.far);
            let (w0, _) = ray_weights(&sigma, &d);
            let mut more = sigma.clone();
            more[at % sigma.len()] += bump;
            let (w1, _) = ray_weights(&more, &d);
            prop_assert!(w1.iter().sum::<f64>() >= w0.iter().sum::<f64>() - 1e-12);
        }
    }

    fn tiny_field() -> NeuralField<f64> {
        let cfg = FieldConfig { pos_freqs: 2, dir_freqs: 1, trunk_layers: 2, trunk_width: 8, feature_dim: 3, include_input: true };
        init_field(&cfg, 5).unwrap()
    }

    fn zero_density(mut field: NeuralField<f64>) -> NeuralField<f64> {
        // softplus(-1e4) underflows to zero
        let d = field.density_layer();
        field.params_mut().get_mut(d.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        field.params_mut().get_mut(d.bias).data_mut()[0] = -1e4;
        field
    }

    #[test]
    fn zero_density_renders_background() {
        let field = zero_density(tiny_field());
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 45.0, 5, 4);
        let cfg = RenderConfig { background: [0.1, 0.2, 0.3], ..RenderConfig::new(1.0, 5.0, 8) };
        let out = render_image(&field, &cam, &cfg, None).unwrap();
        assert!(out.acc.iter().all(|&a| a == 0.0));
        for px in out.rgb.chunks(3) {
            assert_eq!(px, &[0.1f32, 0.2, 0.3]);
        }
        assert!(out.feat.data().iter().all(|&v| v == 0.0));
        let rays = [generate_ray(&cam, 0, 1, 1).unwrap()];
        let mut tape = Tape::new(true);
        let bound = field.bind(&mut tape);
        let b = render_batch(&field, &mut tape, &bound, &rays, &cfg, None, None).unwrap();
        assert_eq!(tape.value(b.rgb).data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn override_dominance_and_locality() {
        let field = tiny_field();
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 45.0, 6, 5);
        let cfg = RenderConfig::new(1.0, 5.0, 8);
        let plain = render_image(&field, &cam, &cfg, None).unwrap();
        let kept = render_image(&field, &cam, &cfg, Some(&KeepDensity)).unwrap();
        assert_eq!(plain, kept);
        let zeroed = render_image(&field, &cam, &cfg, Some(&ZeroDensity)).unwrap();
        let vacuum = render_image(&zero_density(field.clone()), &cam, &cfg, None).unwrap();
        assert_eq!(zeroed.rgb, vacuum.rgb);
        assert_eq!(zeroed.acc, vacuum.acc);
        assert!(plain.acc.iter().any(|&a| a > 0.0));
    }

    #[test]
    fn tracing_does_not_change_forward_values() {
        let field = tiny_field();
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 45.0, 4, 4);
        let rays: Vec<Ray> = (0..4).map(|i| generate_ray(&cam, 0, i, i).unwrap()).collect();
        let cfg = RenderConfig::new(1.0, 5.0, 8);
        let mut outs = Vec::new();
        for tracing in [false, true] {
            let mut tape = Tape::new(tracing);
            let bound = field.bind(&mut tape);
            let b = render_batch(&field, &mut tape, &bound, &rays, &cfg, None, None).unwrap();
            outs.push((tape.value(b.rgb).clone(), tape.value(b.feat).clone(), tape.value(b.acc).clone()));
        }
        assert_eq!(outs[0], outs[1]);
    }

    /// Field whose features are its colors, so rendered features must equal rendered rgb.
    #[test]
    fn features_share_color_weights() {
        let cfg_f = FieldConfig { pos_freqs: 2, dir_freqs: 1, trunk_layers: 2, trunk_width: 8, feature_dim: 3, include_input: true };
        let mut field = init_field::<f64>(&cfg_f, 9).unwrap();
        // tanh(x) = 2σ(2x) − 1: a direction-blind color head with doubled feature weights
        // gives feat = 2 rgb − acc under a black background
        let (col, fh) = (field.color_layer(), field.feature_layer());
        let width = 8;
        let fw = field.params().get(fh.weight).clone();
        let fb = field.params().get(fh.bias).clone();
        let mut cw = field.params().get(col.weight).clone();
        let cols = cw.cols();
        for r in 0..3 {
            for k in 0..cols {
                cw.data_mut()[r * cols + k] = if k < width { 2.0 * fw.data()[r * width + k] } else { 0.0 };
            }
        }
        *field.params_mut().get_mut(col.weight) = cw;
        *field.params_mut().get_mut(col.bias) = fb.map(|v| 2.0 * v);
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 45.0, 4, 4);
        let out = render_image(&field, &cam, &RenderConfig::new(1.0, 5.0, 16), None).unwrap();
        for i in 0..16 {
            let f = out.feat.pixel_at(i);
            for (k, got) in f.iter().enumerate() {
                let want = 2.0 * out.rgb[i * 3 + k] as f64 - out.acc[i] as f64;
                assert!((got - want).abs() < 1e-6, "{got} vs {want}");
            }
        }
    }

    fn render_loss(field: &NeuralField<f64>, tracing: bool) -> (f64, Option<crate::diffkernel::Gradients<f64>>) {
        let cam = Camera::look_at([0.3, 0.2, 1.5], [0.0; 3], [0.0, 1.0, 0.0], 60.0, 3, 3);
        let rays: Vec<Ray> = (0..3).map(|i| generate_ray(&cam, 0, i, 2 - i).unwrap()).collect();
        let cfg = RenderConfig { background: [0.3, 0.6, 0.9], ..RenderConfig::new(0.5, 2.5, 2) };
        let mut tape = Tape::new(tracing);
        let bound = field.bind(&mut tape);
        let b = render_batch(field, &mut tape, &bound, &rays, &cfg, None, None).unwrap();
        // weight every output differently so no gradient cancels by symmetry
        let mut terms = Vec::new();
        for (v, salt) in [(b.rgb, 0.7), (b.feat, -1.3), (b.acc, 0.4)] {
            let shape = tape.value(v).dims().to_vec();
            let n = tape.value(v).len();
            let wts = Tensor::new(shape, (0..n).map(|i| salt * (1.0 + i as f64 * 0.37).sin()).collect()).unwrap();
            let w = tape.constant(wts);
            let m = tape.mul(v, w).unwrap();
            terms.push(tape.sum(m));
        }
        let l01 = tape.add(terms[0], terms[1]).unwrap();
        let loss = tape.add(l01, terms[2]).unwrap();
        let value = tape.value(loss).data()[0];
        (value, tracing.then(|| tape.backward(loss).unwrap()))
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        let cfg_f = FieldConfig { pos_freqs: 2, dir_freqs: 1, trunk_layers: 2, trunk_width: 6, feature_dim: 2, include_input: true };
        let field = init_field::<f64>(&cfg_f, 17).unwrap();
        let (_, grads) = render_loss(&field, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (id, _, tensor) in field.params().iter() {
            let analytic = grads.get(id).unwrap();
            for k in 0..tensor.len() {
                let mut plus = field.clone();
                plus.params_mut().get_mut(id).data_mut()[k] += h;
                let mut minus = field.clone();
                minus.params_mut().get_mut(id).data_mut()[k] -= h;
                let numeric = (render_loss(&plus, false).0 - render_loss(&minus, false).0) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-4);
                assert!((a - numeric).abs() / denom < 1e-5, "{}[{k}]: analytic {a} numeric {numeric}", field.params().name(id));
                checked += 1;
            }
        }
        assert!(checked > 50);
    }
}
