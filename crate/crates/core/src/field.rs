//! The neural feature field: positional encoding, a ReLU trunk, and three heads.
//!
//! * density: `softplus(linear(trunk))`, one channel
//! * color: `sigmoid(linear([trunk, enc(d)]))`, three channels, view dependent
//! * feature: `tanh(linear(trunk))`, `feature_dim` channels, position only

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{Activation, KernelError, ParamId, ParamSet, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub feature_dim: usize,
    pub include_input: bool,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            trunk_layers: 4,
            trunk_width: 128,
            feature_dim: 64,
            include_input: true,
        }
    }
}

impl FieldConfig {
    /// Small configuration for CPU-sized scenes.
    pub fn desk() -> Self {
        Self { feature_dim: 8, ..Self::default() }
    }

    pub fn pos_encoding_len(&self) -> usize {
        encoding_len(self.pos_freqs, self.include_input)
    }

    pub fn dir_encoding_len(&self) -> usize {
        encoding_len(self.dir_freqs, self.include_input)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.trunk_layers == 0 || self.trunk_width == 0 || self.feature_dim == 0 {
            return Err(KernelError::Contract(format!("invalid field config {self:?}")));
        }
        if self.pos_encoding_len() == 0 || self.dir_encoding_len() == 0 {
            return Err(KernelError::Contract(
                "encoding is empty: enable include_input or use at least one frequency".into(),
            ));
        }
        Ok(())
    }
}

pub fn encoding_len(freqs: usize, include_input: bool) -> usize {
    3 * (usize::from(include_input) + 2 * freqs)
}

/// Frequency encoding of a 3-vector.
///
/// Layout: `[x, y, z]` (if `include_input`), then for each `k` in `0..freqs`
/// the block `[sin(2^k π x), sin(2^k π y), sin(2^k π z), cos(2^k π x), cos(2^k π y), cos(2^k π z)]`.
pub fn positional_encode(p: [f64; 3], freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoding_len(freqs, include_input));
    encode_into(p, freqs, include_input, &mut out);
    out
}

pub(crate) fn encode_into<T: Real>(p: [f64; 3], freqs: usize, include_input: bool, out: &mut Vec<T>) {
    if include_input {
        out.extend(p.iter().map(|&v| T::lit(v)));
    }
    let mut scale = PI;
    for _ in 0..freqs {
        out.extend(p.iter().map(|&v| T::lit((scale * v).sin())));
        out.extend(p.iter().map(|&v| T::lit((scale * v).cos())));
        scale *= 2.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralField<T> {
    config: FieldConfig,
    params: ParamSet<T>,
    trunk: Vec<LayerIds>,
    density: LayerIds,
    color: LayerIds,
    feature: LayerIds,
}

/// Parameter handles of a field on one particular tape.
#[derive(Clone, Debug)]
pub struct BoundField {
    trunk: Vec<(Var, Var)>,
    density: (Var, Var),
    color: (Var, Var),
    feature: (Var, Var),
}

/// Tape nodes produced by one batched field evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    /// `P × 1`
    pub sigma: Var,
    /// `P × 3`
    pub rgb: Var,
    /// `P × C`
    pub feat: Var,
}

/// Plain-value output of [`NeuralField::evaluate`], row-major per point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBatch<T> {
    pub sigma: Vec<T>,
    pub rgb: Vec<T>,
    pub feat: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub feat: Vec<f64>,
}

/// Uniform `±1/√fan_in` weights, zero biases, deterministic per seed.
pub fn init_field<T: Real>(config: &FieldConfig, seed: u64) -> Result<NeuralField<T>, KernelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::default();
    let mut layer = |name: &str, fan_in: usize, fan_out: usize, params: &mut ParamSet<T>| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<T> =
            (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        let weight = params.push(
            format!("{name}.weight"),
            Tensor::matrix(fan_out, fan_in, w).expect("layer dims are positive"),
        );
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        LayerIds { weight, bias }
    };
    let width = config.trunk_width;
    let mut trunk = Vec::with_capacity(config.trunk_layers);
    for i in 0..config.trunk_layers {
        let fan_in = if i == 0 { config.pos_encoding_len() } else { width };
        trunk.push(layer(&format!("trunk.{i}"), fan_in, width, &mut params));
    }
    let density = layer("density", width, 1, &mut params);
    let color = layer("color", width + config.dir_encoding_len(), 3, &mut params);
    let feature = layer("feature", width, config.feature_dim, &mut params);
    Ok(NeuralField { config: config.clone(), params, trunk, density, color, feature })
}

impl<T: Real> NeuralField<T> {
    /// Rebuilds a field from named tensors, checking every shape against `config`.
    pub fn from_params(config: FieldConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, KernelError> {
        let template = init_field::<T>(&config, 0)?;
        let mut params = ParamSet::default();
        for (id, name, t) in template.params.iter() {
            let (_, tensor) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| KernelError::Contract(format!("missing parameter {name}")))?;
            if tensor.dims() != t.dims() {
                return Err(KernelError::Shape(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    t.dims(),
                    tensor.dims()
                )));
            }
            let pushed = params.push(name, tensor.clone());
            debug_assert_eq!(pushed, id);
        }
        if named.len() != template.params.len() {
            return Err(KernelError::Contract(format!(
                "expected {} parameters, got {}",
                template.params.len(),
                named.len()
            )));
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn trunk_layers(&self) -> &[LayerIds] {
        &self.trunk
    }

    pub fn density_layer(&self) -> LayerIds {
        self.density
    }

    pub fn color_layer(&self) -> LayerIds {
        self.color
    }

    pub fn feature_layer(&self) -> LayerIds {
        self.feature
    }

    pub fn is_feature_head(&self, id: ParamId) -> bool {
        id == self.feature.weight || id == self.feature.bias
    }

    pub fn cast<U: Real>(&self) -> NeuralField<U> {
        NeuralField {
            config: self.config.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            density: self.density,
            color: self.color,
            feature: self.feature,
        }
    }

    /// Registers all parameters on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundField {
        self.bind_with(tape, |_| true)
    }

    /// Registers parameters, making only those selected by `trainable`
    /// differentiable; the rest enter the tape as constants.
    pub fn bind_with(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamId) -> bool) -> BoundField {
        let mut put = |id: ParamId| {
            let value = self.params.get(id).clone();
            if trainable(id) {
                tape.param(id, value)
            } else {
                tape.constant(value)
            }
        };
        let mut pair = |l: LayerIds| (put(l.weight), put(l.bias));
        BoundField {
            trunk: self.trunk.iter().map(|&l| pair(l)).collect(),
            density: pair(self.density),
            color: pair(self.color),
            feature: pair(self.feature),
        }
    }

    /// Batched evaluation on a tape. `enc_pos` is `P × pos_len`, `enc_dir` is `P × dir_len`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundField,
        enc_pos: Var,
        enc_dir: Var,
    ) -> Result<FieldVars, KernelError> {
        let mut h = enc_pos;
        for &(w, b) in &bound.trunk {
            let z = tape.linear(h, w, b)?;
            h = tape.activation(Activation::Relu, z);
        }
        let s = tape.linear(h, bound.density.0, bound.density.1)?;
        let sigma = tape.activation(Activation::Softplus, s);
        let hd = tape.concat_cols(h, enc_dir)?;
        let c = tape.linear(hd, bound.color.0, bound.color.1)?;
        let rgb = tape.activation(Activation::Sigmoid, c);
        let f = tape.linear(h, bound.feature.0, bound.feature.1)?;
        let feat = tape.activation(Activation::Tanh, f);
        Ok(FieldVars { sigma, rgb, feat })
    }

    pub fn encode_positions(&self, points: &[[f64; 3]]) -> Tensor<T> {
        let n = self.config.pos_encoding_len();
        let mut data = Vec::with_capacity(points.len() * n);
        for &p in points {
            encode_into(p, self.config.pos_freqs, self.config.include_input, &mut data);
        }
        Tensor::matrix(points.len(), n, data).expect("non-empty point batch")
    }

    pub fn encode_directions(&self, dirs: &[[f64; 3]]) -> Tensor<T> {
        let n = self.config.dir_encoding_len();
        let mut data = Vec::with_capacity(dirs.len() * n);
        for &d in dirs {
            encode_into(d, self.config.dir_freqs, self.config.include_input, &mut data);
        }
        Tensor::matrix(dirs.len(), n, data).expect("non-empty direction batch")
    }

    /// Untraced evaluation at `points` viewed along `dirs` (same length, non-empty).
    pub fn evaluate(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<FieldBatch<T>, KernelError> {
        if points.len() != dirs.len() || points.is_empty() {
            return Err(KernelError::Shape(format!(
                "{} points with {} directions",
                points.len(),
                dirs.len()
            )));
        }
        let mut tape = Tape::new(false);
        let bound = self.bind(&mut tape);
        let ep = tape.constant(self.encode_positions(points));
        let ed = tape.constant(self.encode_directions(dirs));
        let out = self.forward(&mut tape, &bound, ep, ed)?;
        Ok(FieldBatch {
            sigma: tape.value(out.sigma).data().to_vec(),
            rgb: tape.value(out.rgb).data().to_vec(),
            feat: tape.value(out.feat).data().to_vec(),
        })
    }
}

/// Density, color, and feature at a single point seen along `d`.
pub fn query_field<T: Real>(field: &NeuralField<T>, x: [f64; 3], d: [f64; 3]) -> FieldSample {
    let b = field.evaluate(&[x], &[d]).expect("single-point batch is well formed");
    FieldSample {
        sigma: b.sigma[0].as_f64(),
        rgb: [b.rgb[0].as_f64(), b.rgb[1].as_f64(), b.rgb[2].as_f64()],
        feat: b.feat.iter().map(|v| v.as_f64()).collect(),
    }
}
