use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, ParamId};
use super::tensor::{Real, Tensor};
use super::KernelError;

/// Named trainable tensors, addressed by [`ParamId`] (the index into the set).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries.iter().enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter plus per-parameter step counters.
///
/// A parameter's counter advances only on steps that update it, so a tensor
/// that joins training late starts with a fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: Vec<u64>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.dims())).collect();
        Self { m: zeros.clone(), v: zeros, steps: vec![0; params.len()] }
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.steps[id.0]
    }

    pub fn first_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: ParamId) -> &Tensor<T> {
        &self.v[id.0]
    }
}

/// One bias-corrected Adam update of every parameter selected by `active`.
/// Parameters without an entry in `grads` are updated with a zero gradient.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    active: impl Fn(ParamId) -> bool,
) -> Result<(), KernelError> {
    if state.m.len() != params.len() {
        return Err(KernelError::Shape(format!(
            "optimizer state holds {} tensors, parameter set {}",
            state.m.len(),
            params.len()
        )));
    }
    for id in params.ids().collect::<Vec<_>>() {
        if !active(id) {
            continue;
        }
        let p = params.get_mut(id);
        if let Some(g) = grads.get(id) {
            if g.dims() != p.dims() {
                return Err(KernelError::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
        }
        state.steps[id.0] += 1;
        let t = state.steps[id.0] as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let g = grads.get(id).map(|g| g.data());
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.map_or(T::zero(), |g| g[i]);
            let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
            let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi.as_f64() / bc1;
            let v_hat = vi.as_f64() / bc2;
            let delta = lr * m_hat / (v_hat.sqrt() + cfg.eps);
            pd[i] -= T::lit(delta);
        }
    }
    Ok(())
}

/// Cosine annealing from `base_lr` down to `min_lr` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize, min_lr: f64) -> Result<Self, KernelError> {
        if base_lr.is_nan() || base_lr <= 0.0 || total_steps == 0 || min_lr.is_nan() || min_lr < 0.0 || min_lr > base_lr {
            return Err(KernelError::Contract(format!(
                "invalid schedule: base {base_lr}, min {min_lr}, steps {total_steps}"
            )));
        }
        Ok(Self { base_lr, total_steps, min_lr })
    }

    /// Steps outside `[0, total_steps]` are clamped.
    pub fn lr(&self, step: usize) -> f64 {
        cosine_lr(self, step)
    }
}

pub fn cosine_lr(schedule: &LrSchedule, step: usize) -> f64 {
    let s = step.min(schedule.total_steps) as f64 / schedule.total_steps as f64;
    schedule.min_lr + (schedule.base_lr - schedule.min_lr) * 0.5 * (1.0 + (PI * s).cos())
}
