use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Decay is applied to matrices (rank ≥ 2) only; vectors such as biases and
/// layer-norm gains are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub(crate) fn from_parts(config: AdamConfig, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Self {
        AdamState {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.first, &self.second)
    }

    /// Applies one update with learning rate `lr` to every parameter.
    pub fn step(&mut self, params: &mut [Param<T>], lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || params
                .iter()
                .zip(&self.first)
                .any(|(p, m)| p.tensor.numel() != m.len())
        {
            return Err(Error::shape(
                "adam_step",
                &params.iter().map(|p| p.tensor.numel()).collect::<Vec<_>>(),
                &self.first.iter().map(Vec::len).collect::<Vec<_>>(),
            ));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr_t, eps) = (T::lit(lr), T::lit(c.eps));
        let (inv_bias1, inv_bias2) = (T::lit(1.0 / bias1), T::lit(1.0 / bias2));

        for ((param, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let decay = if param.tensor.shape().len() >= 2 {
                T::lit(c.weight_decay)
            } else {
                T::zero()
            };
            let grad = param.tensor.grad().expect("checked above").to_vec();
            let values = param.tensor.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] * inv_bias1;
                let v_hat = v[i] * inv_bias2;
                values[i] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + decay * values[i]);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut [Param<T>], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum();
    let norm = total.sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / (norm + 1e-6));
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad() {
                let scaled = g.iter().map(|&v| v * s).collect();
                p.tensor.set_grad(Some(scaled));
            }
        }
    }
    norm
}
