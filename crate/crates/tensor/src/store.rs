//! Named parameter collection with Adam state.
//!
//! Parameters keep their registration order, which fixes the iteration order
//! of every optimizer step and gradient reduction, so runs are reproducible
//! for any thread count.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub u32);

#[derive(Clone)]
struct Param<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

#[derive(Clone)]
pub struct ParameterStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
    /// Adam step count, shared by all parameters in the store.
    step: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { params: Vec::new(), by_name: HashMap::new(), step: 0 }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len() as u32);
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(value.shape()),
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            value: Arc::new(value),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self.by_name.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0 as usize].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0 as usize].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.params[id.0 as usize].value)
    }

    /// Mutable access to a parameter value. Steps between forward passes own
    /// the store uniquely, so this never copies in practice.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0 as usize].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len() as u32).map(ParamId)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0 as usize].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        self.params[id.0 as usize].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for v in p.grad.data_mut() {
                *v = T::zero();
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sum of squared gradient entries, for diagnostics.
    pub fn grad_sq_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm()).sum()
    }

    /// One Adam update over every parameter from the accumulated gradients;
    /// gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let c1 = T::one() - T::from_f64(cfg.beta1.powi(t));
        let c2 = T::one() - T::from_f64(cfg.beta2.powi(t));
        for p in &mut self.params {
            let value = Arc::make_mut(&mut p.value);
            for i in 0..value.numel() {
                let g = p.grad.data()[i];
                let m = b1 * p.m.data()[i] + (T::one() - b1) * g;
                let v = b2 * p.v.data()[i] + (T::one() - b2) * g * g;
                p.m.data_mut()[i] = m;
                p.v.data_mut()[i] = v;
                let m_hat = m / c1;
                let v_hat = v / c2;
                value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                p.grad.data_mut()[i] = T::zero();
            }
        }
    }

    /// Copy parameter values (not optimizer state) from a same-shaped store.
    pub fn copy_values_from(&mut self, other: &ParameterStore<T>) {
        assert_eq!(self.params.len(), other.params.len(), "store layout mismatch");
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(dst.name, src.name, "store layout mismatch");
            dst.value = Arc::clone(&src.value);
        }
    }

    /// Reset Adam moments and step count, keeping values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            for v in p.m.data_mut() {
                *v = T::zero();
            }
            for v in p.v.data_mut() {
                *v = T::zero();
            }
        }
    }
}

/// `U(-a, a)` init, sampled in f64 so f32 and f64 stores agree bitwise after
/// rounding.
pub fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], a: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-a..a))).collect();
    Tensor::from_vec(shape, data)
}

/// Kaiming normal init for ReLU layers: `N(0, sqrt(2 / fan_in))`.
pub fn kaiming_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}
