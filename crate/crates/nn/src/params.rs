use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::Gradients;
use crate::rng::{fnv1a, mix64};
use crate::{NnError, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A learnable tensor together with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }
}

/// Named parameters in insertion order, plus the shared Adam step counter.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value: Arc::new(value),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        Ok(())
    }

    /// Insert a tensor drawn from `N(0, std²)`.
    ///
    /// The stream is keyed by `(seed, name)` only, so a parameter gets the
    /// same initial value whichever other parameters exist alongside it.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed) ^ fnv1a(name.as_bytes()));
        let dist = Normal::new(0.0, std).map_err(|e| NnError::InvalidArgument {
            op: "insert_normal",
            msg: e.to_string(),
        })?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: T) -> Result<()> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(NnError::UnknownParam(name.to_string())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(name)?.value())
    }

    pub(crate) fn value_arc(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        Ok(Arc::clone(&self.get(name)?.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Add the parameter gradients of one backward pass into the store.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in grads.params() {
            let Some(g) = g else { continue };
            let p = self.get_mut(name)?;
            if p.grad.shape() != g.shape() {
                return Err(NnError::shape("accumulate", &[p.grad.shape(), g.shape()]));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// One Adam update with bias correction; increments the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let c1 = T::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let one = T::one();
        for p in &mut self.params {
            let Param { value, grad, m, v, .. } = p;
            let value = Arc::make_mut(value);
            for (((w, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Plain gradient step `w -= lr * grad`.
    pub fn sgd_step(&mut self, lr: f64) {
        self.step += 1;
        let lr = T::from_f64(lr);
        for p in &mut self.params {
            let Param { value, grad, .. } = p;
            for (w, &g) in Arc::make_mut(value).data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * g;
            }
        }
    }

    /// Copy of the store in another precision, moments included.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }
}
