use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LmrlError, Result};

use super::tape::Gradients;
use super::tensor::Tensor;

/// How a parameter is filled at registration.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// uniform(−1/√fan_in, +1/√fan_in)
    Uniform {
        fan_in: usize,
    },
    Constant(f64),
    /// Identity matrix; shape must be square.
    Identity,
}

#[derive(Clone, Debug)]
struct Param {
    value: Tensor,
    grad: Tensor,
}

/// Named learnable tensors with gradient slots.
///
/// Initial values depend only on the seed and the registration order, so
/// the same model configuration always yields bit-identical parameters.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(LmrlError::Config(format!("duplicate parameter `{name}`")));
        }
        let value = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| (2.0 * rng.random::<f64>() - 1.0) * bound)
            }
            Init::Constant(c) => Tensor::filled(shape, c),
            Init::Identity => match shape {
                [a, b] if a == b => Tensor::eye(*a),
                _ => {
                    return Err(LmrlError::Config(format!(
                        "identity init needs a square shape, got {shape:?}"
                    )))
                }
            },
        };
        let grad = Tensor::zeros(shape);
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| LmrlError::MissingParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return crate::error::shape_err("ParamStore::set", p.value.shape(), value.shape());
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds `scale · grad` for every parameter the tape touched.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (name, g) in grads.params() {
            if let Some(p) = self.params.get_mut(name) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Adam optimizer state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            lr,
            betas,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are zeroed afterwards. Non-finite gradients abort before any update.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in &store.params {
            if let Some(bad) = p.grad.data().iter().find(|v| !v.is_finite()) {
                return Err(LmrlError::Training(format!(
                    "non-finite gradient ({bad}) in parameter `{name}`"
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in store.params.iter_mut() {
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                value[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
