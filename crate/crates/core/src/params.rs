//! Named trainable-parameter storage with deterministic seeded
//! initialization and per-parameter gradient accumulators.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::{fnv1a64, splitmix64};
use crate::error::CoreError;
use crate::matrix::Matrix;
use crate::Result;

/// How a parameter is filled at registration time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `[-r, r]` with `r = 1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// All trainable arrays, keyed by a dotted path. Each parameter draws from
/// its own ChaCha8 stream seeded by `(store seed, path hash)`, so stores
/// built with the same seed and configuration are element-wise identical
/// regardless of registration order.
#[derive(Clone, Debug)]
pub struct ParameterStore<F> {
    seed: u64,
    params: BTreeMap<String, Matrix<F>>,
    grads: BTreeMap<String, Matrix<F>>,
}

impl<F: Float> ParameterStore<F> {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            seed,
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a parameter. Paths are unique; re-registering is an error.
    pub fn register(&mut self, path: &str, rows: usize, cols: usize, init: Init) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(CoreError::config(format!(
                "parameter path {path:?} registered twice"
            )));
        }
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::from_fn(rows, cols, |_, _| F::one()),
            Init::Uniform { fan_in } => {
                let radius = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ fnv1a64(path.as_bytes())));
                Matrix::from_fn(rows, cols, |_, _| {
                    let u: f64 = rng.gen();
                    crate::cast((2.0 * u - 1.0) * radius)
                })
            }
        };
        self.grads.insert(path.to_string(), Matrix::zeros(rows, cols));
        self.params.insert(path.to_string(), value);
        Ok(())
    }

    /// Install an explicit value (checkpoint restore). Shape is fixed by the
    /// provided matrix; the path must not already exist.
    pub fn install(&mut self, path: &str, value: Matrix<F>) -> Result<()> {
        if self.params.contains_key(path) {
            return Err(CoreError::config(format!(
                "parameter path {path:?} registered twice"
            )));
        }
        self.grads
            .insert(path.to_string(), Matrix::zeros(value.rows(), value.cols()));
        self.params.insert(path.to_string(), value);
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Matrix<F>> {
        self.params
            .get(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))
    }

    /// Mutable access for optimizer updates; the shape must not change.
    pub fn get_mut(&mut self, path: &str) -> Result<&mut Matrix<F>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))
    }

    pub fn grad(&self, path: &str) -> Result<&Matrix<F>> {
        self.grads
            .get(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))
    }

    /// Add `delta` into one flattened element of a parameter (used by the
    /// finite-difference checker).
    pub fn nudge(&mut self, path: &str, flat_index: usize, delta: F) -> Result<()> {
        let m = self
            .params
            .get_mut(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))?;
        let v = m
            .data_mut()
            .get_mut(flat_index)
            .ok_or_else(|| CoreError::config(format!("element {flat_index} out of range for {path:?}")))?;
        *v = *v + delta;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = F::zero();
            }
        }
    }

    /// Accumulate a gradient contribution for one parameter.
    pub fn accumulate_grad(&mut self, path: &str, contribution: &Matrix<F>) -> Result<()> {
        let g = self
            .grads
            .get_mut(path)
            .ok_or_else(|| CoreError::MissingParameter(path.to_string()))?;
        if g.shape() != contribution.shape() {
            return Err(CoreError::config(format!(
                "gradient shape {:?} does not match parameter {path:?} shape {:?}",
                contribution.shape(),
                g.shape()
            )));
        }
        for (dst, src) in g.data_mut().iter_mut().zip(contribution.data()) {
            *dst = *dst + *src;
        }
        Ok(())
    }

    /// Iterate parameters in path order (deterministic).
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    /// Export all parameters as `f64` matrices (checkpointing, traces).
    pub fn export(&self) -> BTreeMap<String, Matrix<f64>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.to_f64()))
            .collect()
    }
}
