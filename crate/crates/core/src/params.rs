//! Named trainable tensors and their binding onto a gradient tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Sgd, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor.into_param());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a tape leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Adds the tape gradients of `vars` (as returned by [`ParamSet::bind`])
    /// into each parameter's `grad`.
    pub fn pull_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn step(&mut self, opt: &mut Sgd) {
        opt.step(&mut self.tensors);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn entries(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Overwrites values from checkpoint entries named `prefix + name`.
    /// Every parameter must be present with a matching shape.
    pub fn load_entries(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            let key = format!("{prefix}{name}");
            let (_, src) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("checkpoint parameter", src.shape(), t.shape()));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        checkpoint::encode(&self.entries(""))
    }
}

/// Normal(0, std) truncated to ±2·std by resampling.
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches")
}

pub fn constant(shape: &[usize], value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![value; n]).expect("shape matches")
}
