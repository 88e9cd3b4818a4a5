use super::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update using each tensor's accumulated `grad` (missing
    /// gradients count as zero).
    pub fn step(&mut self, params: &mut [Tensor]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.take();
            sgd_update(
                p.data_mut(),
                grad.as_deref(),
                v,
                self.lr,
                self.momentum,
                self.weight_decay,
            );
            p.grad = grad;
        }
    }
}

/// One in-place momentum-SGD update of a single parameter buffer.
pub fn sgd_update(
    param: &mut [f64],
    grad: Option<&[f64]>,
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for i in 0..param.len() {
        let g = grad.map_or(0.0, |g| g[i]);
        velocity[i] = momentum * velocity[i] + g + weight_decay * param[i];
        param[i] -= lr * velocity[i];
    }
}
