//! Reverse-mode differentiable arrays: the tensor type, the operation tape,
//! parameters, and the optimizer.
//!
//! Every forward primitive records a node on a [`Graph`]; [`Graph::backward`]
//! walks the tape once in reverse insertion order and accumulates gradients
//! into the [`ParamStore`]. There is no broadcasting apart from per-channel
//! bias and batch-norm affine terms; mismatched shapes are reported as
//! [`crate::Error::Shape`].

pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod param;
mod tensor;

pub use graph::{BatchStats, BnMode, Gradients, Graph, Var, BN_EPS};
pub use optim::{clip_grad_norm, lr_schedule, sgd_step, uniform_rates, GroupRates};
pub use param::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

/// Momentum used when folding batch statistics into running estimates.
pub const BN_RUNNING_MOMENTUM: f64 = 0.1;

/// Running mean/variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average, stored at `f32` precision like parameters.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = BN_RUNNING_MOMENTUM;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = ((1.0 - m) * *r + m * b) as f32 as f64;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = ((1.0 - m) * *r + m * b) as f32 as f64;
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[cfg(test)]
mod tests;
