//! Momentum SGD and the warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::param::{ParamGroup, ParamStore};
use crate::error::{Error, Result};

/// Learning rate per parameter group.
pub type GroupRates = BTreeMap<ParamGroup, f64>;

/// The same rate for every group.
pub fn uniform_rates(lr: f64) -> GroupRates {
    ParamGroup::ALL.iter().map(|&g| (g, lr)).collect()
}

/// Classic (heavy-ball) momentum update with L2 weight decay:
///
/// ```text
/// d   = grad + weight_decay * value
/// buf = momentum * buf + d
/// value -= lr * buf
/// ```
///
/// Momentum buffers persist in the store across calls. Updated values are
/// rounded back onto the `f32` grid.
pub fn sgd_step(
    store: &mut ParamStore,
    rates: &GroupRates,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (_, p) in store.iter() {
        if !rates.contains_key(&p.group()) {
            return Err(Error::invalid(format!(
                "no learning rate for group {} (param {})",
                p.group(),
                p.name()
            )));
        }
    }
    for p in store.iter_mut() {
        let lr = rates[&p.group()];
        let (value, grad, buf) = p.parts_mut();
        for ((w, &g), b) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(buf.data_mut())
        {
            let d = g + weight_decay * *w;
            *b = momentum * *b + d;
            if lr != 0.0 {
                *w -= lr * *b;
            }
        }
        if lr != 0.0 {
            value.round_to_f32();
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad().data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad_mut().data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Learning rate for `epoch` (0-based): a linear ramp reaching `base_lr` at
/// `epoch = warmup_epochs` (the first epoch already trains at
/// `base_lr / warmup_epochs`), then cosine decay towards zero over the
/// remaining epochs.
pub fn lr_schedule(
    epoch: usize,
    total_epochs: usize,
    warmup_epochs: usize,
    base_lr: f64,
) -> Result<f64> {
    if warmup_epochs >= total_epochs {
        return Err(Error::invalid(format!(
            "warmup ({warmup_epochs}) must be shorter than training ({total_epochs})"
        )));
    }
    if epoch >= total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    if epoch < warmup_epochs {
        return Ok(base_lr * (epoch + 1) as f64 / warmup_epochs as f64);
    }
    let progress = (epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64;
    Ok(0.5 * base_lr * (1.0 + (PI * progress).cos()))
}
