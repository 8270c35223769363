use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Forward, ForwardOptions, QpNet};
use crate::diffcore::{
    clip_grad_norm, lr_schedule, sgd_step, uniform_rates, Graph, GroupRates, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::child_rng;
use crate::synthdata::VideoSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Clamped to `epochs - 1` for short runs.
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            warmup_epochs: 6,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(CLIP_NORM),
            seed: 0,
        }
    }
}

pub const CLIP_NORM: f64 = 10.0;

/// Optimizer settings for one supervised step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig {
    pub rates: GroupRates,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub reg: f64,
    pub rec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_reg: f64,
    pub mean_rec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// Concatenates `T × 1 × H × W` sequences into a `B × T × 1 × H × W` batch.
pub fn batch_tensor(frames: &[&Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * frames.len());
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::Shape {
                op: "batch_tensor",
                lhs: first.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(&shape, data)
}

/// One supervised step: train-mode forward, backward, SGD, running-stat
/// update.
pub fn train_step(
    model: &mut QpNet,
    x: &Tensor,
    y: &[f64],
    step: &StepConfig,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let out = Forward::new(model, &mut g, ForwardOptions::train()).run(&mut g, x, Some(y))?;
    let losses = StepLosses {
        total: g.value(out.loss_total).item().unwrap_or(f64::NAN),
        reg: out
            .loss_reg
            .and_then(|v| g.value(v).item())
            .unwrap_or(f64::NAN),
        rec: g.value(out.loss_rec).item().unwrap_or(f64::NAN),
    };
    if !losses.total.is_finite() {
        return Ok(losses);
    }
    model.params_mut().zero_grad();
    g.backward(out.loss_total, model.params_mut())?;
    if let Some(max_norm) = step.clip_norm {
        clip_grad_norm(model.params_mut(), max_norm);
    }
    sgd_step(
        model.params_mut(),
        &step.rates,
        step.momentum,
        step.weight_decay,
    )?;
    model.apply_bn_updates(&out.bn_updates);
    Ok(losses)
}

/// Supervised training on `samples` with a warmup + cosine schedule.
/// Zero epochs leave the model untouched.
pub fn train(model: &mut QpNet, samples: &[VideoSample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, samples, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut QpNet,
    samples: &[VideoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    if samples.is_empty() || cfg.batch_size == 0 {
        return Err(Error::invalid(
            "training needs samples and a positive batch size",
        ));
    }
    let warmup = cfg.warmup_epochs.min(cfg.epochs - 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, warmup, cfg.lr)?;
        let step_cfg = StepConfig {
            rates: uniform_rates(lr),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: cfg.clip_norm,
        };
        let mut rng = child_rng(cfg.seed, 0x7368_7566, epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut reg, mut rec, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // batch norm needs more than one value per channel
            if chunk.len() < 2 {
                continue;
            }
            let frames: Vec<&Tensor> = chunk.iter().map(|&i| &samples[i].frames).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| samples[i].ef_true).collect();
            let x = batch_tensor(&frames)?;
            let l = train_step(model, &x, &targets, &step_cfg)?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, step {step}: {}",
                    l.total
                )));
            }
            total += l.total;
            reg += l.reg;
            rec += l.rec;
            steps += 1;
        }
        let n = steps.max(1) as f64;
        let stats = EpochStats {
            epoch,
            lr,
            mean_total: total / n,
            mean_reg: reg / n,
            mean_rec: rec / n,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Eval-mode predictions for a `B × T × 1 × H × W` batch.
pub fn predict(model: &QpNet, x: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = Forward::new(model, &mut g, ForwardOptions::eval()).run(&mut g, x, None)?;
    Ok(g.value(out.y_hat).data().to_vec())
}
