//! Test-time adaptation.
//!
//! Each test video is expanded into `K` augmented views. Batch-norm affine
//! parameters are then trained on `L_var + L_rec`, the spread of the view
//! predictions plus their reconstruction error, with one learning rate per
//! batch-norm group. Running statistics keep their source values unless a
//! refresh is requested. The reported prediction is the mean over the views
//! in eval mode.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_chains, AugChain};
use crate::diffcore::{sgd_step, Graph, GroupRates, ParamGroup, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::files::csv_error;
use crate::qpnet::{batch_tensor, Forward, ForwardOptions, QpNet, Trainable};
use crate::rng::derive_seed;
use crate::synthdata::VideoSample;

const CHAIN_STREAM: u64 = 0x7474_7400;
const SOURCE_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub k: usize,
    pub steps: usize,
    pub lr_base: f64,
    pub lr_periodic: f64,
    pub lr_aperiodic: f64,
    pub momentum: f64,
    /// Restore the checkpoint before every sample.
    pub episodic: bool,
    /// `false` trains every batch-norm group at `lr_base`.
    pub differential_rates: bool,
    /// `false` drops `L_var` from the objective.
    pub variance_term: bool,
    /// Run without the helix/CDE decomposition.
    pub bypass_decomposition: bool,
    /// Fold the view batch statistics into the running estimates after each
    /// step, so the final eval-mode pass sees them.
    pub refresh_running_stats: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: 8,
            steps: 10,
            lr_base: 1e-4,
            lr_periodic: 1e-5,
            lr_aperiodic: 1e-3,
            momentum: 0.0,
            episodic: true,
            differential_rates: true,
            variance_term: true,
            bypass_decomposition: false,
            refresh_running_stats: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!(
                "K = {}: at least two views are needed",
                self.k
            )));
        }
        let rates = [
            ("lr_base", self.lr_base),
            ("lr_periodic", self.lr_periodic),
            ("lr_aperiodic", self.lr_aperiodic),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "{name} = {v} must be a non-negative number"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum = {} outside [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Per-group learning rates; the backbone is frozen.
    pub fn rates(&self) -> GroupRates {
        let mut r = BTreeMap::new();
        if self.differential_rates {
            r.insert(ParamGroup::PeriodicBn, self.lr_periodic);
            r.insert(ParamGroup::AperiodicBn, self.lr_aperiodic);
        } else {
            r.insert(ParamGroup::PeriodicBn, self.lr_base);
            r.insert(ParamGroup::AperiodicBn, self.lr_base);
        }
        r.insert(ParamGroup::BaseBn, self.lr_base);
        r.insert(ParamGroup::Backbone, 0.0);
        r
    }
}

/// Population variance `(1/K) Σ (ŷ_k − ȳ)²`.
pub fn variance(preds: &[f64]) -> Result<f64> {
    if preds.len() < 2 {
        return Err(Error::invalid("variance needs at least two predictions"));
    }
    let n = preds.len() as f64;
    let mean = preds.iter().sum::<f64>() / n;
    Ok(preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n)
}

/// Differentiable population variance of a `[K]` prediction vector.
pub fn variance_loss(g: &mut Graph, preds: Var) -> Result<Var> {
    let k = match *g.shape(preds) {
        [k] if k >= 2 => k,
        _ => {
            return Err(Error::Shape {
                op: "variance_loss",
                lhs: g.shape(preds).to_vec(),
                rhs: vec![2],
            })
        }
    };
    let kf = k as f64;
    let centering: Vec<f64> = (0..k * k)
        .map(|i| {
            if i / k == i % k {
                1.0 - 1.0 / kf
            } else {
                -1.0 / kf
            }
        })
        .collect();
    let centered = g.mix_axis(preds, 0, Arc::new(Tensor::new(&[k, k], centering)?))?;
    let zero = g.constant(Tensor::zeros(&[k]));
    g.squared_error(centered, zero)
}

/// Batch-norm affine parameters by group. Every other parameter is frozen.
pub fn collect_param_groups(model: &QpNet) -> Result<BTreeMap<ParamGroup, Vec<ParamId>>> {
    let mut groups: BTreeMap<ParamGroup, Vec<ParamId>> = [
        ParamGroup::PeriodicBn,
        ParamGroup::AperiodicBn,
        ParamGroup::BaseBn,
    ]
    .into_iter()
    .map(|g| (g, Vec::new()))
    .collect();
    let params = model.params();
    for (name, gamma, beta) in model.batch_norm_params() {
        for id in [gamma, beta] {
            let group = params.get(id).group();
            if !group.is_batch_norm() {
                return Err(Error::invalid(format!(
                    "batch-norm parameter {} of {name} has no batch-norm group",
                    params.get(id).name()
                )));
            }
            groups.entry(group).or_default().push(id);
        }
    }
    Ok(groups)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub l_var: f64,
    pub l_rec: f64,
    /// The optimized objective: `l_var + l_rec`, or `l_rec` alone without
    /// the variance term.
    pub l_test: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    /// Entry 0 is before any update; entry `s` follows `s` updates.
    pub losses: Vec<StepLoss>,
    /// Mean of the final view predictions.
    pub y_hat_final: f64,
    /// Clean-input prediction of the unadapted model.
    pub y_hat_source: f64,
    pub view_predictions: Vec<f64>,
    /// A non-finite loss stopped adaptation; the model was restored.
    pub divergent: bool,
}

/// `K` augmented copies of one `T × 1 × H × W` sequence as a batch.
pub fn augmented_views(x: &Tensor, chains: &[AugChain]) -> Result<Tensor> {
    let views = chains
        .iter()
        .map(|c| c.apply(x))
        .collect::<Result<Vec<_>>>()?;
    batch_tensor(&views.iter().collect::<Vec<_>>())
}

fn forward_options(cfg: &AdaptConfig, train: bool) -> ForwardOptions {
    let mut o = if train {
        ForwardOptions {
            trainable: Trainable::BatchNormOnly,
            ..ForwardOptions::train()
        }
    } else {
        ForwardOptions::eval()
    };
    o.bypass_decomposition = cfg.bypass_decomposition;
    o
}

/// Adapts `model` in place on one sequence. The caller owns the episodic
/// reset; on divergence the model is returned to its entry state.
pub fn adapt(model: &mut QpNet, x: &Tensor, cfg: &AdaptConfig, seed: u64) -> Result<AdaptReport> {
    cfg.validate()?;
    let entry = model.clone();
    model.params_mut().reset_optimizer_state();
    let clean = batch_tensor(&[x])?;
    let y_hat_source = predict_with(model, &clean, cfg)?[0];
    let chains = sample_chains(seed, cfg.k)?;
    let views = augmented_views(x, &chains)?;
    let rates = cfg.rates();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut divergent = false;
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let out = match Forward::new(model, &mut g, forward_options(cfg, true))
            .run(&mut g, &views, None)
        {
            Ok(out) => out,
            Err(Error::NonFinite(_)) => {
                divergent = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let l_var = variance_loss(&mut g, out.y_hat)?;
        let objective = if cfg.variance_term {
            g.add(l_var, out.loss_rec)?
        } else {
            out.loss_rec
        };
        let loss = StepLoss {
            l_var: g.value(l_var).data()[0],
            l_rec: g.value(out.loss_rec).data()[0],
            l_test: g.value(objective).data()[0],
        };
        losses.push(loss);
        if !(loss.l_test.is_finite() && loss.l_var.is_finite()) {
            divergent = true;
            break;
        }
        if step == cfg.steps {
            break;
        }
        model.params_mut().zero_grad();
        g.backward(objective, model.params_mut())?;
        sgd_step(model.params_mut(), &rates, cfg.momentum, 0.0)?;
        if cfg.refresh_running_stats {
            model.apply_bn_updates(&out.bn_updates);
        }
        if !model.params().iter().all(|(_, p)| p.value().all_finite()) {
            divergent = true;
            break;
        }
    }
    if divergent {
        model.restore_from(&entry)?;
    }
    let view_predictions = predict_with(model, &views, cfg)?;
    let y_hat_final = view_predictions.iter().sum::<f64>() / view_predictions.len() as f64;
    model.params_mut().reset_optimizer_state();
    Ok(AdaptReport {
        losses,
        y_hat_final,
        y_hat_source,
        view_predictions,
        divergent,
    })
}

fn predict_with(model: &QpNet, x: &Tensor, cfg: &AdaptConfig) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = Forward::new(model, &mut g, forward_options(cfg, false)).run(&mut g, x, None)?;
    Ok(g.value(out.y_hat).data().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    SourceOnly,
    Ttt,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::SourceOnly => "source_only",
            EvalMode::Ttt => "ttt",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(EvalMode::SourceOnly),
            "ttt" => Ok(EvalMode::Ttt),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (source_only | ttt)"
            ))),
        }
    }
}

/// One row of the predictions table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub cohort: String,
    pub y_true: f64,
    pub y_hat: f64,
    pub mode: EvalMode,
    pub seed: u64,
    pub steps: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lvar_first: Option<f64>,
    pub lvar_last: Option<f64>,
    #[serde(skip)]
    pub report: Option<AdaptReport>,
}

/// Seed of the augmentation chains for one sample; it depends on the sample
/// id only, never on its position.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    derive_seed(seed, CHAIN_STREAM, h)
}

/// Predicts every sample in the given mode. Episodic adaptation runs on
/// `workers` threads (0 uses the global pool); rows keep input order.
pub fn evaluate_cohort(
    model: &QpNet,
    samples: &[VideoSample],
    cfg: &AdaptConfig,
    mode: EvalMode,
    seed: u64,
    workers: usize,
) -> Result<Vec<PredictionRow>> {
    cfg.validate()?;
    match mode {
        EvalMode::SourceOnly => {
            let mut rows = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(SOURCE_BATCH) {
                let x = batch_tensor(&chunk.iter().map(|s| &s.frames).collect::<Vec<_>>())?;
                let preds = predict_with(model, &x, cfg)?;
                for (s, y_hat) in chunk.iter().zip(preds) {
                    rows.push(row(s, y_hat, mode, seed, 0, 0, None));
                }
            }
            Ok(rows)
        }
        EvalMode::Ttt if cfg.episodic => {
            let run = || {
                samples
                    .par_iter()
                    .map(|s| {
                        let mut replica = model.clone();
                        let report = adapt(&mut replica, &s.frames, cfg, sample_seed(seed, &s.id))?;
                        Ok(row(
                            s,
                            report.y_hat_final,
                            mode,
                            seed,
                            cfg.steps,
                            cfg.k,
                            Some(report),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()
            };
            if workers == 0 {
                run()
            } else {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::invalid(format!("worker pool: {e}")))?
                    .install(run)
            }
        }
        EvalMode::Ttt => {
            let mut replica = model.clone();
            samples
                .iter()
                .map(|s| {
                    let report = adapt(&mut replica, &s.frames, cfg, sample_seed(seed, &s.id))?;
                    Ok(row(
                        s,
                        report.y_hat_final,
                        mode,
                        seed,
                        cfg.steps,
                        cfg.k,
                        Some(report),
                    ))
                })
                .collect()
        }
    }
}

fn row(
    s: &VideoSample,
    y_hat: f64,
    mode: EvalMode,
    seed: u64,
    steps: usize,
    k: usize,
    report: Option<AdaptReport>,
) -> PredictionRow {
    PredictionRow {
        id: s.id.clone(),
        cohort: s.cohort.clone(),
        y_true: s.ef_true,
        y_hat,
        mode,
        seed,
        steps,
        k,
        lvar_first: report
            .as_ref()
            .and_then(|r| r.losses.first())
            .map(|l| l.l_var),
        lvar_last: report
            .as_ref()
            .and_then(|r| r.losses.last())
            .map(|l| l.l_var),
        report,
    }
}

pub fn write_predictions(rows: &[PredictionRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &std::path::Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}
