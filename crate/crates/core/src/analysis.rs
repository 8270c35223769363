//! Metrics, the variance bound simulation, and the ablation and K-sweep
//! harnesses.

use std::collections::BTreeMap;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files::csv_error;
use crate::qpnet::QpNet;
use crate::rng::child_rng;
use crate::synthdata::VideoSample;
use crate::ttt::{
    adapt, evaluate_cohort, sample_seed, variance, AdaptConfig, EvalMode, PredictionRow,
};

/// Clinical EF cut-offs in percent.
pub const THRESHOLDS: [f64; 4] = [35.0, 40.0, 45.0, 50.0];

fn check_pair(y_true: &[f64], y_hat: &[f64]) -> Result<()> {
    if y_true.is_empty() || y_true.len() != y_hat.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![y_true.len()],
            rhs: vec![y_hat.len()],
        });
    }
    Ok(())
}

pub fn mae(y_true: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y_true, y_hat)?;
    Ok(y_true
        .iter()
        .zip(y_hat)
        .map(|(y, p)| (y - p).abs())
        .sum::<f64>()
        / y_true.len() as f64)
}

pub fn rmse(y_true: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y_true, y_hat)?;
    let mse = y_true
        .iter()
        .zip(y_hat)
        .map(|(y, p)| (y - p) * (y - p))
        .sum::<f64>()
        / y_true.len() as f64;
    Ok(mse.sqrt())
}

/// Mean absolute percentage error as a fraction.
pub fn mape(y_true: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y_true, y_hat)?;
    if let Some(i) = y_true.iter().position(|&y| y == 0.0) {
        return Err(Error::invalid(format!(
            "MAPE undefined: y_true[{i}] is zero"
        )));
    }
    Ok(y_true
        .iter()
        .zip(y_hat)
        .map(|(y, p)| ((y - p) / y).abs())
        .sum::<f64>()
        / y_true.len() as f64)
}

/// AUROC for detecting `y_true < threshold` from the score `−ŷ`, with ties
/// counted as one half. `None` when either class is empty.
pub fn auroc(y_true: &[f64], y_hat: &[f64], threshold: f64) -> Result<Option<f64>> {
    check_pair(y_true, y_hat)?;
    let n = y_true.len();
    let n_pos = y_true.iter().filter(|&&y| y < threshold).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    // midranks of the scores
    let scores: Vec<f64> = y_hat.iter().map(|p| -p).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = (0..n)
        .filter(|&k| y_true[k] < threshold)
        .map(|k| ranks[k])
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAuroc {
    pub threshold: f64,
    /// `None` when the threshold leaves one class empty.
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    pub per_threshold: Vec<ThresholdAuroc>,
    pub mauroc: f64,
    pub skipped: Vec<f64>,
}

/// Per-threshold AUROC and their mean over evaluable thresholds.
pub fn mauroc(y_true: &[f64], y_hat: &[f64], thresholds: &[f64]) -> Result<AurocReport> {
    let per_threshold = thresholds
        .iter()
        .map(|&t| {
            Ok(ThresholdAuroc {
                threshold: t,
                auroc: auroc(y_true, y_hat, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = per_threshold.iter().filter_map(|a| a.auroc).collect();
    if values.is_empty() {
        return Err(Error::invalid(
            "every AUROC threshold leaves one class empty",
        ));
    }
    let skipped = per_threshold
        .iter()
        .filter(|a| a.auroc.is_none())
        .map(|a| a.threshold)
        .collect();
    Ok(AurocReport {
        mauroc: values.iter().sum::<f64>() / values.len() as f64,
        per_threshold,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cohort: String,
    pub mode: String,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub auroc: Vec<ThresholdAuroc>,
    /// `None` when no threshold is evaluable.
    pub mauroc: Option<f64>,
    pub skipped_thresholds: Vec<f64>,
}

impl MetricsReport {
    pub fn new(cohort: &str, mode: &str, y_true: &[f64], y_hat: &[f64]) -> Result<Self> {
        let (auroc, mauroc, skipped) = match mauroc(y_true, y_hat, &THRESHOLDS) {
            Ok(r) => (r.per_threshold, Some(r.mauroc), r.skipped),
            Err(Error::InvalidArgument(_)) => (
                THRESHOLDS
                    .iter()
                    .map(|&t| ThresholdAuroc {
                        threshold: t,
                        auroc: None,
                    })
                    .collect(),
                None,
                THRESHOLDS.to_vec(),
            ),
            Err(e) => return Err(e),
        };
        Ok(Self {
            cohort: cohort.to_string(),
            mode: mode.to_string(),
            n: y_true.len(),
            mae: mae(y_true, y_hat)?,
            rmse: rmse(y_true, y_hat)?,
            mape: mape(y_true, y_hat)?,
            auroc,
            mauroc,
            skipped_thresholds: skipped,
        })
    }
}

/// One report per (cohort, mode, seed) group of a predictions table, in
/// first-seen order.
pub fn report_predictions(rows: &[PredictionRow]) -> Result<Vec<MetricsReport>> {
    let mut groups: Vec<((String, EvalMode, u64), (Vec<f64>, Vec<f64>))> = Vec::new();
    for r in rows {
        let key = (r.cohort.clone(), r.mode, r.seed);
        let slot = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, (Vec::new(), Vec::new())));
                groups.len() - 1
            }
        };
        groups[slot].1 .0.push(r.y_true);
        groups[slot].1 .1.push(r.y_hat);
    }
    groups
        .iter()
        .map(|((cohort, mode, _), (y, p))| MetricsReport::new(cohort, mode.as_str(), y, p))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSimConfig {
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
}

impl TheoremSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid("K must be at least 2"));
        }
        if self.trials < 1000 {
            return Err(Error::invalid("at least 1000 trials are required"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub k: usize,
    pub sigma: f64,
    pub trials: usize,
    /// `σ²(K−1)/K`
    pub analytic_lvar: f64,
    /// `σ²/K`
    pub analytic_lreg: f64,
    /// `2σ²(K−1)/K²`
    pub analytic_bound: f64,
    pub est_lvar: f64,
    pub se_lvar: f64,
    pub est_lreg: f64,
    pub se_lreg: f64,
    /// `2 · est_lvar / K`
    pub est_bound: f64,
    /// Mean and standard error of `(K−1)·L_reg − L_var` per trial.
    pub chain_gap: f64,
    pub se_chain_gap: f64,
    /// Mean and standard error of `L_reg − 2·L_var/K` per trial.
    pub bound_gap: f64,
    pub se_bound_gap: f64,
    /// `est_lreg ≤ est_bound`
    pub bound_holds_strict: bool,
    /// `bound_gap ≤ 3 · se_bound_gap`; at `K = 2` the bound is an equality
    /// in expectation, so only this form is decidable.
    pub bound_holds: bool,
    pub lvar_within_3se: bool,
    pub lreg_within_3se: bool,
    pub chain_within_3se: bool,
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn within_3se(est: f64, target: f64, se: f64) -> bool {
    (est - target).abs() <= 3.0 * se
}

/// Monte Carlo check of the variance-to-error bound with iid view errors
/// `ŷ_k = y + ε_k`, `ε_k ~ N(0, σ²)`.
pub fn verify_theorem1(cfg: &TheoremSimConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let k = cfg.k;
    let kf = k as f64;
    let s2 = cfg.sigma * cfg.sigma;
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = child_rng(cfg.seed, 0x7468_6d31, k as u64);
    let y = 0.0;
    let mut lvar = Vec::with_capacity(cfg.trials);
    let mut lreg = Vec::with_capacity(cfg.trials);
    let mut gap = Vec::with_capacity(cfg.trials);
    let mut bound_gap = Vec::with_capacity(cfg.trials);
    let mut views = vec![0.0; k];
    for _ in 0..cfg.trials {
        views
            .iter_mut()
            .for_each(|v| *v = y + noise.sample(&mut rng));
        let mean = views.iter().sum::<f64>() / kf;
        let v = views.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / kf;
        let r = (mean - y) * (mean - y);
        lvar.push(v);
        lreg.push(r);
        gap.push((kf - 1.0) * r - v);
        bound_gap.push(r - 2.0 * v / kf);
    }
    let (est_lvar, se_lvar) = mean_se(&lvar);
    let (est_lreg, se_lreg) = mean_se(&lreg);
    let (chain_gap, se_chain_gap) = mean_se(&gap);
    let (bound_gap, se_bound_gap) = mean_se(&bound_gap);
    let analytic_lvar = s2 * (kf - 1.0) / kf;
    let analytic_lreg = s2 / kf;
    let est_bound = 2.0 * est_lvar / kf;
    Ok(TheoremReport {
        k,
        sigma: cfg.sigma,
        trials: cfg.trials,
        analytic_lvar,
        analytic_lreg,
        analytic_bound: 2.0 * analytic_lvar / kf,
        est_lvar,
        se_lvar,
        est_lreg,
        se_lreg,
        est_bound,
        chain_gap,
        se_chain_gap,
        bound_gap,
        se_bound_gap,
        bound_holds_strict: est_lreg <= est_bound,
        bound_holds: bound_gap <= 3.0 * se_bound_gap,
        lvar_within_3se: within_3se(est_lvar, analytic_lvar, se_lvar),
        lreg_within_3se: within_3se(est_lreg, analytic_lreg, se_lreg),
        chain_within_3se: within_3se(chain_gap, 0.0, se_chain_gap),
    })
}

/// Bound check and assumption diagnostics on real view predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalReport {
    pub n: usize,
    pub k: usize,
    /// `mean_i (ȳ_i − y_i)²`
    pub mse_ybar: f64,
    pub mean_lvar: f64,
    /// `2 · mean_lvar / K`
    pub bound: f64,
    /// `mse_ybar / bound`; infinite when the bound is zero.
    pub ratio: f64,
    pub bound_holds: bool,
    /// `mean_i (ȳ_i − ŷ_i(clean))`
    pub bias_vs_clean: f64,
    /// `mean_i (ȳ_i − y_i)`
    pub bias_vs_truth: f64,
    /// RMSE of the clean predictions.
    pub clean_rmse: f64,
    /// Mean over view pairs of the across-sample correlation of the view
    /// deviations `ŷ_ik − ŷ_i(clean)`.
    pub view_correlation: f64,
    /// The bound failed, so at least one assumption is violated.
    pub assumption_violated: bool,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// `views[i]` holds the `K` view predictions of sample `i`.
pub fn empirical_bound(
    y_true: &[f64],
    clean: &[f64],
    views: &[Vec<f64>],
) -> Result<EmpiricalReport> {
    check_pair(y_true, clean)?;
    if views.len() != y_true.len() {
        return Err(Error::invalid("one view set per sample is required"));
    }
    let k = views[0].len();
    if k < 2 || views.iter().any(|v| v.len() != k) {
        return Err(Error::invalid("every sample needs the same K ≥ 2 views"));
    }
    let n = y_true.len() as f64;
    let ybar: Vec<f64> = views
        .iter()
        .map(|v| v.iter().sum::<f64>() / k as f64)
        .collect();
    let mse_ybar = ybar
        .iter()
        .zip(y_true)
        .map(|(m, y)| (m - y) * (m - y))
        .sum::<f64>()
        / n;
    let mean_lvar = views.iter().map(|v| variance(v)).sum::<Result<f64>>()? / n;
    let bound = 2.0 * mean_lvar / k as f64;
    let ratio = if bound > 0.0 {
        mse_ybar / bound
    } else {
        f64::INFINITY
    };
    let deviations: Vec<Vec<f64>> = (0..k)
        .map(|j| views.iter().zip(clean).map(|(v, c)| v[j] - c).collect())
        .collect();
    let mut corr = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if let Some(r) = pearson(&deviations[a], &deviations[b]) {
                corr.push(r);
            }
        }
    }
    let view_correlation = if corr.is_empty() {
        0.0
    } else {
        corr.iter().sum::<f64>() / corr.len() as f64
    };
    let bound_holds = mse_ybar <= bound;
    Ok(EmpiricalReport {
        n: y_true.len(),
        k,
        mse_ybar,
        mean_lvar,
        bound,
        ratio,
        bound_holds,
        bias_vs_clean: ybar.iter().zip(clean).map(|(m, c)| m - c).sum::<f64>() / n,
        bias_vs_truth: ybar.iter().zip(y_true).map(|(m, y)| m - y).sum::<f64>() / n,
        clean_rmse: rmse(y_true, clean)?,
        view_correlation,
        assumption_violated: !bound_holds,
    })
}

/// Runs adaptation on every sample and checks the bound on the resulting
/// view predictions. With `cfg.steps = 0` this measures the augmentations
/// alone.
pub fn verify_theorem1_empirical(
    model: &QpNet,
    samples: &[VideoSample],
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<EmpiricalReport> {
    use rayon::prelude::*;
    let results = samples
        .par_iter()
        .map(|s| {
            let mut replica = model.clone();
            adapt(&mut replica, &s.frames, cfg, sample_seed(seed, &s.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<f64> = samples.iter().map(|s| s.ef_true).collect();
    let clean: Vec<f64> = results.iter().map(|r| r.y_hat_source).collect();
    let views: Vec<Vec<f64>> = results.into_iter().map(|r| r.view_predictions).collect();
    empirical_bound(&y, &clean, &views)
}

/// Component switches of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub qpnet: bool,
    pub lr: bool,
    pub vm: bool,
}

impl AblationFlags {
    pub const fn new(qpnet: bool, lr: bool, vm: bool) -> Self {
        Self { qpnet, lr, vm }
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.qpnet, "QP-Net"), (self.lr, "LR"), (self.vm, "VM")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, name)| *name)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    /// Adaptation settings for this row on top of `base`.
    pub fn adapt_config(&self, base: &AdaptConfig) -> AdaptConfig {
        AdaptConfig {
            differential_rates: self.lr,
            variance_term: self.vm,
            ..base.clone()
        }
    }
}

/// The six rows of the component ablation, in table order.
pub const ABLATION_ROWS: [AblationFlags; 6] = [
    AblationFlags::new(false, false, false),
    AblationFlags::new(true, false, false),
    AblationFlags::new(true, true, false),
    AblationFlags::new(false, false, true),
    AblationFlags::new(true, false, true),
    AblationFlags::new(true, true, true),
];

/// Models for the ablation. Rows without the decomposition use `plain` when
/// given, otherwise `decomposed` with the decomposition bypassed.
pub struct AblationModels<'a> {
    pub decomposed: &'a QpNet,
    pub plain: Option<&'a QpNet>,
}

impl AblationModels<'_> {
    fn for_flags(&self, flags: &AblationFlags, base: &AdaptConfig) -> (&QpNet, AdaptConfig) {
        let mut cfg = flags.adapt_config(base);
        if flags.qpnet {
            cfg.bypass_decomposition = false;
            (self.decomposed, cfg)
        } else {
            match self.plain {
                Some(p) => {
                    cfg.bypass_decomposition = false;
                    (p, cfg)
                }
                None => {
                    cfg.bypass_decomposition = true;
                    (self.decomposed, cfg)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub qpnet: bool,
    pub lr: bool,
    pub vm: bool,
    pub seed: u64,
    pub cohort: String,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub mauroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub label: String,
    pub qpnet: bool,
    pub lr: bool,
    pub vm: bool,
    pub mean_mae: f64,
    pub mean_rmse: f64,
    pub mean_mape: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    /// Source-only MAE of the decomposed and (if present) plain models.
    pub source_only_mae: BTreeMap<String, f64>,
}

impl AblationReport {
    pub fn summary_for(&self, flags: &AblationFlags) -> Option<&AblationSummary> {
        self.summary
            .iter()
            .find(|s| s.qpnet == flags.qpnet && s.lr == flags.lr && s.vm == flags.vm)
    }

    /// Whether `flags` has the lowest seed-averaged MAE, allowing a relative
    /// tolerance for ties.
    pub fn is_best_or_tied(&self, flags: &AblationFlags, rel_tol: f64) -> bool {
        let Some(row) = self.summary_for(flags) else {
            return false;
        };
        let best = self
            .summary
            .iter()
            .map(|s| s.mean_mae)
            .fold(f64::INFINITY, f64::min);
        row.mean_mae <= best * (1.0 + rel_tol)
    }
}

/// Runs test-time adaptation for every flag row and seed. All samples are
/// scored together and the cohort column names their cohorts joined by `+`.
pub fn ablation_run(
    models: &AblationModels<'_>,
    samples: &[VideoSample],
    base: &AdaptConfig,
    rows: &[AblationFlags],
    seeds: &[u64],
    workers: usize,
) -> Result<AblationReport> {
    let y: Vec<f64> = samples.iter().map(|s| s.ef_true).collect();
    let cohort = cohort_label(samples);
    let mut report = AblationReport::default();
    let mut source = |name: &str, model: &QpNet, bypass: bool| -> Result<()> {
        let cfg = AdaptConfig {
            bypass_decomposition: bypass,
            ..base.clone()
        };
        let pred = evaluate_cohort(model, samples, &cfg, EvalMode::SourceOnly, 0, workers)?;
        let p: Vec<f64> = pred.iter().map(|r| r.y_hat).collect();
        report
            .source_only_mae
            .insert(name.to_string(), mae(&y, &p)?);
        Ok(())
    };
    source("decomposed", models.decomposed, false)?;
    match models.plain {
        Some(p) => source("plain", p, false)?,
        None => source("bypass", models.decomposed, true)?,
    }
    for flags in rows {
        let (model, cfg) = models.for_flags(flags, base);
        let mut maes = Vec::new();
        let mut rmses = Vec::new();
        let mut mapes = Vec::new();
        for &seed in seeds {
            let pred = evaluate_cohort(model, samples, &cfg, EvalMode::Ttt, seed, workers)?;
            let p: Vec<f64> = pred.iter().map(|r| r.y_hat).collect();
            let m = MetricsReport::new(&cohort, EvalMode::Ttt.as_str(), &y, &p)?;
            maes.push(m.mae);
            rmses.push(m.rmse);
            mapes.push(m.mape);
            report.rows.push(AblationRow {
                label: flags.label(),
                qpnet: flags.qpnet,
                lr: flags.lr,
                vm: flags.vm,
                seed,
                cohort: cohort.clone(),
                mae: m.mae,
                rmse: m.rmse,
                mape: m.mape,
                mauroc: m.mauroc,
            });
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        report.summary.push(AblationSummary {
            label: flags.label(),
            qpnet: flags.qpnet,
            lr: flags.lr,
            vm: flags.vm,
            mean_mae: avg(&maes),
            mean_rmse: avg(&rmses),
            mean_mape: avg(&mapes),
        });
    }
    Ok(report)
}

fn cohort_label(samples: &[VideoSample]) -> String {
    let mut names: Vec<&str> = samples.iter().map(|s| s.cohort.as_str()).collect();
    names.dedup();
    let mut unique: Vec<&str> = Vec::new();
    for n in names {
        if !unique.contains(&n) {
            unique.push(n);
        }
    }
    unique.join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub cohort: String,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Wall-clock time of the adaptation run for this row.
    pub seconds: f64,
}

/// Adaptation MAE per `K`, cohort and seed.
pub fn k_sweep(
    model: &QpNet,
    samples: &[VideoSample],
    base: &AdaptConfig,
    ks: &[usize],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<KSweepRow>> {
    let mut cohorts: Vec<&str> = Vec::new();
    for s in samples {
        if !cohorts.contains(&s.cohort.as_str()) {
            cohorts.push(&s.cohort);
        }
    }
    let mut out = Vec::new();
    for &k in ks {
        let cfg = AdaptConfig { k, ..base.clone() };
        cfg.validate()?;
        for &seed in seeds {
            for cohort in &cohorts {
                let subset: Vec<VideoSample> = samples
                    .iter()
                    .filter(|s| s.cohort == *cohort)
                    .cloned()
                    .collect();
                let start = Instant::now();
                let pred = evaluate_cohort(model, &subset, &cfg, EvalMode::Ttt, seed, workers)?;
                let seconds = start.elapsed().as_secs_f64();
                let y: Vec<f64> = pred.iter().map(|r| r.y_true).collect();
                let p: Vec<f64> = pred.iter().map(|r| r.y_hat).collect();
                out.push(KSweepRow {
                    k,
                    cohort: cohort.to_string(),
                    seed,
                    mae: mae(&y, &p)?,
                    rmse: rmse(&y, &p)?,
                    mape: mape(&y, &p)?,
                    seconds,
                });
            }
        }
    }
    Ok(out)
}

/// Seed-averaged MAE per `(K, cohort)`.
pub fn k_sweep_means(rows: &[KSweepRow]) -> BTreeMap<(usize, String), f64> {
    let mut acc: BTreeMap<(usize, String), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.k, r.cohort.clone())).or_insert((0.0, 0));
        e.0 += r.mae;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
