//! Acceptance criteria. Every test prints one `PASS`/`FAIL` line, written
//! straight to stderr so it shows without `--nocapture`.
//!
//! The model-based criteria share one desk-scale fixture: the synthetic
//! cohorts, a decomposed model and a plain model, both trained on
//! `source_train` for 30 epochs.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use qpart::analysis::{
    ablation_run, auroc, empirical_bound, k_sweep, k_sweep_means, mae, mape, rmse, verify_theorem1,
    AblationFlags, AblationModels, AblationReport, TheoremSimConfig, ABLATION_ROWS,
};
use qpart::cdesolver::{integrate_trajectory, CdeConfig, Control, IdentityField};
use qpart::diffcore::gradcheck::{param_gradient_errors, primitive_suite};
use qpart::diffcore::{Graph, Tensor, Var};
use qpart::qpnet::{
    batch_tensor, helix_eval, train, Forward, ForwardOptions, HelixVars, ModelConfig, QpNet,
    TrainConfig,
};
use qpart::rng::rng_from;
use qpart::spline::fit_natural_cubic;
use qpart::synthdata::{
    generate_samples, render_sequence, small_frame_cohort, DatasetSpec, VideoSample,
    SOURCE_HOLDOUT, SOURCE_TRAIN, TARGET_PRESCHOOL,
};
use qpart::ttt::{adapt, evaluate_cohort, AdaptConfig, EvalMode};

const DATA_SEED: u64 = 7;
const MODEL_SEED: u64 = 1;
const EPOCHS: usize = 30;
const ADAPT_SEEDS: [u64; 3] = [0, 1, 2];
/// Relative MAE margin within which two ablation rows count as tied.
const TIE_TOLERANCE: f64 = 0.005;
const PIPELINE_BUDGET_SECONDS: f64 = 7200.0;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion:>2}: {status}  {detail}");
}

struct Desk {
    samples: Vec<VideoSample>,
    decomposed: QpNet,
    plain: QpNet,
    setup_seconds: f64,
}

impl Desk {
    fn cohort(&self, name: &str) -> Vec<VideoSample> {
        self.samples
            .iter()
            .filter(|s| s.cohort == name)
            .cloned()
            .collect()
    }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let spec = DatasetSpec::desk();
        let samples = generate_samples(&spec, DATA_SEED).expect("desk data");
        let train_set: Vec<VideoSample> = samples
            .iter()
            .filter(|s| s.cohort == SOURCE_TRAIN)
            .cloned()
            .collect();
        let cfg = TrainConfig {
            epochs: EPOCHS,
            seed: MODEL_SEED,
            ..TrainConfig::default()
        };
        let fit = |decomposition: bool| {
            let mut model = QpNet::new(
                ModelConfig {
                    decomposition,
                    ..ModelConfig::default()
                },
                MODEL_SEED,
            )
            .expect("model");
            train(&mut model, &train_set, &cfg).expect("training");
            model
        };
        let decomposed = fit(true);
        let plain = fit(false);
        Desk {
            samples,
            decomposed,
            plain,
            setup_seconds: start.elapsed().as_secs_f64(),
        }
    })
}

/// Ablation on the shifted cohort; criterion 8 reuses its full row as the
/// `K = 8` arm.
fn preschool_ablation() -> &'static (AblationReport, f64) {
    static ABLATION: OnceLock<(AblationReport, f64)> = OnceLock::new();
    ABLATION.get_or_init(|| {
        let d = desk();
        let start = Instant::now();
        let models = AblationModels {
            decomposed: &d.decomposed,
            plain: Some(&d.plain),
        };
        let report = ablation_run(
            &models,
            &d.cohort(TARGET_PRESCHOOL),
            &AdaptConfig::default(),
            &ABLATION_ROWS,
            &ADAPT_SEEDS,
            0,
        )
        .expect("ablation");
        (report, start.elapsed().as_secs_f64())
    })
}

#[test]
fn c01_theorem_simulation() {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = Vec::new();
    for k in [8, 2, 4, 16, 32] {
        let r = verify_theorem1(&TheoremSimConfig {
            k,
            sigma: 1.0,
            trials: 100_000,
            seed: 11,
        })
        .unwrap();
        let ok = r.lvar_within_3se && r.lreg_within_3se && r.bound_holds;
        pass &= ok;
        detail.push(format!(
            "K={k} lvar {:.4}/{:.4} lreg {:.4}/{:.4}",
            r.est_lvar, r.analytic_lvar, r.est_lreg, r.analytic_lreg
        ));
        if k == 8 {
            assert_eq!(
                (r.analytic_lvar, r.analytic_lreg, r.analytic_bound),
                (0.875, 0.125, 0.21875)
            );
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 10.0;
    verdict(
        1,
        pass,
        &format!("{} ({secs:.1}s < 10s)", detail.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c02_gradient_integrity() {
    const REL_TOL: f64 = 1e-3;
    let start = Instant::now();
    let worst = primitive_suite(100, 2024).unwrap();
    let bad: Vec<_> = worst.iter().filter(|(_, e)| !(*e < REL_TOL)).collect();

    let cfg = ModelConfig::tiny();
    let data: Vec<VideoSample> = (0..3)
        .map(|i| {
            render_sequence(
                &small_frame_cohort("g", 3),
                cfg.frames,
                cfg.frame_size,
                format!("g{i}"),
                300 + i,
            )
            .unwrap()
        })
        .collect();
    let x = batch_tensor(&data.iter().map(|s| &s.frames).collect::<Vec<_>>()).unwrap();
    let y: Vec<f64> = data.iter().map(|s| s.ef_true).collect();
    let model = QpNet::new(cfg, 23).unwrap();
    let composed = param_gradient_errors(model.params(), 1e-4, |g, store| {
        let mut replica = model.clone();
        *replica.params_mut() = store.clone();
        let out = Forward::new(&replica, g, ForwardOptions::train()).run(g, &x, Some(&y))?;
        Ok(out.loss_total)
    })
    .unwrap();
    let composed_worst = composed.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = bad.is_empty() && composed_worst < REL_TOL && secs < 120.0;
    verdict(
        2,
        pass,
        &format!(
            "{} primitives x 100 points, failing {bad:?}; composed loss worst rel err {composed_worst:.2e} ({secs:.1}s < 120s)",
            worst.len()
        ),
    );
    assert!(pass);
}

#[test]
fn c03_spline_oracle() {
    let times = [0.0, 0.7, 1.5, 3.0];
    let values: Vec<f64> = times.iter().map(|t| 2.0 * t - 1.0).collect();
    let path = fit_natural_cubic(&values, 1, &times).unwrap();
    let linear_err = (0..=60)
        .map(|i| {
            let t = 3.0 * i as f64 / 60.0;
            (path.eval(t).unwrap()[0] - (2.0 * t - 1.0)).abs()
        })
        .fold(0.0, f64::max);

    let mut rng = rng_from(3);
    let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let t: Vec<f64> = (0..6)
        .map(|i| i as f64 * 0.5 + if i % 2 == 1 { 0.1 } else { 0.0 })
        .collect();
    let p = fit_natural_cubic(&v, 1, &t).unwrap();
    let boundary = p.eval_second_derivative(t[0]).unwrap()[0]
        .abs()
        .max(p.eval_second_derivative(t[5]).unwrap()[0].abs());

    // Knots (0,0), (1,1), (2,0): 4·M₁ = 6·(−2) gives M₁ = −3, so
    // S(x) = 1.5x − 0.5x³ on [0, 1] and S(0.5) = 11/16.
    let hand = fit_natural_cubic(&[0.0, 1.0, 0.0], 1, &[0.0, 1.0, 2.0]).unwrap();
    let hand_err = (hand.eval(0.5).unwrap()[0] - 0.6875).abs();
    let hand_second = (hand.eval_second_derivative(1.0).unwrap()[0] + 3.0).abs();

    let pass = linear_err < 1e-12 && boundary < 1e-8 && hand_err < 1e-9 && hand_second < 1e-9;
    verdict(
        3,
        pass,
        &format!(
            "linear err {linear_err:.1e}; |S''| at ends {boundary:.1e} < 1e-8; 3-knot err {hand_err:.1e}, {hand_second:.1e} < 1e-9"
        ),
    );
    assert!(pass);
}

fn exp_endpoint(substeps: usize) -> f64 {
    let times: Vec<f64> = (0..5).map(|k| k as f64 / 4.0).collect();
    let path = fit_natural_cubic(&times, 1, &times).unwrap();
    let mut g = Graph::new();
    let z0 = g.constant(Tensor::new(&[1], vec![1.0]).unwrap());
    let cfg = CdeConfig {
        substeps_per_interval: substeps,
    };
    let traj = integrate_trajectory(
        &mut g,
        &mut IdentityField,
        &Control::Path(&path),
        z0,
        &times,
        &cfg,
    )
    .unwrap();
    g.value(*traj.last().unwrap()).data()[0]
}

struct ZeroField;

impl qpart::cdesolver::VectorField for ZeroField {
    fn eval(&mut self, g: &mut Graph, state: Var, _t: f64, _stage: usize) -> qpart::Result<Var> {
        Ok(g.scale(state, 0.0))
    }
}

#[test]
fn c04_cde_oracle() {
    let mut rng = rng_from(4);
    let times = [0.0, 0.3, 0.5, 1.1, 2.0];
    let d = 3;
    let control: Vec<f64> = (0..times.len() * d)
        .map(|_| rng.gen_range(-3.0..3.0))
        .collect();
    let path = fit_natural_cubic(&control, d, &times).unwrap();
    let z0: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(&[d], z0.clone()).unwrap());
    let traj = integrate_trajectory(
        &mut g,
        &mut ZeroField,
        &Control::Path(&path),
        z,
        &times,
        &CdeConfig::default(),
    )
    .unwrap();
    let identity = traj.iter().all(|v| g.value(*v).data() == z0.as_slice());

    let e = std::f64::consts::E;
    let err16 = (exp_endpoint(16) - e).abs();
    let ratios: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&m| (exp_endpoint(m) - e).abs() / (exp_endpoint(2 * m) - e).abs())
        .collect();
    let ratios_ok = ratios.iter().all(|r| (12.0..=20.0).contains(r));
    let pass = identity && err16 < 1e-5 && ratios_ok;
    verdict(
        4,
        pass,
        &format!("zero field exact: {identity}; |z(1) - e| at 16 substeps {err16:.1e} < 1e-5; halving ratios {ratios:.2?} in [12, 20]"),
    );
    assert!(pass);
}

#[test]
fn c05_helix_identity() {
    let mut rng = rng_from(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let f = rng.gen_range(0.25..4.0);
        let v = rng.gen_range(-3.0..3.0);
        let phi = rng.gen_range(-1.0..1.0);
        let b = rng.gen_range(-2.0..2.0);
        let t = rng.gen_range(0.0..1.0);
        let n = rng.gen_range(1..4) as f64;
        let mut g = Graph::new();
        let mut c = |x: f64| g.constant(Tensor::full(&[1, 1, 1, 1], x));
        let p = HelixVars {
            f: c(f),
            phi: c(phi),
            b: c(b),
            v: c(v),
        };
        let z = helix_eval(&mut g, &p, &[t, t + n / f]).unwrap();
        let out = g.value(z).data();
        worst = worst.max((out[1] - out[0] - n * v / f).abs());
    }
    let pass = worst < 1e-5;
    verdict(
        5,
        pass,
        &format!("1000 draws, worst |g(t+n/f) - g(t) - nv/f| = {worst:.1e} < 1e-5"),
    );
    assert!(pass);
}

fn pair_count_auroc(y: &[f64], p: &[f64], threshold: f64) -> Option<f64> {
    let pos: Vec<usize> = (0..y.len()).filter(|&i| y[i] < threshold).collect();
    let neg: Vec<usize> = (0..y.len()).filter(|&i| y[i] >= threshold).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &i in &pos {
        for &j in &neg {
            // positives should score lower predictions
            if p[i] < p[j] {
                wins += 1.0;
            } else if p[i] == p[j] {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[test]
fn c06_metric_oracles() {
    let mut rng = rng_from(6);
    let mut worst = 0.0f64;
    let mut auroc_exact = true;
    let mut with_ties = 0;
    for case in 0..50 {
        let y: Vec<f64> = (0..20)
            .map(|_| rng.gen_range(20.0..75.0_f64).round())
            .collect();
        // coarse rounding forces tied scores
        let p: Vec<f64> = (0..20)
            .map(|_| (rng.gen_range(20.0..75.0_f64) / 5.0).round() * 5.0)
            .collect();
        let n = y.len() as f64;
        let brute_mae = y.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        let brute_rmse = (y.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        let brute_mape = y
            .iter()
            .zip(&p)
            .map(|(a, b)| ((a - b) / a).abs())
            .sum::<f64>()
            / n;
        worst = worst
            .max((mae(&y, &p).unwrap() - brute_mae).abs())
            .max((rmse(&y, &p).unwrap() - brute_rmse).abs())
            .max((mape(&y, &p).unwrap() - brute_mape).abs());
        let threshold = [35.0, 40.0, 45.0, 50.0][case % 4];
        auroc_exact &= auroc(&y, &p, threshold).unwrap() == pair_count_auroc(&y, &p, threshold);
        let mut sorted = p.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            with_ties += 1;
        }
    }
    let pass = worst < 1e-6 && auroc_exact && with_ties > 0;
    verdict(
        6,
        pass,
        &format!("50 cases ({with_ties} with tied scores): metric err {worst:.1e} < 1e-6, AUROC bit-exact: {auroc_exact}"),
    );
    assert!(pass);
}

#[test]
fn c07_directional_adaptation_gain() {
    let d = desk();
    let (report, ablation_seconds) = preschool_ablation();
    let full = AblationFlags::new(true, true, true);
    let full_mae = report.summary_for(&full).unwrap().mean_mae;
    let source = report.source_only_mae["decomposed"];
    let best = report.is_best_or_tied(&full, TIE_TOLERANCE);
    let total = d.setup_seconds + ablation_seconds;
    let rows: Vec<String> = report
        .summary
        .iter()
        .map(|s| format!("{} {:.3}", s.label, s.mean_mae))
        .collect();
    let pass = full_mae <= source && best && total < PIPELINE_BUDGET_SECONDS;
    verdict(
        7,
        pass,
        &format!(
            "{TARGET_PRESCHOOL}: ttt {full_mae:.3} <= source {source:.3}: {}; rows [{}]; full row best within {:.1}%: {best}; pipeline {total:.0}s < {PIPELINE_BUDGET_SECONDS:.0}s",
            full_mae <= source,
            rows.join(", "),
            TIE_TOLERANCE * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn c08_more_views_help() {
    let d = desk();
    let (report, _) = preschool_ablation();
    let base = AdaptConfig::default();
    let full = AblationFlags::new(true, true, true);
    // the full ablation row is exactly the K = 8 arm
    assert_eq!(full.adapt_config(&base), base);
    assert_eq!(base.k, 8);
    let k8 = report.summary_for(&full).unwrap().mean_mae;
    let rows = k_sweep(
        &d.decomposed,
        &d.cohort(TARGET_PRESCHOOL),
        &base,
        &[2],
        &ADAPT_SEEDS,
        0,
    )
    .unwrap();
    let k2 = k_sweep_means(&rows)[&(2, TARGET_PRESCHOOL.to_string())];
    let pass = k8 <= k2;
    verdict(
        8,
        pass,
        &format!("{TARGET_PRESCHOOL}: MAE K=8 {k8:.3} <= K=2 {k2:.3}"),
    );
    assert!(pass);
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn c09_adaptation_mechanics() {
    let d = desk();
    let samples: Vec<VideoSample> = d.cohort(TARGET_PRESCHOOL).into_iter().take(12).collect();
    let cfg = AdaptConfig::default();

    let mut adapted = d.decomposed.clone();
    adapt(&mut adapted, &samples[0].frames, &cfg, 17).unwrap();
    let bn_ids: Vec<_> = d
        .decomposed
        .batch_norm_params()
        .flat_map(|(_, g, b)| [g, b])
        .collect();
    let mut bn_changed = 0;
    let mut other_changed = Vec::new();
    for ((id, before), (_, after)) in d.decomposed.params().iter().zip(adapted.params().iter()) {
        if same_bits(before.value(), after.value()) {
            continue;
        }
        if bn_ids.contains(&id) {
            bn_changed += 1;
        } else {
            other_changed.push(before.name().to_string());
        }
    }
    let stats_kept = d
        .decomposed
        .running_stats()
        .zip(adapted.running_stats())
        .all(|((_, a), (_, b))| a == b);

    let forward = evaluate_cohort(&d.decomposed, &samples, &cfg, EvalMode::Ttt, 5, 0).unwrap();
    let mut shuffled = samples.clone();
    shuffled.shuffle(&mut rng_from(9));
    let reordered = evaluate_cohort(&d.decomposed, &shuffled, &cfg, EvalMode::Ttt, 5, 0).unwrap();
    let order_invariant = forward.iter().all(|r| {
        reordered
            .iter()
            .find(|o| o.id == r.id)
            .is_some_and(|o| o.y_hat.to_bits() == r.y_hat.to_bits())
    });

    let pass = bn_changed > 0 && other_changed.is_empty() && stats_kept && order_invariant;
    verdict(
        9,
        pass,
        &format!(
            "{bn_changed} BN affine tensors changed, other params changed {other_changed:?}, running stats kept: {stats_kept}; 12-sample shuffle bit-identical: {order_invariant}"
        ),
    );
    assert!(pass);
}

#[test]
fn c10_assumption_diagnostics() {
    const K: usize = 64;
    const BIAS_FRACTION: f64 = 0.05;
    const MAX_CORRELATION: f64 = 0.3;
    let d = desk();
    let holdout = d.cohort(SOURCE_HOLDOUT);
    let cfg = AdaptConfig {
        k: K,
        steps: 0,
        ..AdaptConfig::default()
    };
    let mut y = Vec::new();
    let mut clean = Vec::new();
    let mut views = Vec::new();
    for s in &holdout {
        let mut replica = d.decomposed.clone();
        let r = adapt(
            &mut replica,
            &s.frames,
            &cfg,
            qpart::ttt::sample_seed(3, &s.id),
        )
        .unwrap();
        y.push(s.ef_true);
        clean.push(r.y_hat_source);
        views.push(r.view_predictions);
    }
    let report = empirical_bound(&y, &clean, &views).unwrap();
    let gate = BIAS_FRACTION * report.clean_rmse;
    let bias_ok = report.bias_vs_clean.abs() < gate;
    let corr_ok = report.view_correlation.abs() < MAX_CORRELATION;
    let pass = bias_ok && corr_ok;
    verdict(
        10,
        pass,
        &format!(
            "{} {SOURCE_HOLDOUT} samples, K={K}: |bias| {:.3} < {gate:.3} (0.05 x RMSE {:.3}): {bias_ok}; |corr| {:.3} < {MAX_CORRELATION}: {corr_ok}",
            holdout.len(),
            report.bias_vs_clean.abs(),
            report.clean_rmse,
            report.view_correlation.abs()
        ),
    );
    assert!(pass);
}
