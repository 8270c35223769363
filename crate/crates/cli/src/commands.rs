//! Subcommands. Each resolves its settings, runs, and writes the outputs
//! together with the resolved-settings snapshot.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qpart::analysis::{
    ablation_run, k_sweep, k_sweep_means, report_predictions, verify_theorem1,
    verify_theorem1_empirical, write_csv, AblationModels, TheoremSimConfig, ABLATION_ROWS,
};
use qpart::qpnet::{load_checkpoint, save_checkpoint, train_with, ModelConfig, QpNet, TrainConfig};
use qpart::synthdata::{
    generate_cohorts, Dataset, DatasetSpec, VideoSample, SOURCE_HOLDOUT, SOURCE_TRAIN,
    TARGET_PRESCHOOL,
};
use qpart::ttt::{evaluate_cohort, read_predictions, write_predictions, AdaptConfig, EvalMode};

use crate::run_config::{
    ensure_parent, existing, load, output_path, required, save, snapshot_for_dir,
    snapshot_for_file, usage,
};

#[derive(Parser)]
#[command(
    name = "qpart",
    version,
    about = "Quasi-periodic video regression with test-time adaptation"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic cohorts into a dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Predict one cohort, with or without adaptation, into a CSV.
    Eval(EvalArgs),
    /// Check the variance-to-error bound by simulation or on a model.
    VerifyTheorem(VerifyArgs),
    /// Adaptation ablation over component flags and seeds.
    Ablate(AblateArgs),
    /// Adaptation error as a function of the number of views.
    SweepK(SweepArgs),
    /// Metrics for a predictions CSV.
    Report(ReportArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::VerifyTheorem(a) => verify_theorem(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepK(a) => sweep_k(a),
        Command::Report(a) => report(a),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn resolve<T: Default + serde::de::DeserializeOwned>(
    config: &Option<PathBuf>,
    command: &str,
) -> Result<T> {
    match config {
        Some(path) => load(path, command),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn open_cohort(data: &Path, cohort: &str) -> Result<Vec<VideoSample>> {
    existing(data, "dataset")?;
    let samples = Dataset::open(data)?.cohort(cohort)?;
    if samples.is_empty() {
        return Err(usage(format!("cohort {cohort} has no samples")));
    }
    Ok(samples)
}

fn open_checkpoint(path: &Path) -> Result<QpNet> {
    existing(path, "checkpoint")?;
    Ok(load_checkpoint(path)?)
}

fn seed_list(seed: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| seed + i).collect()
}

/// Adaptation overrides shared by the evaluation commands.
#[derive(Args)]
struct AdaptArgs {
    /// Augmented views per sample.
    #[arg(long)]
    k: Option<usize>,
    /// Adaptation steps per sample.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_base: Option<f64>,
    #[arg(long)]
    lr_periodic: Option<f64>,
    #[arg(long)]
    lr_aperiodic: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
}

impl AdaptArgs {
    fn apply(self, cfg: &mut AdaptConfig) {
        set(&mut cfg.k, self.k);
        set(&mut cfg.steps, self.steps);
        set(&mut cfg.lr_base, self.lr_base);
        set(&mut cfg.lr_periodic, self.lr_periodic);
        set(&mut cfg.lr_aperiodic, self.lr_aperiodic);
        set(&mut cfg.momentum, self.momentum);
    }
}

// gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Resolved-settings snapshot of an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset spec JSON; the built-in desk spec when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct GenDataRun {
    spec: DatasetSpec,
    out: Option<PathBuf>,
    seed: u64,
}

impl Default for GenDataRun {
    fn default() -> Self {
        Self {
            spec: DatasetSpec::desk(),
            out: None,
            seed: 0,
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    const NAME: &str = "gen-data";
    let mut cfg: GenDataRun = resolve(&a.config, NAME)?;
    if let Some(path) = &a.spec {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("spec {}: {e}", path.display())))?;
        cfg.spec = serde_json::from_str(&text)
            .map_err(|e| usage(format!("spec {}: {e}", path.display())))?;
    }
    set_some(&mut cfg.out, a.out);
    set(&mut cfg.seed, a.seed);
    let out = output_path(required(cfg.out.clone(), "--out")?);
    let manifest = generate_cohorts(&cfg.spec, cfg.seed, &out)?;
    save(&snapshot_for_dir(&out), NAME, &cfg)?;
    eprintln!(
        "wrote {} samples to {}",
        manifest.records.len(),
        out.display()
    );
    Ok(())
}

// train

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training cohort.
    #[arg(long)]
    cohort: Option<String>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train without the periodic/aperiodic decomposition.
    #[arg(long)]
    plain: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    data: Option<PathBuf>,
    cohort: String,
    out: Option<PathBuf>,
    plain: bool,
    train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            data: None,
            cohort: SOURCE_TRAIN.to_string(),
            out: None,
            plain: false,
            train: TrainConfig::default(),
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    const NAME: &str = "train";
    let mut cfg: TrainRun = resolve(&a.config, NAME)?;
    set_some(&mut cfg.data, a.data);
    set(&mut cfg.cohort, a.cohort);
    set_some(&mut cfg.out, a.out);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.seed, a.seed);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.batch_size, a.batch_size);
    cfg.plain |= a.plain;
    let data = required(cfg.data.clone(), "--data")?;
    let out = output_path(required(cfg.out.clone(), "--out")?);
    let samples = open_cohort(&data, &cfg.cohort)?;
    let manifest = Dataset::open(&data)?.manifest().clone();
    let model_cfg = ModelConfig {
        frames: manifest.frames,
        frame_size: manifest.frame_size,
        latent_size: manifest.frame_size / 4,
        decomposition: !cfg.plain,
        ..ModelConfig::default()
    };
    let mut model = QpNet::new(model_cfg, cfg.train.seed)?;
    let report = train_with(&mut model, &samples, &cfg.train, |e| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  reg {:.4}  rec {:.5}",
            e.epoch, e.lr, e.mean_total, e.mean_reg, e.mean_rec
        );
    })?;
    save_checkpoint(&model, &out)?;
    write_json(&out.join("train_report.json"), &report)?;
    save(&snapshot_for_dir(&out), NAME, &cfg)?;
    eprintln!("checkpoint written to {}", out.display());
    Ok(())
}

// eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<String>,
    /// `source_only` or `ttt`.
    #[arg(long)]
    mode: Option<EvalMode>,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for episodic adaptation; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Predictions CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct EvalRun {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    cohort: String,
    mode: EvalMode,
    adapt: AdaptConfig,
    seed: u64,
    workers: usize,
    out: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            ckpt: None,
            data: None,
            cohort: SOURCE_HOLDOUT.to_string(),
            mode: EvalMode::Ttt,
            adapt: AdaptConfig::default(),
            seed: 0,
            workers: 0,
            out: None,
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    const NAME: &str = "eval";
    let mut cfg: EvalRun = resolve(&a.config, NAME)?;
    set_some(&mut cfg.ckpt, a.ckpt);
    set_some(&mut cfg.data, a.data);
    set(&mut cfg.cohort, a.cohort);
    set(&mut cfg.mode, a.mode);
    a.adapt.apply(&mut cfg.adapt);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.workers, a.workers);
    set_some(&mut cfg.out, a.out);
    let out = output_path(required(cfg.out.clone(), "--out")?);
    let model = open_checkpoint(&required(cfg.ckpt.clone(), "--ckpt")?)?;
    let samples = open_cohort(&required(cfg.data.clone(), "--data")?, &cfg.cohort)?;
    let rows = evaluate_cohort(
        &model,
        &samples,
        &cfg.adapt,
        cfg.mode,
        cfg.seed,
        cfg.workers,
    )?;
    ensure_parent(&out)?;
    write_predictions(&rows, &out)?;
    save(&snapshot_for_file(&out), NAME, &cfg)?;
    for m in report_predictions(&rows)? {
        eprintln!(
            "{} {}: n {} mae {:.3} rmse {:.3}",
            m.cohort, m.mode, m.n, m.mae, m.rmse
        );
    }
    Ok(())
}

// verify-theorem

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Views per trial.
    #[arg(long)]
    k: Option<usize>,
    /// View error standard deviation of the simulation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Measure the bound on model predictions instead of simulating.
    #[arg(long)]
    empirical: bool,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<String>,
    /// Adaptation steps before the views are scored in empirical mode.
    #[arg(long)]
    steps: Option<usize>,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct VerifyRun {
    k: usize,
    sigma: f64,
    trials: usize,
    seed: u64,
    empirical: bool,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    cohort: String,
    steps: usize,
    out: Option<PathBuf>,
}

impl Default for VerifyRun {
    fn default() -> Self {
        Self {
            k: 8,
            sigma: 1.0,
            trials: 100_000,
            seed: 0,
            empirical: false,
            ckpt: None,
            data: None,
            cohort: SOURCE_HOLDOUT.to_string(),
            steps: 0,
            out: None,
        }
    }
}

fn verify_theorem(a: VerifyArgs) -> Result<()> {
    const NAME: &str = "verify-theorem";
    let mut cfg: VerifyRun = resolve(&a.config, NAME)?;
    set(&mut cfg.k, a.k);
    set(&mut cfg.sigma, a.sigma);
    set(&mut cfg.trials, a.trials);
    set(&mut cfg.seed, a.seed);
    cfg.empirical |= a.empirical;
    set_some(&mut cfg.ckpt, a.ckpt);
    set_some(&mut cfg.data, a.data);
    set(&mut cfg.cohort, a.cohort);
    set(&mut cfg.steps, a.steps);
    set_some(&mut cfg.out, a.out);
    let report = if cfg.empirical {
        let model = open_checkpoint(&required(cfg.ckpt.clone(), "--ckpt")?)?;
        let samples = open_cohort(&required(cfg.data.clone(), "--data")?, &cfg.cohort)?;
        let adapt = AdaptConfig {
            k: cfg.k,
            steps: cfg.steps,
            ..AdaptConfig::default()
        };
        serde_json::to_value(verify_theorem1_empirical(
            &model, &samples, &adapt, cfg.seed,
        )?)?
    } else {
        serde_json::to_value(verify_theorem1(&TheoremSimConfig {
            k: cfg.k,
            sigma: cfg.sigma,
            trials: cfg.trials,
            seed: cfg.seed,
        })?)?
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&report)?)?;
    if let Some(out) = cfg.out.clone().map(output_path) {
        ensure_parent(&out)?;
        write_json(&out, &report)?;
        save(&snapshot_for_file(&out), NAME, &cfg)?;
    }
    Ok(())
}

// ablate

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Checkpoint trained without the decomposition, used by the rows that
    /// switch it off. Without it those rows bypass the decomposition of
    /// `--ckpt`.
    #[arg(long)]
    plain_ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<String>,
    /// Number of seeds, counting up from `--seed`.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[arg(long)]
    workers: Option<usize>,
    /// Per-seed rows CSV; the seed-averaged summary goes to
    /// `<out>.summary.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct AblateRun {
    ckpt: Option<PathBuf>,
    plain_ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    cohort: String,
    seeds: usize,
    seed: u64,
    adapt: AdaptConfig,
    workers: usize,
    out: Option<PathBuf>,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            ckpt: None,
            plain_ckpt: None,
            data: None,
            cohort: TARGET_PRESCHOOL.to_string(),
            seeds: 3,
            seed: 0,
            adapt: AdaptConfig::default(),
            workers: 0,
            out: None,
        }
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    const NAME: &str = "ablate";
    let mut cfg: AblateRun = resolve(&a.config, NAME)?;
    set_some(&mut cfg.ckpt, a.ckpt);
    set_some(&mut cfg.plain_ckpt, a.plain_ckpt);
    set_some(&mut cfg.data, a.data);
    set(&mut cfg.cohort, a.cohort);
    set(&mut cfg.seeds, a.seeds);
    set(&mut cfg.seed, a.seed);
    a.adapt.apply(&mut cfg.adapt);
    set(&mut cfg.workers, a.workers);
    set_some(&mut cfg.out, a.out);
    if cfg.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let out = output_path(required(cfg.out.clone(), "--out")?);
    let decomposed = open_checkpoint(&required(cfg.ckpt.clone(), "--ckpt")?)?;
    let plain = cfg.plain_ckpt.as_deref().map(open_checkpoint).transpose()?;
    let samples = open_cohort(&required(cfg.data.clone(), "--data")?, &cfg.cohort)?;
    let models = AblationModels {
        decomposed: &decomposed,
        plain: plain.as_ref(),
    };
    let report = ablation_run(
        &models,
        &samples,
        &cfg.adapt,
        &ABLATION_ROWS,
        &seed_list(cfg.seed, cfg.seeds),
        cfg.workers,
    )?;
    ensure_parent(&out)?;
    write_csv(&report.rows, &out)?;
    write_json(&out.with_extension("summary.json"), &report)?;
    save(&snapshot_for_file(&out), NAME, &cfg)?;
    for (name, mae) in &report.source_only_mae {
        eprintln!("source only ({name}): mae {mae:.3}");
    }
    for s in &report.summary {
        eprintln!(
            "{:<24} mae {:.3} rmse {:.3}",
            s.label, s.mean_mae, s.mean_rmse
        );
    }
    Ok(())
}

// sweep-k

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<String>,
    /// Comma-separated view counts.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    adapt: AdaptArgs,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct SweepRun {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    cohort: String,
    ks: Vec<usize>,
    seeds: usize,
    seed: u64,
    adapt: AdaptConfig,
    workers: usize,
    out: Option<PathBuf>,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            ckpt: None,
            data: None,
            cohort: TARGET_PRESCHOOL.to_string(),
            ks: vec![2, 4, 8, 16],
            seeds: 3,
            seed: 0,
            adapt: AdaptConfig::default(),
            workers: 0,
            out: None,
        }
    }
}

fn sweep_k(a: SweepArgs) -> Result<()> {
    const NAME: &str = "sweep-k";
    let mut cfg: SweepRun = resolve(&a.config, NAME)?;
    set_some(&mut cfg.ckpt, a.ckpt);
    set_some(&mut cfg.data, a.data);
    set(&mut cfg.cohort, a.cohort);
    set(&mut cfg.ks, a.ks);
    set(&mut cfg.seeds, a.seeds);
    set(&mut cfg.seed, a.seed);
    a.adapt.apply(&mut cfg.adapt);
    set(&mut cfg.workers, a.workers);
    set_some(&mut cfg.out, a.out);
    if cfg.seeds == 0 || cfg.ks.is_empty() {
        return Err(usage("--ks and --seeds must be non-empty"));
    }
    let out = output_path(required(cfg.out.clone(), "--out")?);
    let model = open_checkpoint(&required(cfg.ckpt.clone(), "--ckpt")?)?;
    let samples = open_cohort(&required(cfg.data.clone(), "--data")?, &cfg.cohort)?;
    let rows = k_sweep(
        &model,
        &samples,
        &cfg.adapt,
        &cfg.ks,
        &seed_list(cfg.seed, cfg.seeds),
        cfg.workers,
    )?;
    ensure_parent(&out)?;
    write_csv(&rows, &out)?;
    save(&snapshot_for_file(&out), NAME, &cfg)?;
    for ((k, cohort), mae) in k_sweep_means(&rows) {
        eprintln!("K {k:>3} {cohort}: mae {mae:.3}");
    }
    Ok(())
}

// report

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Predictions CSV written by `eval`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct ReportRun {
    pred: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn report(a: ReportArgs) -> Result<()> {
    const NAME: &str = "report";
    let mut cfg: ReportRun = resolve(&a.config, NAME)?;
    set_some(&mut cfg.pred, a.pred);
    set_some(&mut cfg.out, a.out);
    let pred = required(cfg.pred.clone(), "--pred")?;
    existing(&pred, "predictions")?;
    let out = output_path(required(cfg.out.clone(), "--out")?);
    let rows = read_predictions(&pred)?;
    if rows.is_empty() {
        return Err(usage(format!("{} has no rows", pred.display())));
    }
    let reports = report_predictions(&rows)?;
    ensure_parent(&out)?;
    write_json(&out, &reports)?;
    save(&snapshot_for_file(&out), NAME, &cfg)?;
    for m in &reports {
        let mauroc = m.mauroc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "{} {}: mae {:.3} rmse {:.3} mauroc {mauroc}",
            m.cohort, m.mode, m.mae, m.rmse
        );
    }
    Ok(())
}
