//! Command-line front end: dataset generation, training, evaluation,
//! probing, gradient checking, and mask rendering.
//!
//! Every command exits 0 on success, 1 on a configuration error, 2 on a
//! numerical abort, and 3 on I/O trouble.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slotreg::checkpoint::{load_params, save_params};
use slotreg::config::{load_train_config, resolve_manifest, TrainConfig};
use slotreg::data::{build_dataset, Dataset, GenConfig, Split};
use slotreg::harness::{evaluate, gradient_check, render_masks, train, CheckComponent};
use slotreg::losses::Mode;
use slotreg::model::SlotModel;
use slotreg::probe::{score_probe, train_probe, ProbeConfig};
use slotreg::{Error, Result};

#[derive(Parser)]
#[command(name = "slotreg", version, about = "Slot-attention autoencoders with regularized bottlenecks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a colored-sprites dataset with masks, object features, and
    /// frozen features.
    GenData(GenDataArgs),
    /// Train a model described by a TOML config.
    Train(TrainArgs),
    /// Score a checkpoint's masks against ground-truth labels.
    Eval(EvalArgs),
    /// Fit the feature-prediction probe on a checkpoint's frozen slots.
    ProbeTrain(ProbeTrainArgs),
    /// Score a trained probe on held-out images.
    ProbeEval(ProbeEvalArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Render input / reconstruction / per-slot panels for a few samples.
    Render(RenderArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the manifest and sample tensors.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 128)]
    n_eval: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.15)]
    scale_min: f64,
    #[arg(long, default_value_t = 0.45)]
    scale_max: f64,
    /// Width of the frozen features written alongside each sample.
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file mirroring TrainConfig field names.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for the log, config copy, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the run seed and the model init seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's mode (baseline, covLoss, vicreg_full, cosineLoss).
    #[arg(long)]
    mode: Option<String>,
    /// Overrides the regularizer weight.
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which manifest split to score (train or eval).
    #[arg(long, default_value = "eval")]
    split: String,
    /// Overrides the config seed for the evaluation slot noise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProbeTrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// File the trained probe parameters are written to.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProbeEvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Probe parameter file written by probe-train.
    #[arg(long)]
    probe: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// One of variance_loss, covariance_loss, cosine_loss, recon_loss,
    /// end_to_end; all five when omitted.
    #[arg(long)]
    component: Option<String>,
    /// Pass threshold on the max relative error; defaults to 1e-4 for the
    /// loss components and 1e-3 end to end.
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory the PNG rows are written to.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// How many samples to render, from the start of the split.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; only real usage mistakes are
            // config errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::ProbeTrain(a) => run_probe_train(a),
        Cmd::ProbeEval(a) => run_probe_eval(a),
        Cmd::GradCheck(a) => run_grad_check(a),
        Cmd::Render(a) => run_render(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        image_size: a.image_size,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        scale_min: a.scale_min,
        scale_max: a.scale_max,
    };
    let manifest = build_dataset(&cfg, a.seed, a.n_train, a.n_eval, a.feature_dim, &a.out)?;
    println!(
        "wrote {} train + {} eval samples ({}x{}, features {}x{}) to {}",
        manifest.train_count,
        manifest.eval_count,
        manifest.image_size,
        manifest.image_size,
        manifest.feature_locations,
        manifest.feature_dim,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_train_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
    }
    if let Some(mode) = &a.mode {
        cfg.mode = Mode::parse(mode)?;
    }
    if let Some(beta) = a.beta {
        cfg.loss.beta = beta;
    }
    let result = train(&cfg, &a.out)?;
    if let Some(last) = result.steps.last() {
        println!(
            "step {} recon={:.6e} total={:.6e}",
            last.step, last.report.recon, last.report.total
        );
    }
    if let Some(eval) = result.evals.last() {
        match eval.fg_ari {
            Some(v) => println!("eval step {} fg_ari={v:.4}", eval.step),
            None => println!("eval step {} fg_ari=nan (all images skipped)", eval.step),
        }
    }
    println!("log: {}", result.log_path.display());
    println!("final checkpoint: {}", result.final_checkpoint.display());
    Ok(())
}

/// Rebuilds the model a config describes from a checkpoint's parameters.
fn load_model(cfg: &TrainConfig, checkpoint: &Path) -> Result<(SlotModel, Dataset)> {
    cfg.validate()?;
    let dataset = Dataset::open(&resolve_manifest(Path::new(&cfg.dataset)))?;
    let params = load_params(checkpoint)?;
    let model = SlotModel::from_parts(cfg.model.clone(), params)?;
    Ok((model, dataset))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_train_config(&a.config)?;
    let (model, dataset) = load_model(&cfg, &a.checkpoint)?;
    let split = Split::parse(&a.split)?;
    let report = evaluate(&model, &dataset, cfg.objective, split, a.seed.unwrap_or(cfg.seed))?;
    let scored = report.per_image.len() - report.skipped;
    match report.fg_ari {
        Some(v) => println!("fg_ari={v:.6} images={scored} skipped={}", report.skipped),
        None => println!("fg_ari=nan images=0 skipped={}", report.skipped),
    }
    Ok(())
}

fn run_probe_train(a: ProbeTrainArgs) -> Result<()> {
    let cfg = load_train_config(&a.config)?;
    let (model, dataset) = load_model(&cfg, &a.checkpoint)?;
    let probe_cfg = ProbeConfig { seed: a.seed.unwrap_or(cfg.seed), ..ProbeConfig::default() };
    let outcome = train_probe(&model, &dataset, cfg.objective, &probe_cfg)?;
    save_params(&a.out, &outcome.params)?;
    if let Some(last) = outcome.losses.last() {
        println!("probe loss {last:.6e} after {} steps", outcome.losses.len());
    }
    println!("skipped {} samples with more objects than slots", outcome.skipped);
    println!("probe: {}", a.out.display());
    Ok(())
}

fn run_probe_eval(a: ProbeEvalArgs) -> Result<()> {
    let cfg = load_train_config(&a.config)?;
    let (model, dataset) = load_model(&cfg, &a.checkpoint)?;
    let probe = load_params(&a.probe)?;
    let split = Split::parse(&a.split)?;
    let score = score_probe(&probe, &model, &dataset, cfg.objective, split, a.seed.unwrap_or(cfg.seed))?;
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.4}"));
    println!(
        "shape_acc={:.4} color_r2={} scale_r2={} x_r2={} y_r2={} matched={} skipped={}",
        score.shape_acc,
        fmt(score.color_r2),
        fmt(score.scale_r2),
        fmt(score.x_r2),
        fmt(score.y_r2),
        score.matched,
        score.skipped
    );
    Ok(())
}

fn run_grad_check(a: GradCheckArgs) -> Result<()> {
    let components: Vec<CheckComponent> = match &a.component {
        Some(s) => vec![CheckComponent::parse(s)?],
        None => CheckComponent::ALL.to_vec(),
    };
    let mut failed = 0usize;
    for component in components {
        let default_tol = match component {
            CheckComponent::EndToEnd => 1e-3,
            _ => 1e-4,
        };
        let report = gradient_check(component, a.rel_tol.unwrap_or(default_tol), a.seed)?;
        println!(
            "{}: max_rel_err={:.3e} rel_tol={:.0e} {}",
            report.component,
            report.max_rel_err,
            report.rel_tol,
            if report.pass { "pass" } else { "FAIL" }
        );
        if !report.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::numerical(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

fn run_render(a: RenderArgs) -> Result<()> {
    let cfg = load_train_config(&a.config)?;
    let (model, dataset) = load_model(&cfg, &a.checkpoint)?;
    let split = Split::parse(&a.split)?;
    let range = dataset.manifest.split_range(split);
    let indices: Vec<usize> = range.take(a.samples).collect();
    if indices.is_empty() {
        return Err(Error::config("no samples to render in that split"));
    }
    let files = render_masks(&model, &dataset, cfg.objective, &indices, &a.out, a.seed.unwrap_or(cfg.seed))?;
    println!("wrote {} rows to {}", files.len(), a.out.display());
    Ok(())
}
