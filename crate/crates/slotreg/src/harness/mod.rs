//! Training loop, evaluation, and the run log.
//!
//! A run is a pure function of its config: the model init, slot noise, batch
//! order, and eval noise are all seeded streams, and every step applies one
//! optimizer update on one batch. The log is line-oriented so a trace can be
//! tailed mid-run and parsed after.

mod gradcheck;
mod render;

pub use gradcheck::{gradient_check, CheckComponent, GradCheckReport};
pub use render::render_masks;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Axis, IxDyn};
use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::config::{resolve_manifest, save_train_config, Objective, TrainConfig};
use crate::data::{frozen, Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_loss, cosine_value, covariance_loss, covariance_value_pooled, recon_loss, total_loss,
    variance_loss, variance_value_pooled, LossReport, LossTerms, Mode,
};
use crate::metrics::{fg_ari, fg_ari_mean, labels_from_masks};
use crate::model::SlotModel;
use crate::optim::Adam;
use crate::rng::{indexed_stream, stream, Stream};
use crate::tape::{Tape, Var};

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 16;

// ---- run log ----

/// Append-only text log of one run.
///
/// Header and annotation lines start with `#`. Step lines carry exactly the
/// keys `step recon var cov cos total`; eval lines start with `eval `. Every
/// line is flushed as written so an aborted run keeps its trace.
pub struct RunLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl RunLog {
    pub fn create(path: &Path, cfg: &TrainConfig) -> Result<RunLog> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = RunLog { out: BufWriter::new(file), path: path.to_path_buf() };
        log.note("slotreg run log")?;
        log.note(&format!(
            "mode={} objective={} seed={} beta={}",
            cfg.mode, cfg.objective, cfg.seed, cfg.loss.beta
        ))?;
        log.note("columns: step recon var cov cos total")?;
        Ok(log)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn step(&mut self, step: usize, r: &LossReport) -> Result<()> {
        let line = format!(
            "step={step} recon={:.9e} var={:.9e} cov={:.9e} cos={:.9e} total={:.9e}",
            r.recon, r.variance, r.covariance, r.cosine, r.total
        );
        self.line(&line)
    }

    pub fn eval(&mut self, step: usize, fg_ari: Option<f64>, skipped: usize, wall_ms: u128) -> Result<()> {
        let fg = match fg_ari {
            Some(v) => format!("{v:.6}"),
            None => "nan".to_string(),
        };
        self.line(&format!("eval step={step} fg_ari={fg} skipped={skipped} wall_ms={wall_ms}"))
    }

    pub fn note(&mut self, msg: &str) -> Result<()> {
        let line = format!("# {msg}");
        self.line(&line)
    }

    fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// One parsed step line of a run log.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
}

/// One periodic evaluation during training. `step` counts completed updates.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord {
    pub step: usize,
    pub fg_ari: Option<f64>,
    pub skipped: usize,
    pub wall_ms: u128,
}

/// What `train` leaves behind besides the files in `out_dir`.
#[derive(Debug)]
pub struct TrainResult {
    pub model: SlotModel,
    /// Loss reports for the logged steps, in order.
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

// ---- batch order ----

/// Epoch shuffler: each epoch is a seeded permutation of the train split, cut
/// into full batches; a tail shorter than the batch is dropped.
struct EpochOrder {
    indices: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl EpochOrder {
    fn new(range: Range<usize>, seed: u64) -> EpochOrder {
        let indices: Vec<usize> = range.collect();
        // Cursor starts at the end so the first request triggers a shuffle.
        EpochOrder { cursor: indices.len(), indices, epoch: 0, seed }
    }

    fn next(&mut self, batch: usize) -> &[usize] {
        assert!(batch <= self.indices.len(), "batch larger than split");
        if self.cursor + batch > self.indices.len() {
            let mut r = indexed_stream(self.seed, Stream::BatchOrder, self.epoch);
            self.epoch += 1;
            self.indices.shuffle(&mut r);
            self.cursor = 0;
        }
        let out = &self.indices[self.cursor..self.cursor + batch];
        self.cursor += batch;
        out
    }
}

// ---- training ----

fn scalar(t: &Tape, v: Var) -> f64 {
    t.value(v)[IxDyn(&[])]
}

fn check_dataset_matches(cfg: &TrainConfig, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    match cfg.objective {
        Objective::ImageRecon => {
            if m.image_size != cfg.model.image_size {
                return Err(Error::config(format!(
                    "dataset images are {0}x{0} but the model expects {1}x{1}",
                    m.image_size, cfg.model.image_size
                )));
            }
        }
        Objective::FeatureRecon => {
            if m.feature_dim != cfg.model.feature_dim
                || m.feature_locations != cfg.model.feature_locations
            {
                return Err(Error::config(format!(
                    "dataset features are [{}, {}] but the model expects [{}, {}]",
                    m.feature_locations, m.feature_dim,
                    cfg.model.feature_locations, cfg.model.feature_dim
                )));
            }
        }
    }
    if m.train_count < cfg.batch_size {
        return Err(Error::config(format!(
            "train split has {} samples, fewer than batch_size {}",
            m.train_count, cfg.batch_size
        )));
    }
    Ok(())
}

/// Run the full training loop described by `cfg`, writing the config copy,
/// run log, and checkpoints into `out_dir`.
///
/// Steps are strictly sequential and every random draw comes from a stream
/// keyed by `cfg.seed`, so two runs of the same config produce identical
/// parameter trajectories. A non-finite loss aborts the run with the step and
/// batch indices in the error; nothing is skipped or retried.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainResult> {
    cfg.validate()?;
    let dataset = Dataset::open(&resolve_manifest(Path::new(&cfg.dataset)))?;
    check_dataset_matches(cfg, &dataset)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut model = SlotModel::new(cfg.model.clone())?;
    save_train_config(&out_dir.join("config.toml"), cfg)?;
    let log_path = out_dir.join("run.log");
    let mut log = RunLog::create(&log_path, cfg)?;

    let mut adam = Adam::new(&model.params, cfg.optimizer.clone());
    let mut order = EpochOrder::new(dataset.manifest.split_range(Split::Train), cfg.seed);
    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let started = Instant::now();

    for step in 0..cfg.total_steps {
        let indices = order.next(cfg.batch_size).to_vec();
        let logged = step % cfg.log_every == 0 || step + 1 == cfg.total_steps;
        let report = match train_step(cfg, &mut model, &mut adam, &dataset, step, &indices, logged)
        {
            Ok(report) => report,
            Err(e) => {
                log.note(&format!("abort step={step}: {e}"))?;
                return Err(e);
            }
        };
        if let Some(report) = report {
            log.step(step, &report)?;
            steps.push(StepRecord { step, report });
        }
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{done:06}.sbck"));
            checkpoint::save_params(&path, &model.params)?;
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let t0 = Instant::now();
            let er = evaluate(&model, &dataset, cfg.objective, Split::Eval, cfg.seed)?;
            let wall_ms = t0.elapsed().as_millis();
            log.eval(done, er.fg_ari, er.skipped, wall_ms)?;
            evals.push(EvalRecord { step: done, fg_ari: er.fg_ari, skipped: er.skipped, wall_ms });
        }
    }

    let final_checkpoint = out_dir.join("ckpt_final.sbck");
    checkpoint::save_params(&final_checkpoint, &model.params)?;
    log.note(&format!(
        "done steps={} wall_s={:.1}",
        cfg.total_steps,
        started.elapsed().as_secs_f64()
    ))?;
    Ok(TrainResult { model, steps, evals, final_checkpoint, log_path })
}

/// One optimizer update. Returns the loss report when `logged` is set.
fn train_step(
    cfg: &TrainConfig,
    model: &mut SlotModel,
    adam: &mut Adam,
    dataset: &Dataset,
    step: usize,
    indices: &[usize],
    logged: bool,
) -> Result<Option<LossReport>> {
    let located = |e: Error| match e {
        Error::Numerical(msg) => {
            Error::numerical(format!("{msg} (step {step}, batch {indices:?})"))
        }
        other => other,
    };
    let mut noise = indexed_stream(cfg.seed, Stream::SlotNoise, step as u64);
    let mut t = Tape::new();
    let taped = model.bind(&mut t, true);

    let (recon, slots) = match cfg.objective {
        Objective::ImageRecon => {
            let images = t.constant(dataset.load_image_batch(indices)?);
            let fwd = model.forward_image(&mut t, &taped, images, &mut noise).map_err(located)?;
            (recon_loss(&mut t, images, fwd.recon)?, fwd.slots)
        }
        Objective::FeatureRecon => {
            let feats = t.constant(frozen::feature_batch(dataset, indices)?);
            let fwd = model.forward_features(&mut t, &taped, feats, &mut noise).map_err(located)?;
            (recon_loss(&mut t, feats, fwd.recon)?, fwd.slots)
        }
    };

    // With beta = 0 no regularizer node is built at all, so the tape (and
    // therefore the parameter trajectory) is identical to a baseline run.
    let mut terms = LossTerms { recon: Some(recon), ..LossTerms::default() };
    if cfg.loss.beta != 0.0 {
        match cfg.mode {
            Mode::Baseline => {}
            Mode::CovLoss => {
                let proj = model.project(&mut t, &taped, slots);
                if cfg.loss.use_variance_term {
                    terms.variance = Some(variance_loss(&mut t, proj, &cfg.loss)?);
                }
                terms.covariance = Some(covariance_loss(&mut t, proj, &cfg.loss)?);
            }
            Mode::VicregFull => {
                let proj = model.project(&mut t, &taped, slots);
                terms.variance = Some(variance_loss(&mut t, proj, &cfg.loss)?);
                terms.covariance = Some(covariance_loss(&mut t, proj, &cfg.loss)?);
            }
            Mode::CosineLoss => {
                terms.cosine = Some(cosine_loss(&mut t, slots, &cfg.loss)?);
            }
        }
    }
    let total = total_loss(&mut t, &terms, cfg.mode, &cfg.loss)?;
    let total_v = scalar(&t, total);
    if !total_v.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite total loss {total_v} at step {step} (batch {indices:?})"
        )));
    }

    // Diagnostics sit past the loss root on the tape; backward only walks
    // nodes up to the root index, so they cannot reach the gradients.
    let report = if logged {
        let proj = model.project(&mut t, &taped, slots);
        Some(LossReport {
            recon: scalar(&t, recon),
            variance: variance_value_pooled(t.value(proj), &cfg.loss)?,
            covariance: covariance_value_pooled(t.value(proj), &cfg.loss)?,
            cosine: cosine_value(t.value(slots), &cfg.loss)?,
            total: total_v,
        })
    } else {
        None
    };

    let grads = t.backward(total);
    adam.step(&mut model.params, &taped, &grads);
    Ok(report)
}

// ---- evaluation ----

/// Foreground ARI of one split.
pub struct EvalReport {
    /// Mean over images with a defined score; `None` if every image skipped.
    pub fg_ari: Option<f64>,
    pub per_image: Vec<Option<f64>>,
    /// Images without foreground pixels, excluded from the mean.
    pub skipped: usize,
}

/// Score predicted masks against ground-truth labels over one split.
///
/// Deterministic for a fixed (model, split, seed): slot noise comes from one
/// eval stream consumed in split order. Feature-path masks live on the frozen
/// encoder's grid and are nearest-upsampled to label resolution.
pub fn evaluate(
    model: &SlotModel,
    dataset: &Dataset,
    objective: Objective,
    split: Split,
    seed: u64,
) -> Result<EvalReport> {
    let indices: Vec<usize> = dataset.manifest.split_range(split).collect();
    if indices.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let mut noise = stream(seed, Stream::EvalNoise);
    let mut per_image = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut t = Tape::new();
        let p = model.bind(&mut t, false);
        let pred = match objective {
            Objective::ImageRecon => {
                let images = t.constant(dataset.load_image_batch(chunk)?);
                let fwd = model.forward_image(&mut t, &p, images, &mut noise)?;
                labels_from_masks(t.value(fwd.alphas))?
            }
            Objective::FeatureRecon => {
                let feats = t.constant(frozen::feature_batch(dataset, chunk)?);
                let fwd = model.forward_features(&mut t, &p, feats, &mut noise)?;
                let a = t.value(fwd.alphas);
                let (b, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let g = (n as f64).sqrt().round() as usize;
                let size = dataset.image_size();
                if g * g != n || size % g != 0 {
                    return Err(Error::config(format!(
                        "feature grid {n} is not a square divisor of {size}x{size} labels"
                    )));
                }
                let a4 = a
                    .clone()
                    .into_shape_with_order(IxDyn(&[b, k, g, g]))
                    .expect("square grid reshape");
                upsample_labels(&labels_from_masks(&a4)?, size / g)
            }
        };
        for (bi, &i) in chunk.iter().enumerate() {
            let gt: Vec<u32> = dataset.load_labels(i)?.iter().copied().collect();
            let pr: Vec<u32> = pred.index_axis(Axis(0), bi).iter().copied().collect();
            per_image.push(fg_ari(&gt, &pr)?);
        }
    }
    let (fg_ari, skipped) = fg_ari_mean(&per_image);
    Ok(EvalReport { fg_ari, per_image, skipped })
}

/// Replicate each label cell into a `factor` x `factor` block.
fn upsample_labels(labels: &Array3<u32>, factor: usize) -> Array3<u32> {
    let (b, g, _) = labels.dim();
    let s = g * factor;
    Array3::from_shape_fn((b, s, s), |(bi, y, x)| labels[[bi, y / factor, x / factor]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, GenConfig};
    use crate::model::{DecoderKind, ModelConfig};
    use crate::optim::OptimConfig;
    use crate::testutil::{tmp_dir, tmp_path};
    use ndarray::arr3;

    fn tiny_cfg(dataset_dir: &Path) -> TrainConfig {
        TrainConfig {
            mode: Mode::Baseline,
            objective: Objective::ImageRecon,
            dataset: dataset_dir.to_string_lossy().into_owned(),
            model: ModelConfig {
                image_size: 16,
                d_enc: 8,
                d_slots: 8,
                n_slots: 3,
                n_iters: 2,
                d_proj: 12,
                proj_hidden_layers: 1,
                d_dec: 8,
                seed: 11,
                ..ModelConfig::default()
            },
            batch_size: 4,
            total_steps: 4,
            checkpoint_every: 2,
            eval_every: 2,
            log_every: 2,
            seed: 21,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(name: &str) -> PathBuf {
        let dir = tmp_dir(name);
        let gen = GenConfig { image_size: 16, ..GenConfig::default() };
        build_dataset(&gen, 31, 8, 4, 6, &dir).unwrap();
        dir
    }

    #[test]
    fn run_log_lines_parse_back() {
        let path = tmp_path("run.log");
        let data = tiny_dataset("runlog_data");
        let cfg = tiny_cfg(&data);
        let mut log = RunLog::create(&path, &cfg).unwrap();
        let report = LossReport {
            recon: 0.5,
            variance: 0.25,
            covariance: 1e-10,
            cosine: 0.0,
            total: 0.5,
        };
        log.step(0, &report).unwrap();
        log.eval(2, Some(0.75), 1, 12).unwrap();
        log.eval(4, None, 4, 9).unwrap();
        drop(log);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut steps = 0;
        for line in text.lines() {
            if line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("eval ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                assert!(fields[0].starts_with("step="));
                assert!(fields[1].starts_with("fg_ari="));
                continue;
            }
            steps += 1;
            let keys: Vec<&str> = line
                .split(' ')
                .map(|kv| kv.split_once('=').unwrap().0)
                .collect();
            assert_eq!(keys, ["step", "recon", "var", "cov", "cos", "total"]);
            for kv in line.split(' ').skip(1) {
                let (_, v) = kv.split_once('=').unwrap();
                v.parse::<f64>().unwrap();
            }
        }
        assert_eq!(steps, 1);
        assert!(text.contains("mode=baseline"));
        assert!(text.contains("fg_ari=nan"));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation_per_epoch() {
        let mut a = EpochOrder::new(0..10, 9);
        let mut b = EpochOrder::new(0..10, 9);
        let mut seen = Vec::new();
        for _ in 0..3 {
            let batch_a = a.next(3).to_vec();
            assert_eq!(batch_a, b.next(3).to_vec());
            seen.extend(batch_a);
        }
        // Three batches of three from one epoch: distinct draws, tail dropped.
        let mut sorted = seen.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 9);
        assert!(seen.iter().all(|i| *i < 10));

        // The next request crosses the epoch boundary and reshuffles.
        let second_epoch = a.next(3).to_vec();
        assert_eq!(second_epoch, b.next(3).to_vec());
        assert!(second_epoch.iter().all(|i| *i < 10));

        let mut other_seed = EpochOrder::new(0..10, 10);
        let different: Vec<usize> = (0..3).flat_map(|_| other_seed.next(3).to_vec()).collect();
        assert_ne!(seen, different, "distinct seeds should reorder the epoch");
    }

    #[test]
    fn train_writes_log_checkpoints_and_config() {
        let data = tiny_dataset("train_smoke_data");
        let out = tmp_dir("train_smoke_out");
        let cfg = tiny_cfg(&data);
        let result = train(&cfg, &out).unwrap();

        assert_eq!(result.steps.len(), 3, "steps 0 and 2 hit the cadence, 3 is last");
        assert!(result.steps.iter().all(|s| s.report.total.is_finite()));
        assert_eq!(result.evals.len(), 2);
        assert!(out.join("config.toml").is_file());
        assert!(out.join("ckpt_000002.sbck").is_file());
        assert!(out.join("ckpt_000004.sbck").is_file());

        let restored = checkpoint::load_params(&result.final_checkpoint).unwrap();
        let names: Vec<&String> = restored.iter().map(|(n, _)| n).collect();
        let fresh: Vec<&String> = result.model.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names, fresh);
        for ((_, a), (_, b)) in restored.iter().zip(result.model.params.iter()) {
            assert_eq!(a, b, "final checkpoint must capture the trained values");
        }

        let text = std::fs::read_to_string(&result.log_path).unwrap();
        assert!(text.lines().any(|l| l.starts_with("step=0 ")));
        assert!(text.lines().any(|l| l.starts_with("eval step=2 ")));
        assert!(text.lines().any(|l| l.starts_with("# done steps=4")));
    }

    #[test]
    fn zero_steps_still_produces_a_checkpoint() {
        let data = tiny_dataset("train_zero_data");
        let out = tmp_dir("train_zero_out");
        let cfg = TrainConfig { total_steps: 0, ..tiny_cfg(&data) };
        let result = train(&cfg, &out).unwrap();
        assert!(result.steps.is_empty());
        assert!(result.final_checkpoint.is_file());
        let restored = checkpoint::load_params(&result.final_checkpoint).unwrap();
        let fresh = SlotModel::new(cfg.model.clone()).unwrap();
        for ((_, a), (_, b)) in restored.iter().zip(fresh.params.iter()) {
            assert_eq!(a, b, "zero-step checkpoint is the seeded init");
        }
    }

    #[test]
    fn covloss_with_zero_beta_matches_baseline_bitwise() {
        let data = tiny_dataset("beta_zero_data");
        let base_out = tmp_dir("beta_zero_base");
        let cov_out = tmp_dir("beta_zero_cov");
        let base_cfg = TrainConfig { total_steps: 6, eval_every: 0, ..tiny_cfg(&data) };
        let cov_cfg = TrainConfig {
            mode: Mode::CovLoss,
            loss: crate::losses::LossConfig { beta: 0.0, ..base_cfg.loss },
            ..base_cfg.clone()
        };
        let a = train(&base_cfg, &base_out).unwrap();
        let b = train(&cov_cfg, &cov_out).unwrap();
        let bytes_a = std::fs::read(&a.final_checkpoint).unwrap();
        let bytes_b = std::fs::read(&b.final_checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b, "beta=0 covLoss must not perturb the trajectory");
    }

    #[test]
    fn covloss_mode_moves_the_covariance_trace() {
        let data = tiny_dataset("covloss_data");
        let out = tmp_dir("covloss_out");
        let cfg = TrainConfig {
            mode: Mode::CovLoss,
            total_steps: 3,
            eval_every: 0,
            log_every: 1,
            ..tiny_cfg(&data)
        };
        let result = train(&cfg, &out).unwrap();
        assert_eq!(result.steps.len(), 3);
        for s in &result.steps {
            assert!(s.report.covariance.is_finite());
            assert!(s.report.total >= s.report.recon - 1e-12);
        }
    }

    #[test]
    fn feature_objective_trains_end_to_end() {
        let data = tiny_dataset("feature_train_data");
        let out = tmp_dir("feature_train_out");
        let mut cfg = TrainConfig {
            mode: Mode::CovLoss,
            objective: Objective::FeatureRecon,
            total_steps: 3,
            eval_every: 3,
            log_every: 1,
            ..tiny_cfg(&data)
        };
        cfg.model.decoder = DecoderKind::MlpFeature;
        cfg.model.feature_dim = 6;
        cfg.model.feature_locations = 16;
        let result = train(&cfg, &out).unwrap();
        assert_eq!(result.steps.len(), 3);
        assert_eq!(result.evals.len(), 1, "eval runs on the feature path too");
    }

    #[test]
    fn dataset_model_mismatch_is_a_config_error() {
        let data = tiny_dataset("mismatch_data");
        let out = tmp_dir("mismatch_out");
        let mut cfg = tiny_cfg(&data);
        cfg.model.image_size = 32;
        let err = train(&cfg, &out).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn divergence_aborts_with_the_step_in_the_error() {
        let data = tiny_dataset("diverge_data");
        let out = tmp_dir("diverge_out");
        let cfg = TrainConfig {
            optimizer: OptimConfig { lr: 1e18, warmup_steps: 0, ..OptimConfig::default() },
            total_steps: 50,
            eval_every: 0,
            ..tiny_cfg(&data)
        };
        let err = train(&cfg, &out).unwrap_err();
        assert_eq!(err.exit_code(), 2, "divergence is a numerical abort: {err}");
        assert!(format!("{err}").contains("step"), "diagnostic names the step: {err}");
        let text = std::fs::read_to_string(out.join("run.log")).unwrap();
        assert!(text.lines().any(|l| l.starts_with("# abort step=")));
    }

    #[test]
    fn evaluate_is_deterministic_and_covers_the_split() {
        let data = tiny_dataset("eval_det_data");
        let cfg = tiny_cfg(&data);
        let dataset = Dataset::open(&resolve_manifest(&data)).unwrap();
        let model = SlotModel::new(cfg.model.clone()).unwrap();
        let a = evaluate(&model, &dataset, Objective::ImageRecon, Split::Eval, 7).unwrap();
        let b = evaluate(&model, &dataset, Objective::ImageRecon, Split::Eval, 7).unwrap();
        assert_eq!(a.per_image.len(), 4);
        assert_eq!(a.per_image.len(), b.per_image.len());
        for (x, y) in a.per_image.iter().zip(b.per_image.iter()) {
            assert_eq!(x, y);
        }
        for v in a.per_image.iter().flatten() {
            assert!(*v <= 1.0 + 1e-12 && *v >= -1.0 - 1e-12);
        }
        assert_eq!(a.skipped + a.per_image.iter().flatten().count(), a.per_image.len());
    }

    #[test]
    fn label_upsampling_replicates_blocks() {
        let labels = arr3(&[[[1u32, 2], [3, 4]]]);
        let up = upsample_labels(&labels, 2);
        assert_eq!(up.dim(), (1, 4, 4));
        assert_eq!(up[[0, 0, 1]], 1);
        assert_eq!(up[[0, 1, 0]], 1);
        assert_eq!(up[[0, 0, 2]], 2);
        assert_eq!(up[[0, 3, 3]], 4);
    }
}
