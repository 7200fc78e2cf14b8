//! Finite-difference verification of analytic gradients.
//!
//! Each component builds a scalar loss twice: once on the tape for the
//! analytic gradient, once as a plain closure probed by central differences.
//! Checks sample ~100 coordinates rather than sweeping every parameter; the
//! end-to-end check goes through the full image model.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{
    cosine_loss, covariance_loss, recon_loss, variance_loss, LossConfig,
};
use crate::model::{ModelConfig, SlotModel};
use crate::nn::ParamSet;
use crate::rng::{self, indexed_stream, stream, Stream};
use crate::tape::{Tape, Var};

/// Which scalar to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckComponent {
    VarianceLoss,
    CovarianceLoss,
    CosineLoss,
    ReconLoss,
    EndToEnd,
}

impl CheckComponent {
    pub const ALL: [CheckComponent; 5] = [
        CheckComponent::VarianceLoss,
        CheckComponent::CovarianceLoss,
        CheckComponent::CosineLoss,
        CheckComponent::ReconLoss,
        CheckComponent::EndToEnd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckComponent::VarianceLoss => "variance_loss",
            CheckComponent::CovarianceLoss => "covariance_loss",
            CheckComponent::CosineLoss => "cosine_loss",
            CheckComponent::ReconLoss => "recon_loss",
            CheckComponent::EndToEnd => "end_to_end",
        }
    }

    pub fn parse(s: &str) -> Result<CheckComponent> {
        CheckComponent::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown component '{s}' (expected variance_loss, covariance_loss, \
                     cosine_loss, recon_loss or end_to_end)"
                ))
            })
    }
}

impl std::fmt::Display for CheckComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of one component check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub component: CheckComponent,
    pub max_rel_err: f64,
    /// Coordinates actually compared.
    pub coords: usize,
    pub rel_tol: f64,
    pub pass: bool,
}

const FD_EPS_LOSS: f64 = 1e-6;
const FD_EPS_MODEL: f64 = 1e-5;
const SAMPLE_COORDS: usize = 100;
/// Cosine coordinates whose pair similarity sits this close to the hinge
/// margin are skipped; the loss is subdifferentiable there.
const KINK_WIDTH: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare the tape gradient of a loss on one input tensor against central
/// differences at `SAMPLE_COORDS` random coordinates.
fn check_input_grad(
    build: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    x: &ArrayD<f64>,
    seed: u64,
) -> Result<f64> {
    let mut t = Tape::new();
    let leaf = t.leaf(x.clone());
    let root = build(&mut t, leaf)?;
    let grads = t.backward(root);
    let analytic = grads.get(leaf).expect("input is a leaf");

    let value = |x: &ArrayD<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(x.clone());
        let root = build(&mut t, leaf)?;
        Ok(t.value(root)[IxDyn(&[])])
    };

    let mut pick = stream(seed, Stream::GradCheck);
    let mut worst = 0.0f64;
    let mut flat = x.clone();
    for _ in 0..SAMPLE_COORDS {
        let i = pick.gen_range(0..x.len());
        let orig = flat.as_slice_mut().expect("standard layout")[i];
        flat.as_slice_mut().unwrap()[i] = orig + FD_EPS_LOSS;
        let plus = value(&flat)?;
        flat.as_slice_mut().unwrap()[i] = orig - FD_EPS_LOSS;
        let minus = value(&flat)?;
        flat.as_slice_mut().unwrap()[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_EPS_LOSS);
        let a = analytic.as_slice().expect("standard layout")[i];
        worst = worst.max(rel_err(a, numeric));
    }
    Ok(worst)
}

/// Random `[B, K, D]` slots whose pairwise cosines all sit clear of the
/// hinge margin, so central differences cross no kink.
fn slots_off_the_kink(cfg: &LossConfig, seed: u64) -> ArrayD<f64> {
    'attempt: for attempt in 0.. {
        let mut r = indexed_stream(seed, Stream::GradCheck, attempt);
        let z = ArrayD::from_shape_fn(IxDyn(&[4, 5, 6]), |_| rng::normal(&mut r));
        for b in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    if i == j {
                        continue;
                    }
                    let zi: Vec<f64> = (0..6).map(|d| z[[b, i, d]]).collect();
                    let zj: Vec<f64> = (0..6).map(|d| z[[b, j, d]]).collect();
                    let dot: f64 = zi.iter().zip(&zj).map(|(a, b)| a * b).sum();
                    let ni = zi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nj = zj.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if (dot / (ni * nj) - cfg.margin).abs() < KINK_WIDTH {
                        continue 'attempt;
                    }
                }
            }
        }
        return z;
    }
    unreachable!("a clear slot draw always exists")
}

/// End-to-end check: perturb individual model parameters and compare the
/// finite-difference slope of `recon + cov(proj)` against the tape gradient.
///
/// The slot noise is replayed from a fixed stream inside every forward, so
/// the loss is a deterministic function of the parameters alone. Central
/// differences are valid only where the loss is smooth across the probe
/// window; coordinates whose estimate changes when the step is halved sit
/// on a ReLU fold and are redrawn.
fn check_end_to_end(seed: u64, rel_tol: f64) -> Result<f64> {
    let cfg = ModelConfig {
        image_size: 8,
        d_enc: 4,
        d_slots: 5,
        n_slots: 3,
        n_iters: 2,
        d_proj: 6,
        proj_hidden_layers: 1,
        d_dec: 4,
        seed,
        ..ModelConfig::default()
    };
    let mut model = SlotModel::new(cfg)?;
    // Freshly initialized biases are all zero, which parks every ReLU unit
    // whose receptive field is fully dead exactly on its kink; central
    // differences straddle the fold there and report half slopes. Jittering
    // every parameter moves the check to a point where the loss is smooth
    // within the probe radius.
    let mut jitter = indexed_stream(seed, Stream::GradCheck, 1);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        for x in model.params.get_mut(name).iter_mut() {
            *x += jitter.gen_range(-0.05..0.05);
        }
    }
    let loss_cfg = LossConfig::default();
    let mut data_rng = stream(seed, Stream::GradCheck);
    let images =
        ArrayD::from_shape_fn(IxDyn(&[2, 3, 8, 8]), |_| data_rng.gen_range(0.0..1.0));

    let loss_of = |params: &ParamSet| -> Result<f64> {
        let probe = SlotModel::from_parts(model.cfg.clone(), params.clone())?;
        let mut t = Tape::new();
        let p = probe.bind(&mut t, false);
        let x = t.constant(images.clone());
        let mut noise = indexed_stream(seed, Stream::SlotNoise, 0);
        let fwd = probe.forward_image(&mut t, &p, x, &mut noise)?;
        let recon = recon_loss(&mut t, x, fwd.recon)?;
        let proj = probe.project(&mut t, &p, fwd.slots);
        let cov = covariance_loss(&mut t, proj, &loss_cfg)?;
        let total = t.add(recon, cov);
        Ok(t.value(total)[IxDyn(&[])])
    };

    let mut t = Tape::new();
    let taped = model.bind(&mut t, true);
    let x = t.constant(images.clone());
    let mut noise = indexed_stream(seed, Stream::SlotNoise, 0);
    let fwd = model.forward_image(&mut t, &taped, x, &mut noise)?;
    let recon = recon_loss(&mut t, x, fwd.recon)?;
    let proj = model.project(&mut t, &taped, fwd.slots);
    let cov = covariance_loss(&mut t, proj, &loss_cfg)?;
    let total = t.add(recon, cov);
    let grads = t.backward(total);

    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut pick = stream(seed ^ 0x5eed, Stream::GradCheck);
    let mut worst = 0.0f64;
    let mut scored = 0usize;
    let mut attempts = 0usize;
    while scored < SAMPLE_COORDS {
        attempts += 1;
        if attempts > 8 * SAMPLE_COORDS {
            return Err(Error::numerical(
                "end-to-end gradient check could not find enough coordinates \
                 with a smooth probe window",
            ));
        }
        let name = &names[pick.gen_range(0..names.len())];
        let len = model.params.get(name).len();
        let i = pick.gen_range(0..len);
        let analytic = match grads.get(taped.var(name)) {
            Some(g) => g.as_slice().expect("standard layout")[i],
            None => 0.0,
        };

        let mut perturbed = model.params.clone();
        let orig = perturbed.get(name).as_slice().unwrap()[i];
        let mut fd = |eps: f64| -> Result<f64> {
            perturbed.get_mut(name).as_slice_mut().unwrap()[i] = orig + eps;
            let plus = loss_of(&perturbed)?;
            perturbed.get_mut(name).as_slice_mut().unwrap()[i] = orig - eps;
            let minus = loss_of(&perturbed)?;
            Ok((plus - minus) / (2.0 * eps))
        };
        let numeric = fd(FD_EPS_MODEL)?;
        let numeric_half = fd(FD_EPS_MODEL / 2.0)?;
        // A difference estimate is trusted only where halving the step
        // reproduces it; a ReLU fold inside the probe window breaks that
        // agreement and would otherwise read as a spurious mismatch.
        if rel_err(numeric, numeric_half) > rel_tol / 4.0 {
            continue;
        }
        worst = worst.max(rel_err(analytic, numeric));
        scored += 1;
    }
    Ok(worst)
}

/// Check one component's analytic gradient against central differences.
pub fn gradient_check(component: CheckComponent, rel_tol: f64, seed: u64) -> Result<GradCheckReport> {
    if !(rel_tol > 0.0) {
        return Err(Error::config(format!("rel_tol must be > 0, got {rel_tol}")));
    }
    let cfg = LossConfig::default();
    let mut r = stream(seed, Stream::GradCheck);
    let max_rel_err = match component {
        CheckComponent::VarianceLoss => {
            let z = ArrayD::from_shape_fn(IxDyn(&[4, 5, 6]), |_| rng::normal(&mut r));
            check_input_grad(&|t, v| variance_loss(t, v, &cfg), &z, seed)?
        }
        CheckComponent::CovarianceLoss => {
            let z = ArrayD::from_shape_fn(IxDyn(&[4, 5, 6]), |_| rng::normal(&mut r));
            check_input_grad(&|t, v| covariance_loss(t, v, &cfg), &z, seed)?
        }
        CheckComponent::CosineLoss => {
            let z = slots_off_the_kink(&cfg, seed);
            check_input_grad(&|t, v| cosine_loss(t, v, &cfg), &z, seed)?
        }
        CheckComponent::ReconLoss => {
            let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 6, 6]), |_| r.gen_range(0.0..1.0));
            let target = ArrayD::from_shape_fn(IxDyn(&[2, 3, 6, 6]), |_| r.gen_range(0.0..1.0));
            check_input_grad(
                &|t, v| {
                    let tgt = t.constant(target.clone());
                    recon_loss(t, tgt, v)
                },
                &x,
                seed,
            )?
        }
        CheckComponent::EndToEnd => check_end_to_end(seed, rel_tol)?,
    };
    Ok(GradCheckReport {
        component,
        max_rel_err,
        coords: SAMPLE_COORDS,
        rel_tol,
        pass: max_rel_err < rel_tol,
    })
}
