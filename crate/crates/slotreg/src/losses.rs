//! Training objectives: reconstruction, variance and covariance penalties on
//! projected slots, cosine repulsion on raw slots, and their mode-dependent
//! composites.
//!
//! Each loss exists twice: as a tape builder used during training, and as a
//! plain-array evaluation used for logging and as an independent check in
//! tests. The two must agree to floating-point roundoff.

use crate::error::{Error, Result};
use crate::tape::{Arr, Tape, Var};
use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "covLoss")]
    CovLoss,
    #[serde(rename = "vicreg_full")]
    VicregFull,
    #[serde(rename = "cosineLoss")]
    CosineLoss,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::CovLoss => "covLoss",
            Mode::VicregFull => "vicreg_full",
            Mode::CosineLoss => "cosineLoss",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "covLoss" => Ok(Mode::CovLoss),
            "vicreg_full" => Ok(Mode::VicregFull),
            "cosineLoss" => Ok(Mode::CosineLoss),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (expected baseline, covLoss, vicreg_full or cosineLoss)"
            ))),
        }
    }

    /// Whether the mode's regularizer reads projections (as opposed to raw
    /// slots, or nothing at all).
    pub fn uses_projection(&self) -> bool {
        matches!(self, Mode::CovLoss | Mode::VicregFull)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSampleAxis {
    /// Pool all B·K slots of the batch as samples.
    BatchSlotsFlat,
    /// Compute per image over its K slots, then average over the batch.
    PerImageSlots,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Target standard deviation in the variance hinge.
    pub gamma: f64,
    /// Stabilizer added to the variance before the square root.
    pub eps: f64,
    /// Regularizer weight.
    pub beta: f64,
    /// Cosine hinge margin.
    pub margin: f64,
    pub use_variance_term: bool,
    pub cov_sample_axis: CovSampleAxis,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 1.0,
            eps: 1e-4,
            beta: 1.0,
            margin: 0.2,
            use_variance_term: false,
            cov_sample_axis: CovSampleAxis::BatchSlotsFlat,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be > 0, got {}", self.eps)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::config(format!(
                "margin must be in [0,1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Scalar summary of one training step, for the run log.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub recon: f64,
    pub variance: f64,
    pub covariance: f64,
    pub cosine: f64,
    pub total: f64,
}

/// Norm floor for the cosine loss; keeps a zero slot from producing NaN.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

// ---- tape builders ----

/// Mean squared error over all elements.
pub fn recon_loss(t: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    if t.shape(x) != t.shape(x_hat) {
        return Err(Error::shape(t.shape(x_hat), t.shape(x), "recon_loss"));
    }
    let d = t.sub(x, x_hat);
    let sq = t.square(d);
    Ok(t.mean_all(sq))
}

/// Variance hinge over a sample matrix `[n, d]`: per dimension
/// `max(0, gamma - sqrt(Var + eps))`, averaged over dimensions. Var uses the
/// unbiased `n-1` divisor.
pub fn variance_loss_samples(t: &mut Tape, z: Var, cfg: &LossConfig) -> Result<Var> {
    let shape = t.shape(z);
    if shape.len() != 2 {
        return Err(Error::shape(&[0, 0], shape, "variance_loss sample matrix"));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::config(format!(
            "variance_loss needs at least 2 samples, got {n}"
        )));
    }
    let m = t.mean_axis(z, 0, true);
    let c = t.sub(z, m);
    let sq = t.square(c);
    let ssum = t.sum_axis(sq, 0, false);
    let var = t.scale(ssum, 1.0 / (n - 1) as f64);
    let var = t.add_scalar(var, cfg.eps);
    let std = t.sqrt(var);
    let neg = t.scale(std, -1.0);
    let gap = t.add_scalar(neg, cfg.gamma);
    let hinge = t.relu(gap);
    Ok(t.mean_all(hinge))
}

/// Covariance penalty over a sample matrix `[n, d]`: centered covariance with
/// the `n-1` divisor, squared off-diagonal entries summed and divided by `d`.
pub fn covariance_loss_samples(t: &mut Tape, z: Var, cfg: &LossConfig) -> Result<Var> {
    let _ = cfg;
    let shape = t.shape(z);
    if shape.len() != 2 {
        return Err(Error::shape(&[0, 0], shape, "covariance_loss sample matrix"));
    }
    let (n, d) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::config(format!(
            "covariance_loss needs at least 2 samples, got {n}"
        )));
    }
    let m = t.mean_axis(z, 0, true);
    let c = t.sub(z, m);
    let ct = t.permute(c, &[1, 0]);
    let cov = t.matmul(ct, c);
    let cov = t.scale(cov, 1.0 / (n - 1) as f64);
    let sq = t.square(cov);
    let mask = t.constant(off_diagonal_mask(d));
    let off = t.mul(sq, mask);
    let s = t.sum_all(off);
    Ok(t.scale(s, 1.0 / d as f64))
}

/// Apply a per-sample-matrix loss to a `[B, K, D]` projection tensor under
/// the configured sample pooling.
fn pooled_loss(
    t: &mut Tape,
    z: Var,
    cfg: &LossConfig,
    f: &dyn Fn(&mut Tape, Var, &LossConfig) -> Result<Var>,
) -> Result<Var> {
    let shape = t.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(&[0, 0, 0], &shape, "projection tensor"));
    }
    let (b, k, d) = (shape[0], shape[1], shape[2]);
    match cfg.cov_sample_axis {
        CovSampleAxis::BatchSlotsFlat => {
            let flat = t.reshape(z, &[b * k, d]);
            f(t, flat, cfg)
        }
        CovSampleAxis::PerImageSlots => {
            let mut acc: Option<Var> = None;
            for i in 0..b {
                let zi = t.narrow(z, 0, i, 1);
                let zi = t.reshape(zi, &[k, d]);
                let li = f(t, zi, cfg)?;
                acc = Some(match acc {
                    None => li,
                    Some(a) => t.add(a, li),
                });
            }
            let sum = acc.ok_or_else(|| Error::config("empty batch"))?;
            Ok(t.scale(sum, 1.0 / b as f64))
        }
    }
}

pub fn variance_loss(t: &mut Tape, z: Var, cfg: &LossConfig) -> Result<Var> {
    pooled_loss(t, z, cfg, &variance_loss_samples)
}

pub fn covariance_loss(t: &mut Tape, z: Var, cfg: &LossConfig) -> Result<Var> {
    pooled_loss(t, z, cfg, &covariance_loss_samples)
}

/// Cosine repulsion over slots `[B, K, D]`: for each image, sum over ordered
/// pairs i != j of `max(0, cos(z_i, z_j) - margin)`, then average over the
/// batch. Operates on raw slots; callers must not pass projections.
pub fn cosine_loss(t: &mut Tape, slots: Var, cfg: &LossConfig) -> Result<Var> {
    let shape = t.shape(slots).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(&[0, 0, 0], &shape, "slot tensor"));
    }
    let (b, k, _d) = (shape[0], shape[1], shape[2]);
    let sq = t.square(slots);
    let ssum = t.sum_axis(sq, 2, true);
    // clamp before the sqrt: a zero slot would otherwise meet an infinite
    // sqrt-gradient on the blocked branch and turn it into NaN
    let ssum = t.clamp_min(ssum, COSINE_NORM_FLOOR * COSINE_NORM_FLOOR);
    let norm = t.sqrt(ssum);
    let unit = t.div(slots, norm);
    let unit_t = t.permute(unit, &[0, 2, 1]);
    let gram = t.bmm(unit, unit_t);
    let shifted = t.add_scalar(gram, -cfg.margin);
    let hinged = t.relu(shifted);
    let mask = t.constant(off_diagonal_mask(k));
    let off = t.mul(hinged, mask);
    let s = t.sum_all(off);
    Ok(t.scale(s, 1.0 / b as f64))
}

/// Loss terms available for composition; absent terms were not built on the
/// tape this step.
#[derive(Clone, Copy, Default)]
pub struct LossTerms {
    pub recon: Option<Var>,
    pub variance: Option<Var>,
    pub covariance: Option<Var>,
    pub cosine: Option<Var>,
}

/// Compose the mode's total objective. With beta = 0 the total IS the recon
/// node: no regularizer enters the graph, so a beta = 0 run of any mode is
/// structurally identical to baseline.
pub fn total_loss(t: &mut Tape, terms: &LossTerms, mode: Mode, cfg: &LossConfig) -> Result<Var> {
    let recon = terms
        .recon
        .ok_or_else(|| Error::config("total_loss: recon term missing"))?;
    if cfg.beta == 0.0 {
        return Ok(recon);
    }
    let reg = match mode {
        Mode::Baseline => return Ok(recon),
        Mode::CovLoss => {
            let c = terms
                .covariance
                .ok_or_else(|| Error::config("covLoss mode needs a covariance term"))?;
            if cfg.use_variance_term {
                let v = terms
                    .variance
                    .ok_or_else(|| Error::config("use_variance_term needs a variance term"))?;
                t.add(v, c)
            } else {
                c
            }
        }
        Mode::VicregFull => {
            let v = terms
                .variance
                .ok_or_else(|| Error::config("vicreg_full mode needs a variance term"))?;
            let c = terms
                .covariance
                .ok_or_else(|| Error::config("vicreg_full mode needs a covariance term"))?;
            t.add(v, c)
        }
        Mode::CosineLoss => terms
            .cosine
            .ok_or_else(|| Error::config("cosineLoss mode needs a cosine term"))?,
    };
    let weighted = t.scale(reg, cfg.beta);
    Ok(t.add(recon, weighted))
}

// ---- plain-array evaluations ----

pub fn recon_mse(x: &Arr, x_hat: &Arr) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(x_hat.shape(), x.shape(), "recon_mse"));
    }
    let n = x.len() as f64;
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(x_hat.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / n)
}

pub fn variance_value(z: &Array2<f64>, cfg: &LossConfig) -> Result<f64> {
    let (n, d) = z.dim();
    if n < 2 {
        return Err(Error::config(format!(
            "variance_value needs at least 2 samples, got {n}"
        )));
    }
    let mut total = 0.0;
    for j in 0..d {
        let col = z.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        total += (cfg.gamma - (var + cfg.eps).sqrt()).max(0.0);
    }
    Ok(total / d as f64)
}

pub fn covariance_value(z: &Array2<f64>) -> Result<f64> {
    let (n, d) = z.dim();
    if n < 2 {
        return Err(Error::config(format!(
            "covariance_value needs at least 2 samples, got {n}"
        )));
    }
    let mean = z.sum_axis(Axis(0)) / n as f64;
    let centered = z - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                acc += cov[[i, j]] * cov[[i, j]];
            }
        }
    }
    Ok(acc / d as f64)
}

/// Pool a `[B, K, D]` tensor and evaluate one of the sample-matrix losses.
fn pooled_value(
    z: &ArrayD<f64>,
    axis: CovSampleAxis,
    f: &dyn Fn(&Array2<f64>) -> Result<f64>,
) -> Result<f64> {
    let z3 = z
        .view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(&[0, 0, 0], z.shape(), "projection tensor"))?;
    let (b, k, d) = z3.dim();
    match axis {
        CovSampleAxis::BatchSlotsFlat => {
            let flat = z3
                .to_owned()
                .into_shape_with_order((b * k, d))
                .expect("flatten");
            f(&flat)
        }
        CovSampleAxis::PerImageSlots => {
            let mut acc = 0.0;
            for i in 0..b {
                let zi = z3.index_axis(Axis(0), i).to_owned();
                acc += f(&zi)?;
            }
            Ok(acc / b as f64)
        }
    }
}

pub fn variance_value_pooled(z: &ArrayD<f64>, cfg: &LossConfig) -> Result<f64> {
    pooled_value(z, cfg.cov_sample_axis, &|m| variance_value(m, cfg))
}

pub fn covariance_value_pooled(z: &ArrayD<f64>, cfg: &LossConfig) -> Result<f64> {
    pooled_value(z, cfg.cov_sample_axis, &covariance_value)
}

pub fn cosine_value(slots: &ArrayD<f64>, cfg: &LossConfig) -> Result<f64> {
    let s3 = slots
        .view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(&[0, 0, 0], slots.shape(), "slot tensor"))?;
    let (b, k, d) = s3.dim();
    let mut total = 0.0;
    for bi in 0..b {
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let mut dot = 0.0;
                let mut ni = 0.0;
                let mut nj = 0.0;
                for c in 0..d {
                    let a = s3[[bi, i, c]];
                    let bb = s3[[bi, j, c]];
                    dot += a * bb;
                    ni += a * a;
                    nj += bb * bb;
                }
                let cos = dot / (ni.sqrt().max(COSINE_NORM_FLOOR) * nj.sqrt().max(COSINE_NORM_FLOOR));
                total += (cos - cfg.margin).max(0.0);
            }
        }
    }
    Ok(total / b as f64)
}

fn off_diagonal_mask(d: usize) -> Arr {
    let mut m = ArrayD::ones(IxDyn(&[d, d]));
    let mut m2 = m.view_mut().into_dimensionality::<Ix2>().unwrap();
    for i in 0..d {
        m2[[i, i]] = 0.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::{arr2, arr3};
    use rand::Rng;

    fn eval_tape(f: &dyn Fn(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = f(&mut t).unwrap();
        t.value(v)[IxDyn(&[])]
    }

    #[test]
    fn recon_zero_when_equal_and_quarter_on_half_offset() {
        let x = ArrayD::from_elem(IxDyn(&[2, 2]), 0.0);
        let xh = ArrayD::from_elem(IxDyn(&[2, 2]), 0.5);
        assert_eq!(recon_mse(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_mse(&x, &xh).unwrap(), 0.25);
        let on_tape = eval_tape(&|t| {
            let a = t.constant(x.clone());
            let b = t.constant(xh.clone());
            recon_loss(t, a, b)
        });
        assert_eq!(on_tape, 0.25);
    }

    #[test]
    fn recon_is_symmetric() {
        let mut rng = stream(40, Stream::GradCheck);
        let a = ArrayD::from_shape_fn(IxDyn(&[3, 5]), |_| rng.gen_range(-1.0..1.0));
        let b = ArrayD::from_shape_fn(IxDyn(&[3, 5]), |_| rng.gen_range(-1.0..1.0));
        let ab = recon_mse(&a, &b).unwrap();
        let ba = recon_mse(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn recon_rejects_shape_mismatch() {
        let a = ArrayD::zeros(IxDyn(&[2, 3]));
        let b = ArrayD::zeros(IxDyn(&[3, 2]));
        assert!(recon_mse(&a, &b).is_err());
    }

    #[test]
    fn variance_identical_samples_hits_hinge_ceiling() {
        // Var = 0 everywhere: per-dim value is gamma - sqrt(eps) = 1 - 0.01
        let cfg = LossConfig::default();
        let z = Array2::from_elem((4, 3), 0.7);
        let v = variance_value(&z, &cfg).unwrap();
        assert!((v - 0.99).abs() < 1e-12, "{v}");
        let zd = z.clone().into_dyn();
        let on_tape = eval_tape(&|t| {
            let zv = t.constant(zd.clone());
            variance_loss_samples(t, zv, &cfg)
        });
        assert!((on_tape - 0.99).abs() < 1e-12);
    }

    #[test]
    fn variance_saturated_hinge_is_zero() {
        // two samples {0, 2}: unbiased Var = 2, std > gamma
        let cfg = LossConfig::default();
        let z = arr2(&[[0.0, 0.0], [2.0, 2.0]]);
        assert_eq!(variance_value(&z, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn variance_is_translation_invariant() {
        let cfg = LossConfig::default();
        let mut rng = stream(41, Stream::GradCheck);
        let z = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
        let shifted = &z + 3.25;
        let a = variance_value(&z, &cfg).unwrap();
        let b = variance_value(&shifted, &cfg).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn variance_rejects_single_sample() {
        let cfg = LossConfig::default();
        let z = Array2::zeros((1, 4));
        assert!(variance_value(&z, &cfg).is_err());
        let mut t = Tape::new();
        let zv = t.constant(z.into_dyn());
        assert!(variance_loss_samples(&mut t, zv, &cfg).is_err());
    }

    #[test]
    fn covariance_hand_value() {
        // rows are samples; off-diagonal covariance is 0.5 each
        let z = arr2(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]);
        let c = covariance_value(&z).unwrap();
        assert!((c - 0.25).abs() < 1e-12, "{c}");
        let cfg = LossConfig::default();
        let zd = z.into_dyn();
        let on_tape = eval_tape(&|t| {
            let zv = t.constant(zd.clone());
            covariance_loss_samples(t, zv, &cfg)
        });
        assert!((on_tape - 0.25).abs() < 1e-12);
    }

    #[test]
    fn covariance_zero_for_decorrelated_columns() {
        // columns vary independently with opposite pairings canceling
        let z = arr2(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        let c = covariance_value(&z).unwrap();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn covariance_is_quartic_under_scaling() {
        let mut rng = stream(42, Stream::GradCheck);
        let z = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let c1 = covariance_value(&z).unwrap();
        let c2 = covariance_value(&(&z * 2.0)).unwrap();
        assert!((c2 - 16.0 * c1).abs() < 1e-9 * c1.abs().max(1.0));
    }

    #[test]
    fn covariance_is_centering_invariant() {
        let mut rng = stream(43, Stream::GradCheck);
        let z = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0));
        let shifted = &z + 2.75;
        let a = covariance_value(&z).unwrap();
        let b = covariance_value(&shifted).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn cosine_orthogonal_slots_cost_nothing() {
        let cfg = LossConfig::default();
        let slots = arr3(&[[[1.0, 0.0], [0.0, 1.0]]]).into_dyn();
        assert_eq!(cosine_value(&slots, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn cosine_identical_slots_hand_values() {
        let cfg = LossConfig::default();
        // 2 identical slots: (1 - 0.2) per ordered pair, 2 pairs
        let s2 = arr3(&[[[0.5, 0.5], [0.5, 0.5]]]).into_dyn();
        let v2 = cosine_value(&s2, &cfg).unwrap();
        assert!((v2 - 1.6).abs() < 1e-12, "{v2}");
        // 4 identical slots: 0.8 * 4 * 3
        let s4 = ArrayD::from_elem(IxDyn(&[1, 4, 3]), 0.3);
        let v4 = cosine_value(&s4, &cfg).unwrap();
        assert!((v4 - 9.6).abs() < 1e-12, "{v4}");
        let on_tape = eval_tape(&|t| {
            let sv = t.constant(s4.clone());
            cosine_loss(t, sv, &cfg)
        });
        assert!((on_tape - 9.6).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_scale_invariant_per_slot() {
        let cfg = LossConfig::default();
        let mut rng = stream(44, Stream::GradCheck);
        let slots = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0));
        let mut scaled = slots.clone();
        for b in 0..2 {
            for k in 0..3 {
                let f = 0.5 + (b * 3 + k) as f64;
                for d in 0..4 {
                    scaled[IxDyn(&[b, k, d])] *= f;
                }
            }
        }
        let a = cosine_value(&slots, &cfg).unwrap();
        let b = cosine_value(&scaled, &cfg).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn cosine_zero_norm_slot_stays_finite() {
        let cfg = LossConfig::default();
        let slots = arr3(&[[[0.0, 0.0], [1.0, 0.0]]]).into_dyn();
        let v = cosine_value(&slots, &cfg).unwrap();
        assert!(v.is_finite());
        let mut t = Tape::new();
        let sv = t.leaf(slots.clone());
        let l = cosine_loss(&mut t, sv, &cfg).unwrap();
        assert!(t.value(l)[IxDyn(&[])].is_finite());
        let grads = t.backward(l);
        for g in grads.get(sv).unwrap().iter() {
            assert!(g.is_finite());
        }
    }

    #[test]
    fn tape_and_plain_losses_agree_on_random_input() {
        let cfg = LossConfig::default();
        let mut rng = stream(45, Stream::GradCheck);
        let z = ArrayD::from_shape_fn(IxDyn(&[3, 4, 5]), |_| rng.gen_range(-2.0..2.0));
        for axis in [CovSampleAxis::BatchSlotsFlat, CovSampleAxis::PerImageSlots] {
            let cfg = LossConfig { cov_sample_axis: axis, ..cfg };
            let vv = variance_value_pooled(&z, &cfg).unwrap();
            let cv = covariance_value_pooled(&z, &cfg).unwrap();
            let vt = eval_tape(&|t| {
                let zv = t.constant(z.clone());
                variance_loss(t, zv, &cfg)
            });
            let ct = eval_tape(&|t| {
                let zv = t.constant(z.clone());
                covariance_loss(t, zv, &cfg)
            });
            assert!((vv - vt).abs() < 1e-12, "{vv} vs {vt}");
            assert!((cv - ct).abs() < 1e-12, "{cv} vs {ct}");
        }
        let cos_plain = cosine_value(&z, &cfg).unwrap();
        let cos_tape = eval_tape(&|t| {
            let zv = t.constant(z.clone());
            cosine_loss(t, zv, &cfg)
        });
        assert!((cos_plain - cos_tape).abs() < 1e-12);
    }

    #[test]
    fn total_loss_mode_algebra() {
        let cfg = LossConfig { beta: 2.0, ..LossConfig::default() };
        let mut t = Tape::new();
        let recon = t.constant(ArrayD::from_elem(IxDyn(&[]), 0.1));
        let cov = t.constant(ArrayD::from_elem(IxDyn(&[]), 0.25));
        let var = t.constant(ArrayD::from_elem(IxDyn(&[]), 0.99));
        let zero = t.constant(ArrayD::from_elem(IxDyn(&[]), 0.0));
        let terms = LossTerms {
            recon: Some(recon),
            covariance: Some(cov),
            variance: Some(var),
            cosine: None,
        };
        let total = total_loss(&mut t, &terms, Mode::CovLoss, &cfg).unwrap();
        assert!((t.value(total)[IxDyn(&[])] - 0.6).abs() < 1e-12);

        let vic_terms = LossTerms {
            recon: Some(zero),
            variance: Some(var),
            covariance: Some(zero),
            cosine: None,
        };
        let vic_cfg = LossConfig { beta: 1.0, ..cfg };
        let total = total_loss(&mut t, &vic_terms, Mode::VicregFull, &vic_cfg).unwrap();
        assert!((t.value(total)[IxDyn(&[])] - 0.99).abs() < 1e-12);

        // beta = 0 returns the recon node itself in every mode
        let zero_beta = LossConfig { beta: 0.0, ..cfg };
        for mode in [Mode::Baseline, Mode::CovLoss, Mode::VicregFull, Mode::CosineLoss] {
            let total = total_loss(&mut t, &terms, mode, &zero_beta).unwrap();
            assert_eq!(total, recon);
        }

        // missing parts are an error, not a silent zero
        let bare = LossTerms { recon: Some(recon), ..Default::default() };
        assert!(total_loss(&mut t, &bare, Mode::CovLoss, &cfg).is_err());
        assert!(total_loss(&mut t, &bare, Mode::CosineLoss, &cfg).is_err());

        // use_variance_term folds the variance hinge into covLoss
        let with_var = LossConfig { use_variance_term: true, ..cfg };
        let total = total_loss(&mut t, &terms, Mode::CovLoss, &with_var).unwrap();
        assert!((t.value(total)[IxDyn(&[])] - (0.1 + 2.0 * (0.99 + 0.25))).abs() < 1e-12);
        let no_var = LossTerms { variance: None, ..terms };
        assert!(total_loss(&mut t, &no_var, Mode::CovLoss, &with_var).is_err());
    }

    #[test]
    fn loss_gradchecks() {
        let cfg = LossConfig::default();
        let mut rng = stream(46, Stream::GradCheck);
        let z = ArrayD::from_shape_fn(IxDyn(&[6, 5]), |_| rng.gen_range(-1.0..1.0));
        let s = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0));

        let check = |build: &dyn Fn(&mut Tape, Var) -> Var, x: &Arr, tol: f64| {
            let f = |xv: &Arr| {
                let mut t = Tape::new();
                let v = t.leaf(xv.clone());
                let y = build(&mut t, v);
                t.value(y)[IxDyn(&[])]
            };
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let y = build(&mut t, v);
            let grads = t.backward(y);
            let analytic = grads.get(v).unwrap();
            let eps = 1e-6;
            let xs: Vec<f64> = x.iter().cloned().collect();
            for i in 0..xs.len() {
                let mut plus = xs.clone();
                let mut minus = xs.clone();
                plus[i] += eps;
                minus[i] -= eps;
                let fp = f(&ArrayD::from_shape_vec(x.raw_dim(), plus).unwrap());
                let fm = f(&ArrayD::from_shape_vec(x.raw_dim(), minus).unwrap());
                let n = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[i];
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < tol, "idx {i}: {a} vs {n}");
            }
        };

        check(&|t, v| variance_loss_samples(t, v, &cfg).unwrap(), &z, 1e-5);
        check(&|t, v| covariance_loss_samples(t, v, &cfg).unwrap(), &z, 1e-5);
        check(&|t, v| cosine_loss(t, v, &cfg).unwrap(), &s, 1e-5);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = LossConfig::default();
        assert!(ok.validate().is_ok());
        assert!(LossConfig { gamma: 0.0, ..ok }.validate().is_err());
        assert!(LossConfig { eps: 0.0, ..ok }.validate().is_err());
        assert!(LossConfig { beta: -0.1, ..ok }.validate().is_err());
        assert!(LossConfig { margin: 1.0, ..ok }.validate().is_err());
        assert!(LossConfig { margin: -0.2, ..ok }.validate().is_err());
    }

    #[test]
    fn mode_strings_round_trip() {
        for mode in [Mode::Baseline, Mode::CovLoss, Mode::VicregFull, Mode::CosineLoss] {
            assert_eq!(Mode::parse(mode.as_str()).unwrap(), mode);
        }
        assert!(Mode::parse("covloss").is_err());
    }
}
