//! Object-feature probe: a one-hidden-layer MLP that reads a frozen slot
//! vector and predicts the generating object's shape, color, scale, and
//! position.  Predictions are matched to ground-truth objects per image by
//! minimizing the summed probe loss with the Hungarian algorithm.

use ndarray::{Array2, ArrayD, ArrayView1, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::Objective;
use crate::data::{Dataset, Split};
use crate::data::sprites::{ObjectFeature, SHAPE_COUNT};
use crate::error::{Error, Result};
use crate::model::SlotModel;
use crate::nn::{ParamSet, TapedParams};
use crate::optim::{Adam, OptimConfig};
use crate::rng::{indexed_stream, stream, Stream};
use crate::tape::{Tape, Var};
use rand::Rng;

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

/// Minimum-cost injective assignment of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[i]` is the column matched to row `i`; columns are distinct.
    pub assignment: Vec<usize>,
    /// Sum of the matched costs, accumulated in row order.
    pub total_cost: f64,
}

/// Solves min-cost assignment for an `[n, m]` cost matrix with `n <= m`.
///
/// Among all minimum-cost assignments the lexicographically smallest
/// assignment vector is returned, so ties resolve deterministically.
pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, m) = cost.dim();
    if n == 0 {
        return Ok(MatchResult { assignment: vec![], total_cost: 0.0 });
    }
    if n > m {
        return Err(Error::config(format!(
            "assignment needs at least as many columns as rows, got {n} rows and {m} columns"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::numerical("non-finite assignment cost"));
    }

    // A first optimal assignment fixes the target cost, then each row is
    // pinned to the smallest column that still admits an optimal completion.
    // Candidate totals are summed in row order, the same arithmetic a direct
    // enumeration would use, so comparisons are exact.
    let best = row_order_cost(cost, &jv_assign(cost));
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; m];
    let mut prefix = 0.0;
    for i in 0..n {
        let mut chosen = None;
        let mut chosen_total = f64::INFINITY;
        for j in 0..m {
            if used[j] {
                continue;
            }
            let rest = sub_matrix(cost, i + 1, &used, j);
            let tail = if rest.nrows() == 0 {
                0.0
            } else {
                row_order_cost(&rest, &jv_assign(&rest))
            };
            let total = prefix + cost[[i, j]] + tail;
            if total < chosen_total {
                chosen_total = total;
                chosen = Some(j);
            }
        }
        let j = chosen.expect("a feasible column always exists when n <= m");
        debug_assert!(chosen_total <= best + best.abs() * 1e-12 + 1e-12);
        prefix += cost[[i, j]];
        used[j] = true;
        fixed.push(j);
    }
    Ok(MatchResult { assignment: fixed, total_cost: prefix })
}

/// Shortest-augmenting-path assignment (Jonker-Volgenant style), returning
/// one optimal row-to-column map for an `[n, m]` matrix with `1 <= n <= m`.
fn jv_assign(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    // 1-based potentials; p[j] is the row matched to column j (0 = none).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Assignment cost summed in row order.
fn row_order_cost(cost: &Array2<f64>, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[[i, j]])
        .sum()
}

/// Rows `from..` and the unused columns, with column `extra` also removed.
fn sub_matrix(cost: &Array2<f64>, from: usize, used: &[bool], extra: usize) -> Array2<f64> {
    let (n, _) = cost.dim();
    let cols: Vec<usize> = (0..cost.ncols())
        .filter(|&j| !used[j] && j != extra)
        .collect();
    let mut out = Array2::zeros((n - from, cols.len()));
    for (ri, i) in (from..n).enumerate() {
        for (ci, &j) in cols.iter().enumerate() {
            out[[ri, ci]] = cost[[i, j]];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Probe network
// ---------------------------------------------------------------------------

/// Output layout: 3 shape logits, 3 color channels, then scale, x, y.
pub const PROBE_OUTPUTS: usize = SHAPE_COUNT + 3 + 3;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden_width: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_width: 256,
            lr: 1e-3,
            steps: 2000,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_width == 0 || self.batch_size == 0 {
            return Err(Error::config("probe hidden_width and batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("probe lr must be positive"));
        }
        Ok(())
    }
}

/// Fresh probe parameters: one hidden layer, independent of the slot model.
pub fn init_probe(d_slots: usize, cfg: &ProbeConfig) -> ParamSet {
    let mut rng = stream(cfg.seed, Stream::ProbeInit);
    let mut p = ParamSet::new();
    p.add_linear("probe.fc1", d_slots, cfg.hidden_width, &mut rng);
    p.add_linear("probe.fc2", cfg.hidden_width, PROBE_OUTPUTS, &mut rng);
    p
}

/// Taped probe forward: slot rows `[n, d_slots]` to predictions `[n, 9]`.
fn probe_forward(t: &mut Tape, p: &TapedParams, slots: Var) -> Var {
    let h = p.linear("probe.fc1").apply(t, slots);
    let h = t.relu(h);
    p.linear("probe.fc2").apply(t, h)
}

/// Plain probe forward for matching and scoring.
pub fn probe_forward_values(probe: &ParamSet, slots: &Array2<f64>) -> Array2<f64> {
    let w1 = probe.get("probe.fc1.w");
    let b1 = probe.get("probe.fc1.b");
    let w2 = probe.get("probe.fc2.w");
    let b2 = probe.get("probe.fc2.b");
    let w1 = w1.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let w2 = w2.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut h = slots.dot(&w1);
    for mut row in h.outer_iter_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x + b1[[j]]).max(0.0);
        }
    }
    let mut y = h.dot(&w2);
    for mut row in y.outer_iter_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x += b2[[j]];
        }
    }
    y
}

/// Probe loss for one (prediction, object) pair: cross-entropy on the shape
/// logits plus mean-squared error on color and squared error on scale, x, y.
/// The five terms are summed unweighted.
pub fn probe_loss_value(pred: ArrayView1<f64>, gt: &ObjectFeature) -> f64 {
    assert_eq!(pred.len(), PROBE_OUTPUTS);
    let logits = [pred[0], pred[1], pred[2]];
    let ce = cross_entropy(&logits, gt.shape.id());
    let mse_color = (0..3)
        .map(|c| (pred[3 + c] - gt.color[c]).powi(2))
        .sum::<f64>()
        / 3.0;
    let se_scale = (pred[6] - gt.scale).powi(2);
    let se_x = (pred[7] - gt.x).powi(2);
    let se_y = (pred[8] - gt.y).powi(2);
    ce + mse_color + se_scale + se_x + se_y
}

fn cross_entropy(logits: &[f64; 3], class: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// Taped twin of [`probe_loss_value`] for one prediction row `[9]`.
fn probe_loss_node(t: &mut Tape, pred: Var, gt: &ObjectFeature) -> Var {
    let logits = t.narrow(pred, 0, 0, SHAPE_COUNT);
    // The max shift is a constant: it stabilizes the log-sum-exp without
    // entering the gradient.
    let m = t
        .value(logits)
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let shifted = t.add_scalar(logits, -m);
    let e = t.exp(shifted);
    let s = t.sum_all(e);
    let ls = t.ln(s);
    let lse = t.add_scalar(ls, m);
    let l_class = t.narrow(pred, 0, gt.shape.id(), 1);
    let l_class = t.sum_all(l_class);
    let ce = t.sub(lse, l_class);

    let color = t.narrow(pred, 0, 3, 3);
    let gt_color = t.constant(ArrayD::from_shape_vec(IxDyn(&[3]), gt.color.to_vec()).unwrap());
    let dc = t.sub(color, gt_color);
    let dc2 = t.square(dc);
    let mse_color = t.mean_all(dc2);

    let mut loss = t.add(ce, mse_color);
    for (k, target) in [(6, gt.scale), (7, gt.x), (8, gt.y)] {
        let v = t.narrow(pred, 0, k, 1);
        let v = t.sum_all(v);
        let d = t.add_scalar(v, -target);
        let d2 = t.square(d);
        loss = t.add(loss, d2);
    }
    loss
}

// ---------------------------------------------------------------------------
// Slot extraction
// ---------------------------------------------------------------------------

const SLOT_BATCH: usize = 16;

/// Runs the frozen slot model over `indices` and returns one `[K, d_slots]`
/// array per sample.  Slot init noise comes from one eval stream, so the
/// result is deterministic for a fixed index order.
pub fn compute_slots(
    model: &SlotModel,
    dataset: &Dataset,
    objective: Objective,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<Array2<f64>>> {
    let mut rng = stream(seed, Stream::EvalNoise);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(SLOT_BATCH) {
        let mut t = Tape::new();
        let p = model.bind(&mut t, false);
        let slots = match objective {
            Objective::ImageRecon => {
                let images = dataset.load_image_batch(chunk)?;
                let images = t.constant(images);
                let feats = model.encode(&mut t, &p, images)?;
                let s0 = model.init_slots(&mut t, &p, chunk.len(), &mut rng);
                let (slots, _) = model.slot_attention(&mut t, &p, feats, s0)?;
                slots
            }
            Objective::FeatureRecon => {
                let batch = crate::data::frozen::feature_batch(dataset, chunk)?;
                let feats = t.constant(batch);
                let adapted = model.adapt_features(&mut t, &p, feats)?;
                let s0 = model.init_slots(&mut t, &p, chunk.len(), &mut rng);
                let (slots, _) = model.slot_attention(&mut t, &p, adapted, s0)?;
                slots
            }
        };
        let v = t.value(slots);
        for b in 0..chunk.len() {
            let one = v.index_axis(ndarray::Axis(0), b).to_owned();
            out.push(one.into_dimensionality::<ndarray::Ix2>().unwrap());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training and scoring
// ---------------------------------------------------------------------------

pub struct ProbeOutcome {
    pub params: ParamSet,
    /// Matched probe loss per step.
    pub losses: Vec<f64>,
    /// Samples excluded because they hold more objects than slots.
    pub skipped: usize,
}

/// Trains the probe on frozen slots from the train split.
///
/// The slot model is never taped here: its slots are computed once up front,
/// so no gradient can reach it and its parameters are bitwise untouched.
pub fn train_probe(
    model: &SlotModel,
    dataset: &Dataset,
    objective: Objective,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    let range = dataset.manifest.split_range(Split::Train);
    let indices: Vec<usize> = range.collect();
    let slots = compute_slots(model, dataset, objective, &indices, cfg.seed)?;
    let k = model.cfg.n_slots;

    let mut pool: Vec<(Array2<f64>, Vec<ObjectFeature>)> = Vec::new();
    let mut skipped = 0usize;
    for (slot, &idx) in slots.into_iter().zip(&indices) {
        let objects = dataset.load_objects(idx)?;
        if objects.is_empty() || objects.len() > k {
            skipped += 1;
            continue;
        }
        pool.push((slot, objects));
    }
    if pool.is_empty() {
        return Err(Error::config(
            "no trainable samples: every image holds more objects than slots",
        ));
    }

    let mut params = init_probe(model.cfg.d_slots, cfg);
    let opt_cfg = OptimConfig {
        lr: cfg.lr,
        warmup_steps: 0,
        decay_half_life: 0,
    };
    let mut adam = Adam::new(&params, opt_cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut order = indexed_stream(cfg.seed, Stream::BatchOrder, step as u64);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| order.gen_range(0..pool.len()))
            .collect();

        let mut t = Tape::new();
        let taped = TapedParams::leaves(&mut t, &params);
        let mut pair_losses: Vec<Var> = Vec::new();
        for &bi in &batch {
            let (slot, objects) = &pool[bi];
            let slots_v = t.constant(slot.clone().into_dyn());
            let preds = probe_forward(&mut t, &taped, slots_v);
            let pred_vals = t.value(preds).clone();
            let mut cost = Array2::zeros((objects.len(), k));
            for (i, obj) in objects.iter().enumerate() {
                for j in 0..k {
                    let row = pred_vals.index_axis(ndarray::Axis(0), j);
                    cost[[i, j]] =
                        probe_loss_value(row.view().into_dimensionality().unwrap(), obj);
                }
            }
            let matched = hungarian(&cost)?;
            for (i, &j) in matched.assignment.iter().enumerate() {
                let pred_row = t.narrow(preds, 0, j, 1);
                let pred_row = t.reshape(pred_row, &[PROBE_OUTPUTS]);
                let l = probe_loss_node(&mut t, pred_row, &objects[i]);
                pair_losses.push(l);
            }
        }
        let mut total = pair_losses[0];
        for &l in &pair_losses[1..] {
            total = t.add(total, l);
        }
        let total = t.scale(total, 1.0 / pair_losses.len() as f64);
        losses.push(t.value(total)[[]]);
        let grads = t.backward(total);
        adam.step(&mut params, &taped, &grads);
    }
    Ok(ProbeOutcome { params, losses, skipped })
}

/// Probe quality on a dataset split, matched exactly as in training.
#[derive(Clone, Debug)]
pub struct ProbeScore {
    pub shape_acc: f64,
    pub color_r2: Option<f64>,
    pub scale_r2: Option<f64>,
    pub x_r2: Option<f64>,
    pub y_r2: Option<f64>,
    pub matched: usize,
    pub skipped: usize,
}

pub fn score_probe(
    probe: &ParamSet,
    model: &SlotModel,
    dataset: &Dataset,
    objective: Objective,
    split: Split,
    seed: u64,
) -> Result<ProbeScore> {
    let indices: Vec<usize> = dataset.manifest.split_range(split).collect();
    let slots = compute_slots(model, dataset, objective, &indices, seed)?;
    let k = model.cfg.n_slots;

    let mut skipped = 0usize;
    let mut correct = 0usize;
    let mut matched = 0usize;
    // (prediction, ground truth) pairs per continuous feature.
    let mut color: Vec<(f64, f64)> = Vec::new();
    let mut scale: Vec<(f64, f64)> = Vec::new();
    let mut xs: Vec<(f64, f64)> = Vec::new();
    let mut ys: Vec<(f64, f64)> = Vec::new();

    for (slot, &idx) in slots.iter().zip(&indices) {
        let objects = dataset.load_objects(idx)?;
        if objects.is_empty() || objects.len() > k {
            skipped += 1;
            continue;
        }
        let preds = probe_forward_values(probe, slot);
        let mut cost = Array2::zeros((objects.len(), k));
        for (i, obj) in objects.iter().enumerate() {
            for j in 0..k {
                cost[[i, j]] = probe_loss_value(preds.row(j), obj);
            }
        }
        let result = hungarian(&cost)?;
        for (i, &j) in result.assignment.iter().enumerate() {
            let gt = &objects[i];
            let row = preds.row(j);
            let pred_class = (0..SHAPE_COUNT)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            if pred_class == gt.shape.id() {
                correct += 1;
            }
            for c in 0..3 {
                color.push((row[3 + c], gt.color[c]));
            }
            scale.push((row[6], gt.scale));
            xs.push((row[7], gt.x));
            ys.push((row[8], gt.y));
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(Error::config("no matchable samples in the scored split"));
    }

    // Color aggregates as the mean over the three per-channel R² values.
    let color_r2 = {
        let per: Vec<Option<f64>> = (0..3)
            .map(|c| {
                let channel: Vec<(f64, f64)> =
                    color.iter().skip(c).step_by(3).cloned().collect();
                r_squared(&channel)
            })
            .collect();
        if per.iter().any(|r| r.is_none()) {
            None
        } else {
            Some(per.iter().map(|r| r.unwrap()).sum::<f64>() / 3.0)
        }
    };

    Ok(ProbeScore {
        shape_acc: correct as f64 / matched as f64,
        color_r2,
        scale_r2: r_squared(&scale),
        x_r2: r_squared(&xs),
        y_r2: r_squared(&ys),
        matched,
        skipped,
    })
}

/// Coefficient of determination over (prediction, truth) pairs; `None` when
/// the ground truth has zero variance.
pub fn r_squared(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|(_, gt)| gt).sum::<f64>() / n;
    let ss_tot: f64 = pairs.iter().map(|(_, gt)| (gt - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = pairs.iter().map(|(p, gt)| (gt - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}
