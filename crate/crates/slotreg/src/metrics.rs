//! Clustering agreement metrics over segmentation label maps.

use crate::error::{Error, Result};
use ndarray::{Array3, ArrayD, Ix4};
use std::collections::BTreeMap;

/// Contingency table between two labelings of the same points.
pub struct Contingency {
    pub counts: Vec<Vec<i64>>,
    pub row_sums: Vec<i64>,
    pub col_sums: Vec<i64>,
    pub n: i64,
}

impl Contingency {
    pub fn build(a: &[u32], b: &[u32]) -> Result<Contingency> {
        if a.len() != b.len() {
            return Err(Error::config(format!(
                "label slices differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        // compact arbitrary label values to dense indices, in sorted order
        let mut amap = BTreeMap::new();
        let mut bmap = BTreeMap::new();
        for &x in a {
            let next = amap.len();
            amap.entry(x).or_insert(next);
        }
        for &x in b {
            let next = bmap.len();
            bmap.entry(x).or_insert(next);
        }
        let mut counts = vec![vec![0i64; bmap.len()]; amap.len()];
        for (&x, &y) in a.iter().zip(b.iter()) {
            counts[amap[&x]][bmap[&y]] += 1;
        }
        let row_sums: Vec<i64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<i64> = (0..bmap.len())
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        Ok(Contingency {
            counts,
            row_sums,
            col_sums,
            n: a.len() as i64,
        })
    }
}

fn choose2(n: i64) -> i64 {
    n * (n - 1) / 2
}

/// Adjusted Rand Index between two labelings. Degenerate cases where the
/// expected index equals the maximum index (for instance both sides one
/// cluster) count as perfect agreement.
pub fn ari(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() < 2 {
        return Err(Error::config(format!(
            "ari needs at least 2 points, got {}",
            a.len()
        )));
    }
    let c = Contingency::build(a, b)?;
    let index: i64 = c
        .counts
        .iter()
        .flat_map(|r| r.iter())
        .map(|&v| choose2(v))
        .sum();
    let sum_a: i64 = c.row_sums.iter().map(|&v| choose2(v)).sum();
    let sum_b: i64 = c.col_sums.iter().map(|&v| choose2(v)).sum();
    let total = choose2(c.n) as f64;
    let expected = sum_a as f64 * sum_b as f64 / total;
    let max_index = 0.5 * (sum_a + sum_b) as f64;
    if (max_index - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index as f64 - expected) / (max_index - expected))
}

/// Foreground-restricted ARI: pixels whose ground-truth label is 0 are
/// dropped before scoring. With fewer than 2 foreground pixels the score is
/// undefined and `None` is returned, never 0.
pub fn fg_ari(gt: &[u32], pred: &[u32]) -> Result<Option<f64>> {
    if gt.len() != pred.len() {
        return Err(Error::config(format!(
            "label slices differ in length: {} vs {}",
            gt.len(),
            pred.len()
        )));
    }
    let mut g = Vec::new();
    let mut p = Vec::new();
    for (&gi, &pi) in gt.iter().zip(pred.iter()) {
        if gi != 0 {
            g.push(gi);
            p.push(pi);
        }
    }
    if g.len() < 2 {
        return Ok(None);
    }
    ari(&g, &p).map(Some)
}

/// Mean over defined per-image scores; returns the count of skipped
/// (undefined) images alongside.
pub fn fg_ari_mean(per_image: &[Option<f64>]) -> (Option<f64>, usize) {
    let defined: Vec<f64> = per_image.iter().filter_map(|v| *v).collect();
    let skipped = per_image.len() - defined.len();
    if defined.is_empty() {
        (None, skipped)
    } else {
        (
            Some(defined.iter().sum::<f64>() / defined.len() as f64),
            skipped,
        )
    }
}

/// Argmax over the slot axis of `[B, K, H, W]` alphas; ties go to the lowest
/// slot index.
pub fn labels_from_masks(alphas: &ArrayD<f64>) -> Result<Array3<u32>> {
    let a4 = alphas
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape(&[0, 0, 0, 0], alphas.shape(), "mask tensor"))?;
    let (b, k, h, w) = a4.dim();
    let mut out = Array3::<u32>::zeros((b, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = a4[[bi, 0, y, x]];
                for s in 1..k {
                    let v = a4[[bi, s, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = s;
                    }
                }
                out[[bi, y, x]] = best as u32;
            }
        }
    }
    Ok(out)
}
