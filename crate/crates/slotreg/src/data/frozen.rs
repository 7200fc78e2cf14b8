//! Frozen feature extraction for the feature-reconstruction objective.
//!
//! Desk-scale runs have no pretrained vision backbone, so features come from
//! a small CNN with random weights fixed by the dataset seed. The features
//! are precomputed per sample and stored in the same tensor files that real
//! exported backbone features would use; downstream code cannot tell the
//! difference.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{Conv2dSpec, Tape};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;

const HIDDEN_CHANNELS: usize = 16;

/// Two stride-2 convolutions with seeded random weights; maps `[B, 3, H, W]`
/// images to `[B, (H/4)·(W/4), d_feat]` feature grids.
pub struct FrozenEncoder {
    w1: ArrayD<f64>,
    b1: ArrayD<f64>,
    w2: ArrayD<f64>,
    b2: ArrayD<f64>,
    pub d_feat: usize,
}

impl FrozenEncoder {
    pub fn new(seed: u64, d_feat: usize) -> Self {
        let mut rng = rng::stream(seed, Stream::FrozenEncoder);
        let mut xavier = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
        };
        let k = 5;
        FrozenEncoder {
            w1: xavier(&[HIDDEN_CHANNELS, 3, k, k], 3 * k * k, HIDDEN_CHANNELS * k * k),
            b1: ArrayD::zeros(IxDyn(&[HIDDEN_CHANNELS])),
            w2: xavier(
                &[d_feat, HIDDEN_CHANNELS, k, k],
                HIDDEN_CHANNELS * k * k,
                d_feat * k * k,
            ),
            b2: ArrayD::zeros(IxDyn(&[d_feat])),
            d_feat,
        }
    }

    /// Number of output locations for a square input of the given size.
    pub fn n_locations(&self, image_size: usize) -> usize {
        let g = image_size.div_ceil(4);
        g * g
    }

    pub fn apply(&self, images: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(&[0, 3, 0, 0], &shape, "frozen encoder input"));
        }
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let spec = Conv2dSpec { kernel: 5, stride: 2, pad: 2 };
        let mut t = Tape::new();
        let x = t.constant(images.clone());
        let w1 = t.constant(self.w1.clone());
        let b1 = t.constant(self.b1.clone());
        let b1 = t.reshape(b1, &[1, HIDDEN_CHANNELS, 1, 1]);
        let w2 = t.constant(self.w2.clone());
        let b2 = t.constant(self.b2.clone());
        let b2 = t.reshape(b2, &[1, self.d_feat, 1, 1]);
        let y = t.conv2d(x, w1, spec);
        let y = t.add(y, b1);
        let y = t.relu(y);
        let y = t.conv2d(y, w2, spec);
        let y = t.add(y, b2);
        let (gh, gw) = (h.div_ceil(4), w.div_ceil(4));
        let y = t.permute(y, &[0, 2, 3, 1]);
        let y = t.reshape(y, &[b, gh * gw, self.d_feat]);
        Ok(t.value(y).to_owned())
    }
}

/// In-memory frozen features paired with their sample indices.
#[derive(Debug)]
pub struct FrozenFeatureSet {
    pub features: Vec<Array2<f64>>,
    pub n_locations: usize,
    pub d_feat: usize,
}

/// Load the frozen features of the given samples, validating that every file
/// has the same shape.
pub fn load_frozen_features(dataset: &Dataset, indices: &[usize]) -> Result<FrozenFeatureSet> {
    if indices.is_empty() {
        return Err(Error::config(
            "no samples to load frozen features from (empty selection)",
        ));
    }
    let mut features = Vec::with_capacity(indices.len());
    let mut shape: Option<(usize, usize)> = None;
    for &i in indices {
        let (f, path) = dataset.load_features(i)?;
        let dim = f.dim();
        match shape {
            None => shape = Some(dim),
            Some(s) if s != dim => {
                return Err(Error::Format {
                    path,
                    context: format!(
                        "feature shape {:?} differs from the set's {:?}",
                        dim, s
                    ),
                });
            }
            _ => {}
        }
        features.push(f);
    }
    let (n_locations, d_feat) = shape.unwrap();
    Ok(FrozenFeatureSet {
        features,
        n_locations,
        d_feat,
    })
}

/// Frozen features for `indices` stacked into a `[B, N, d_feat]` batch.
pub fn feature_batch(dataset: &Dataset, indices: &[usize]) -> Result<ArrayD<f64>> {
    let set = load_frozen_features(dataset, indices)?;
    let mut batch = ArrayD::zeros(IxDyn(&[indices.len(), set.n_locations, set.d_feat]));
    for (b, f) in set.features.iter().enumerate() {
        batch
            .index_axis_mut(Axis(0), b)
            .assign(&f.view().into_dyn());
    }
    Ok(batch)
}
