//! PNG renderings of per-slot masks.
//!
//! Each requested sample becomes one image row: input, reconstruction, one
//! panel per slot, and an argmax label overlay. Bytes are deterministic for a
//! fixed (model, sample, seed): slot noise is keyed per sample index, not by
//! position in the request.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array3, ArrayD, IxDyn};

use crate::config::Objective;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::SlotModel;
use crate::rng::{indexed_stream, Stream};
use crate::tape::Tape;

/// Distinct overlay colors per slot; wraps when K exceeds it.
const PALETTE: [[f64; 3]; 10] = [
    [0.894, 0.102, 0.110],
    [0.216, 0.494, 0.722],
    [0.302, 0.686, 0.290],
    [1.000, 0.498, 0.000],
    [0.596, 0.306, 0.639],
    [1.000, 1.000, 0.200],
    [0.651, 0.337, 0.157],
    [0.969, 0.506, 0.749],
    [0.600, 0.600, 0.600],
    [0.090, 0.745, 0.812],
];

/// Width of the white gutter between panels, in pixels.
const GUTTER: usize = 2;

/// Render one PNG per sample into `out_dir`, returning the file paths.
///
/// Image objective: per-slot panels are the slot's RGB decode weighted by its
/// alpha mask. Feature objective: per-slot panels are the grayscale alpha
/// maps upsampled from the frozen-feature grid, and the reconstruction panel
/// shows the first feature channels min-max normalized.
pub fn render_masks(
    model: &SlotModel,
    dataset: &Dataset,
    objective: Objective,
    indices: &[usize],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(indices.len());
    for &i in indices {
        let panels = match objective {
            Objective::ImageRecon => image_panels(model, dataset, i, seed)?,
            Objective::FeatureRecon => feature_panels(model, dataset, i, seed)?,
        };
        let path = out_dir.join(format!("sample_{i:05}_masks.png"));
        save_row(&panels, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Panels for one image-objective sample: input, recon, K alpha-weighted
/// slot decodes, argmax overlay.
fn image_panels(
    model: &SlotModel,
    dataset: &Dataset,
    index: usize,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let input = dataset.load_image(index)?;
    let mut t = Tape::new();
    let p = model.bind(&mut t, false);
    let images = t.constant(dataset.load_image_batch(&[index])?);
    let mut noise = indexed_stream(seed, Stream::EvalNoise, index as u64);
    let fwd = model.forward_image(&mut t, &p, images, &mut noise)?;

    let recon = t.value(fwd.recon);
    let alphas = t.value(fwd.alphas);
    let rgb = t.value(fwd.rgb);
    let (k, h, w) = (alphas.shape()[1], alphas.shape()[2], alphas.shape()[3]);

    let mut panels = Vec::with_capacity(k + 3);
    panels.push(input.clone());
    panels.push(Array3::from_shape_fn((h, w, 3), |(y, x, c)| recon[[0, c, y, x]]));
    for s in 0..k {
        panels.push(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            alphas[[0, s, y, x]] * rgb[[0, s, c, y, x]]
        }));
    }
    panels.push(overlay(&input, &|y, x| argmax_slot(alphas, k, &[0, y, x])));
    Ok(panels)
}

/// Panels for one feature-objective sample: input, normalized feature recon,
/// K grayscale alpha maps, argmax overlay. Mask panels are upsampled from the
/// frozen grid to image resolution.
fn feature_panels(
    model: &SlotModel,
    dataset: &Dataset,
    index: usize,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let input = dataset.load_image(index)?;
    let size = dataset.image_size();
    let mut t = Tape::new();
    let p = model.bind(&mut t, false);
    let feats = t.constant(crate::data::frozen::feature_batch(dataset, &[index])?);
    let mut noise = indexed_stream(seed, Stream::EvalNoise, index as u64);
    let fwd = model.forward_features(&mut t, &p, feats, &mut noise)?;

    let alphas = t.value(fwd.alphas);
    let recon = t.value(fwd.recon);
    let (k, n) = (alphas.shape()[1], alphas.shape()[2]);
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || size % g != 0 {
        return Err(Error::config(format!(
            "feature grid {n} is not a square divisor of {size}x{size} images"
        )));
    }
    let up = size / g;

    let mut panels = Vec::with_capacity(k + 3);
    panels.push(input.clone());
    panels.push(feature_recon_panel(recon, g, up, size));
    for s in 0..k {
        panels.push(Array3::from_shape_fn((size, size, 3), |(y, x, _)| {
            alphas[[0, s, (y / up) * g + x / up]]
        }));
    }
    panels.push(overlay(&input, &|y, x| {
        argmax_slot(alphas, k, &[0, (y / up) * g + x / up])
    }));
    Ok(panels)
}

/// First feature channels of the reconstruction, min-max normalized per
/// channel over the grid; a constant channel renders mid-gray.
fn feature_recon_panel(recon: &ArrayD<f64>, g: usize, up: usize, size: usize) -> Array3<f64> {
    let d = recon.shape()[2];
    let channel = |c: usize, loc: usize| recon[[0, loc, c % d]];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in 0..3 {
        for loc in 0..g * g {
            lo[c] = lo[c].min(channel(c, loc));
            hi[c] = hi[c].max(channel(c, loc));
        }
    }
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let v = channel(c, (y / up) * g + x / up);
        if hi[c] > lo[c] {
            (v - lo[c]) / (hi[c] - lo[c])
        } else {
            0.5
        }
    })
}

/// Index of the strongest slot at one mask location.
fn argmax_slot(alphas: &ArrayD<f64>, k: usize, tail: &[usize]) -> usize {
    let mut idx = vec![0; tail.len() + 1];
    idx[0] = tail[0];
    idx[2..].copy_from_slice(&tail[1..]);
    let mut best = (0, f64::NEG_INFINITY);
    for s in 0..k {
        idx[1] = s;
        let v = alphas[IxDyn(&idx)];
        if v > best.1 {
            best = (s, v);
        }
    }
    best.0
}

/// Half input, half slot color at every pixel.
fn overlay(input: &Array3<f64>, slot_at: &dyn Fn(usize, usize) -> usize) -> Array3<f64> {
    let (h, w, _) = input.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        0.5 * input[[y, x, c]] + 0.5 * PALETTE[slot_at(y, x) % PALETTE.len()][c]
    })
}

/// Blit the panels side by side with white gutters and write a PNG.
fn save_row(panels: &[Array3<f64>], path: &Path) -> Result<()> {
    let (h, w, _) = panels[0].dim();
    let total_w = panels.len() * w + (panels.len() - 1) * GUTTER;
    let mut img = RgbImage::from_pixel(total_w as u32, h as u32, Rgb([255, 255, 255]));
    for (pi, panel) in panels.iter().enumerate() {
        debug_assert_eq!(panel.dim(), (h, w, 3));
        let x0 = pi * (w + GUTTER);
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| (panel[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((x0 + x) as u32, y as u32, Rgb([px(0), px(1), px(2)]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
