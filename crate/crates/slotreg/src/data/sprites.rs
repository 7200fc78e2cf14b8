//! Procedural colored-sprites samples with exact ground truth.
//!
//! Sprites are drawn back to front with hard edges (no anti-aliasing), so the
//! label map is unambiguous: each pixel belongs to the topmost sprite that
//! covers it, or to the background (label 0). Object features record the
//! sampled parameters before occlusion.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use ndarray::{Array2, Array3};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpriteShape {
    Ellipse,
    Square,
    Triangle,
}

pub const SHAPE_COUNT: usize = 3;

impl SpriteShape {
    pub fn id(self) -> usize {
        match self {
            SpriteShape::Ellipse => 0,
            SpriteShape::Square => 1,
            SpriteShape::Triangle => 2,
        }
    }

    pub fn from_id(id: usize) -> Result<SpriteShape> {
        match id {
            0 => Ok(SpriteShape::Ellipse),
            1 => Ok(SpriteShape::Square),
            2 => Ok(SpriteShape::Triangle),
            other => Err(Error::config(format!("unknown shape id {other}"))),
        }
    }
}

/// Ground-truth parameters of one sprite. `x`, `y` are the center in
/// normalized [0,1] canvas coordinates; `scale` is the bounding-box side as a
/// fraction of the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeature {
    pub shape: SpriteShape,
    pub color: [f64; 3],
    pub scale: f64,
    pub x: f64,
    pub y: f64,
}

/// One generated sample: image in `[H, W, 3]` with values in [0,1], label map
/// in `[H, W]` with 0 = background and i+1 = objects[i].
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub image: Array3<f64>,
    pub label_map: Array2<u32>,
    pub objects: Vec<ObjectFeature>,
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            scale_min: 0.15,
            scale_max: 0.45,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!(
                "object count range [{}, {}] invalid",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max < 1.0) {
            return Err(Error::config(format!(
                "scale range [{}, {}] invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - h.floor()) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Saturated, bright color: S and V uniform in [0.5, 1].
fn sample_color(rng: &mut RngStream) -> [f64; 3] {
    let h = rng.gen_range(0.0..1.0);
    let s = rng.gen_range(0.5..1.0);
    let v = rng.gen_range(0.5..1.0);
    hsv_to_rgb(h, s, v)
}

/// Membership test in normalized canvas coordinates.
fn contains(obj: &ObjectFeature, px: f64, py: f64) -> bool {
    let dx = px - obj.x;
    let dy = py - obj.y;
    let r = obj.scale / 2.0;
    match obj.shape {
        SpriteShape::Square => dx.abs() <= r && dy.abs() <= r,
        SpriteShape::Ellipse => {
            // 0.6 aspect keeps ellipses visually distinct from squares
            let ry = 0.6 * r;
            (dx / r) * (dx / r) + (dy / ry) * (dy / ry) <= 1.0
        }
        SpriteShape::Triangle => {
            // apex up, inscribed in the bounding box
            let ax = obj.x;
            let ay = obj.y - r;
            let bx = obj.x - r;
            let by = obj.y + r;
            let cx = obj.x + r;
            let cy = obj.y + r;
            let s1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
            let s2 = (cx - bx) * (py - by) - (cy - by) * (px - bx);
            let s3 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx);
            (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
        }
    }
}

/// Draw `objects` over a solid background, bottom first. The label map keeps
/// the topmost object per pixel.
pub fn rasterize(
    image_size: usize,
    background: [f64; 3],
    objects: &[ObjectFeature],
) -> (Array3<f64>, Array2<u32>) {
    let n = image_size;
    let mut image = Array3::<f64>::zeros((n, n, 3));
    let mut labels = Array2::<u32>::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                image[[y, x, c]] = background[c];
            }
        }
    }
    for (i, obj) in objects.iter().enumerate() {
        let label = (i + 1) as u32;
        for y in 0..n {
            let py = (y as f64 + 0.5) / n as f64;
            for x in 0..n {
                let px = (x as f64 + 0.5) / n as f64;
                if contains(obj, px, py) {
                    labels[[y, x]] = label;
                    for c in 0..3 {
                        image[[y, x, c]] = obj.color[c];
                    }
                }
            }
        }
    }
    (image, labels)
}

/// One sample from the given stream. Centers are uniform over the canvas, so
/// an edge-centered object keeps about half its area visible.
pub fn generate_sample(cfg: &GenConfig, rng: &mut RngStream) -> SampleRecord {
    let background = sample_color(rng);
    let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let shape = SpriteShape::from_id(rng.gen_range(0..SHAPE_COUNT)).unwrap();
        let color = sample_color(rng);
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let x = rng.gen_range(0.0..1.0);
        let y = rng.gen_range(0.0..1.0);
        objects.push(ObjectFeature { shape, color, scale, x, y });
    }
    let (image, label_map) = rasterize(cfg.image_size, background, &objects);
    SampleRecord {
        image,
        label_map,
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use std::collections::BTreeSet;

    fn cfg32() -> GenConfig {
        GenConfig {
            image_size: 32,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = cfg32();
        let a = generate_sample(&cfg, &mut stream(3, Stream::DataGen));
        let b = generate_sample(&cfg, &mut stream(3, Stream::DataGen));
        assert_eq!(a.image, b.image);
        assert_eq!(a.label_map, b.label_map);
        assert_eq!(a.objects, b.objects);
    }

    #[test]
    fn label_map_values_match_object_list() {
        let cfg = cfg32();
        let mut rng = stream(4, Stream::DataGen);
        for _ in 0..20 {
            let s = generate_sample(&cfg, &mut rng);
            let labels: BTreeSet<u32> = s.label_map.iter().cloned().collect();
            for &l in &labels {
                assert!(l as usize <= s.objects.len(), "label {l} out of range");
            }
            assert!(s.objects.len() >= cfg.min_objects && s.objects.len() <= cfg.max_objects);
            for o in &s.objects {
                assert!(o.scale >= cfg.scale_min && o.scale <= cfg.scale_max);
                assert!((0.0..=1.0).contains(&o.x) && (0.0..=1.0).contains(&o.y));
                for c in o.color {
                    assert!((0.0..=1.0).contains(&c));
                }
            }
        }
    }

    #[test]
    fn single_object_yields_two_labels() {
        let cfg = GenConfig {
            image_size: 32,
            min_objects: 1,
            max_objects: 1,
            scale_min: 0.3,
            scale_max: 0.4,
        };
        let s = generate_sample(&cfg, &mut stream(5, Stream::DataGen));
        let labels: BTreeSet<u32> = s.label_map.iter().cloned().collect();
        assert!(labels.contains(&1), "object never visible");
        assert!(labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn full_overlap_hides_bottom_object_but_keeps_its_feature() {
        let top = ObjectFeature {
            shape: SpriteShape::Square,
            color: [1.0, 0.0, 0.0],
            scale: 0.4,
            x: 0.5,
            y: 0.5,
        };
        let bottom = ObjectFeature {
            shape: SpriteShape::Square,
            color: [0.0, 1.0, 0.0],
            scale: 0.4,
            x: 0.5,
            y: 0.5,
        };
        let (_, labels) = rasterize(32, [0.0, 0.0, 0.0], &[bottom, top]);
        let count1 = labels.iter().filter(|&&l| l == 1).count();
        let count2 = labels.iter().filter(|&&l| l == 2).count();
        assert_eq!(count1, 0, "bottom object should be fully occluded");
        assert!(count2 > 0);
    }

    #[test]
    fn shapes_have_expected_coverage_ordering() {
        // with the same bounding box: square covers most, then ellipse
        // (0.6 aspect, pi/4 * 0.6 of the box), then triangle (half the box)
        let mk = |shape| ObjectFeature {
            shape,
            color: [1.0; 3],
            scale: 0.8,
            x: 0.5,
            y: 0.5,
        };
        let count = |shape| {
            let (_, l) = rasterize(64, [0.0; 3], &[mk(shape)]);
            l.iter().filter(|&&v| v == 1).count()
        };
        let sq = count(SpriteShape::Square);
        let el = count(SpriteShape::Ellipse);
        let tr = count(SpriteShape::Triangle);
        assert!(sq > tr && tr > el, "square {sq}, triangle {tr}, ellipse {el}");
        // square of side 0.8 on a 64 canvas covers about 51.2^2 pixels
        assert!((sq as i64 - 2621).abs() < 150, "square covered {sq}");
    }

    #[test]
    fn hsv_conversion_hits_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-9 && g[2].abs() < 1e-12);
        let b = hsv_to_rgb(2.0 / 3.0, 1.0, 1.0);
        assert!((b[2] - 1.0).abs() < 1e-12 && b[1].abs() < 1e-9);
        let gray = hsv_to_rgb(0.42, 0.0, 0.5);
        assert_eq!(gray, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg32().validate().is_ok());
        assert!(GenConfig { min_objects: 0, ..cfg32() }.validate().is_err());
        assert!(GenConfig { min_objects: 4, max_objects: 3, ..cfg32() }.validate().is_err());
        assert!(GenConfig { scale_min: 0.0, ..cfg32() }.validate().is_err());
        assert!(GenConfig { scale_max: 1.0, ..cfg32() }.validate().is_err());
        assert!(GenConfig { image_size: 4, ..cfg32() }.validate().is_err());
    }
}
