//! Window-consistent augmentation: one crop / flip / HSV draw per window,
//! applied identically to all n frames and to the middle-frame boxes.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

use super::FrameWindow;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub crop_prob: f64,
    pub flip_prob: f64,
    pub hsv_prob: f64,
    /// Crop side length as a fraction of the original, (lo, hi] within (0, 1].
    pub crop_scale_range: (f64, f64),
    /// Hue shift amplitude in degrees; saturation/value multiplicative jitter.
    pub hue_amp: f64,
    pub sat_amp: f64,
    pub val_amp: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_prob: 0.5,
            flip_prob: 0.5,
            hsv_prob: 0.5,
            crop_scale_range: (0.6, 1.0),
            hue_amp: 12.0,
            sat_amp: 0.3,
            val_amp: 0.3,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.crop_prob, self.flip_prob, self.hsv_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::argument("augmentation probabilities must be in [0,1]"));
        }
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::argument("crop_scale_range must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// Geometric transform actually applied to a window, invertible on boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedTransform {
    /// Crop origin and size in source pixels, if a crop was applied.
    pub crop: Option<(f64, f64, f64, f64)>,
    pub flipped: bool,
    /// Output image size (same as input size; crops are resized back).
    pub width: f64,
    pub height: f64,
}

impl AppliedTransform {
    pub fn identity(width: f64, height: f64) -> Self {
        AppliedTransform {
            crop: None,
            flipped: false,
            width,
            height,
        }
    }

    /// Map a source-space point into augmented-image space.
    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut x, mut y) = match self.crop {
            Some((cx, cy, cw, ch)) => ((x - cx) * self.width / cw, (y - cy) * self.height / ch),
            None => (x, y),
        };
        if self.flipped {
            x = self.width - x;
        }
        let _ = &mut y;
        (x, y)
    }

    /// Map an augmented-space point back to source coordinates.
    pub fn invert_point(&self, x: f64, y: f64) -> (f64, f64) {
        let x = if self.flipped { self.width - x } else { x };
        match self.crop {
            Some((cx, cy, cw, ch)) => (cx + x * cw / self.width, cy + y * ch / self.height),
            None => (x, y),
        }
    }

    pub fn apply_box(&self, b: &BoundingBox<f64>) -> BoundingBox<f64> {
        let (ax1, ay1) = self.apply_point(b.x1, b.y1);
        let (ax2, ay2) = self.apply_point(b.x2, b.y2);
        BoundingBox::raw(ax1.min(ax2), ay1.min(ay2), ax1.max(ax2), ay1.max(ay2))
    }

    pub fn invert_box(&self, b: &BoundingBox<f64>) -> BoundingBox<f64> {
        let (ax1, ay1) = self.invert_point(b.x1, b.y1);
        let (ax2, ay2) = self.invert_point(b.x2, b.y2);
        BoundingBox::raw(ax1.min(ax2), ay1.min(ay2), ax1.max(ax2), ay1.max(ay2))
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn jitter_hsv(img: &RgbImage, dh: f64, ds: f64, dv: f64) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let (h, s, v) = rgb_to_hsv(
            p.0[0] as f64 / 255.0,
            p.0[1] as f64 / 255.0,
            p.0[2] as f64 / 255.0,
        );
        let (r, g, b) = hsv_to_rgb(h + dh, (s * ds).clamp(0.0, 1.0), (v * dv).clamp(0.0, 1.0));
        *p = Rgb([
            (r * 255.0).round().clamp(0.0, 255.0) as u8,
            (g * 255.0).round().clamp(0.0, 255.0) as u8,
            (b * 255.0).round().clamp(0.0, 255.0) as u8,
        ]);
    }
    out
}

/// Apply a single augmentation draw to all frames of the window. Returns the
/// augmented window and the geometric transform that was applied (so callers
/// can map detections or boxes back to source coordinates).
pub fn augment_window(
    w: &FrameWindow,
    cfg: &AugmentationConfig,
    rng_seed: u64,
) -> Result<(FrameWindow, AppliedTransform)> {
    cfg.validate()?;
    if w.images.is_empty() {
        return Err(Error::argument("augment_window: empty window"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (width, height) = (w.images[0].width(), w.images[0].height());
    let (wf, hf) = (width as f64, height as f64);

    // crop: drawn once, resampled while degenerate
    let mut crop = None;
    if rng.gen::<f64>() < cfg.crop_prob {
        for _ in 0..10 {
            let (lo, hi) = cfg.crop_scale_range;
            let scale = rng.gen_range(lo..=hi);
            let cw = (wf * scale).round();
            let ch = (hf * scale).round();
            if cw < 1.0 || ch < 1.0 {
                continue;
            }
            let cx = rng.gen_range(0.0..=(wf - cw));
            let cy = rng.gen_range(0.0..=(hf - ch));
            crop = Some((cx.round(), cy.round(), cw, ch));
            break;
        }
    }
    let flipped = rng.gen::<f64>() < cfg.flip_prob;
    let hsv = if rng.gen::<f64>() < cfg.hsv_prob {
        Some((
            rng.gen_range(-cfg.hue_amp..=cfg.hue_amp),
            rng.gen_range(1.0 - cfg.sat_amp..=1.0 + cfg.sat_amp),
            rng.gen_range(1.0 - cfg.val_amp..=1.0 + cfg.val_amp),
        ))
    } else {
        None
    };

    let transform = AppliedTransform {
        crop,
        flipped,
        width: wf,
        height: hf,
    };

    let images: Vec<RgbImage> = w
        .images
        .iter()
        .map(|img| {
            let mut img = match crop {
                Some((cx, cy, cw, ch)) => {
                    let view = image::imageops::crop_imm(
                        img,
                        cx as u32,
                        cy as u32,
                        cw as u32,
                        ch as u32,
                    )
                    .to_image();
                    image::imageops::resize(
                        &view,
                        width,
                        height,
                        image::imageops::FilterType::Triangle,
                    )
                }
                None => img.clone(),
            };
            if flipped {
                img = image::imageops::flip_horizontal(&img);
            }
            match hsv {
                Some((dh, ds, dv)) => jitter_hsv(&img, dh, ds, dv),
                None => img,
            }
        })
        .collect();

    // transform the middle-frame boxes: clip to the crop, drop tiny remnants
    let middle_gt: Vec<BoundingBox<f64>> = w
        .middle_gt
        .iter()
        .filter_map(|b| {
            let t = transform.apply_box(b).clamped(wf, hf);
            if t.is_valid() && t.area() >= 4.0 {
                Some(t)
            } else {
                None
            }
        })
        .collect();

    Ok((
        FrameWindow {
            images,
            middle_gt,
            source: w.source.clone(),
        },
        transform,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_window, FrameAnnotation, VideoClip};

    fn toy_window(boxes: Vec<BoundingBox<f64>>, w: u32, h: u32) -> FrameWindow {
        let clip = VideoClip {
            name: "t".to_string(),
            frames: (0..3)
                .map(|i| RgbImage::from_pixel(w, h, Rgb([40 + i as u8 * 10, 80, 120])))
                .collect(),
            annotations: (0..3)
                .map(|frame_index| FrameAnnotation {
                    frame_index,
                    boxes: if frame_index == 1 { boxes.clone() } else { Vec::new() },
                })
                .collect(),
            fps: 25.0,
        };
        sample_window(&clip, 1, 3).unwrap()
    }

    fn flip_only() -> AugmentationConfig {
        AugmentationConfig {
            crop_prob: 0.0,
            flip_prob: 1.0,
            hsv_prob: 0.0,
            ..AugmentationConfig::default()
        }
    }

    #[test]
    fn flip_mirrors_box_about_vertical_axis() {
        let w = toy_window(vec![BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap()], 100, 50);
        let (out, t) = augment_window(&w, &flip_only(), 1).unwrap();
        assert!(t.flipped);
        assert_eq!(out.middle_gt[0].raw_tuple(), (80.0, 10.0, 90.0, 20.0));
    }

    #[test]
    fn same_seed_gives_identical_output() {
        let w = toy_window(vec![BoundingBox::new(5.0, 5.0, 30.0, 25.0).unwrap()], 64, 48);
        let cfg = AugmentationConfig::default();
        let (a, ta) = augment_window(&w, &cfg, 99).unwrap();
        let (b, tb) = augment_window(&w, &cfg, 99).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.middle_gt, b.middle_gt);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn all_frames_get_the_same_geometry() {
        let w = toy_window(vec![], 64, 48);
        // make frames distinguishable but geometry-checkable via a dot
        let mut w = w;
        for img in &mut w.images {
            img.put_pixel(10, 10, Rgb([255, 255, 255]));
        }
        let cfg = AugmentationConfig {
            crop_prob: 1.0,
            flip_prob: 0.0,
            hsv_prob: 0.0,
            ..AugmentationConfig::default()
        };
        let (out, t) = augment_window(&w, &cfg, 7).unwrap();
        assert!(t.crop.is_some());
        // the white dot must land at the same place in every frame
        let find_peak = |img: &RgbImage| {
            let mut best = (0u32, 0u32, 0u32);
            for (x, y, p) in img.enumerate_pixels() {
                let s = p.0[0] as u32 + p.0[1] as u32 + p.0[2] as u32;
                if s > best.2 {
                    best = (x, y, s);
                }
            }
            (best.0, best.1)
        };
        let p0 = find_peak(&out.images[0]);
        assert_eq!(find_peak(&out.images[1]), p0);
        assert_eq!(find_peak(&out.images[2]), p0);
    }

    #[test]
    fn box_outside_crop_is_dropped() {
        let w = toy_window(vec![BoundingBox::new(2.0, 2.0, 10.0, 10.0).unwrap()], 100, 50);
        // force a crop of the right half by trying seeds until one lands there
        let cfg = AugmentationConfig {
            crop_prob: 1.0,
            flip_prob: 0.0,
            hsv_prob: 0.0,
            crop_scale_range: (0.5, 0.5),
            ..AugmentationConfig::default()
        };
        let mut dropped = false;
        for seed in 0..200 {
            let (out, t) = augment_window(&w, &cfg, seed).unwrap();
            let (cx, _, _, _) = t.crop.unwrap();
            if cx >= 10.0 {
                // oracle: box (2,2,10,10) has zero intersection with the crop
                assert!(out.middle_gt.is_empty());
                dropped = true;
                break;
            }
        }
        assert!(dropped, "no seed produced a crop right of the box");
    }

    #[test]
    fn surviving_box_roundtrips_through_inverse() {
        let cfg = AugmentationConfig {
            crop_prob: 1.0,
            flip_prob: 1.0,
            hsv_prob: 0.0,
            crop_scale_range: (0.7, 0.95),
            ..AugmentationConfig::default()
        };
        for seed in 0..50u64 {
            let orig = BoundingBox::new(20.0, 12.0, 44.0, 30.0).unwrap();
            let w = toy_window(vec![orig], 64, 48);
            let (out, t) = augment_window(&w, &cfg, seed).unwrap();
            for b in &out.middle_gt {
                // only exact (unclipped) survivors are bijective; skip boxes
                // touching the crop edge
                let back = t.invert_box(b);
                if b.x1 > 0.5
                    && b.y1 > 0.5
                    && b.x2 < t.width - 0.5
                    && b.y2 < t.height - 0.5
                {
                    assert!((back.x1 - orig.x1).abs() < 0.5, "seed {seed}");
                    assert!((back.y1 - orig.y1).abs() < 0.5);
                    assert!((back.x2 - orig.x2).abs() < 0.5);
                    assert!((back.y2 - orig.y2).abs() < 0.5);
                }
            }
        }
    }

    #[test]
    fn hsv_changes_pixels_not_geometry() {
        let b = BoundingBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let w = toy_window(vec![b], 64, 48);
        let cfg = AugmentationConfig {
            crop_prob: 0.0,
            flip_prob: 0.0,
            hsv_prob: 1.0,
            ..AugmentationConfig::default()
        };
        let (out, t) = augment_window(&w, &cfg, 3).unwrap();
        assert_eq!(out.middle_gt[0], b);
        assert_eq!(t, AppliedTransform::identity(64.0, 48.0));
        assert_ne!(out.images[1], w.images[1]);
    }

    #[test]
    fn hsv_roundtrip_identity() {
        for (r, g, b) in [(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.0, 0.0, 0.0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-9 && (g - g2).abs() < 1e-9 && (b - b2).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let w = toy_window(vec![], 16, 16);
        let cfg = AugmentationConfig {
            crop_prob: 1.5,
            ..AugmentationConfig::default()
        };
        assert!(augment_window(&w, &cfg, 0).is_err());
    }
}
