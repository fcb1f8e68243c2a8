//! Training-time augmentation: random scale, random horizontal flip,
//! random crop (reflect-padded when short) and normalization.
//!
//! The image is resampled bilinearly, the mask with nearest neighbor, both
//! under the same half-pixel-center convention as the tensor operators so
//! image and mask stay geometrically aligned. Every step is a pure
//! function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, Sample};
use crate::labels::LabelMap;

/// Augmentation parameters; crop offsets are drawn as fractions so the
/// draw is independent of the scaled extents.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub scale: f64,
    pub flip: bool,
    pub crop_frac: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub out_height: usize,
    pub out_width: usize,
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub mean: f32,
    pub std: f32,
}

impl AugmentConfig {
    pub fn for_extents(out_height: usize, out_width: usize) -> Self {
        Self {
            out_height,
            out_width,
            scale_range: (0.75, 1.25),
            flip_prob: 0.5,
            mean: 0.5,
            std: 0.25,
        }
    }

    /// Evaluation-time pipeline: normalization only.
    pub fn normalize_image(&self, image: &Image) -> Image {
        Image::new(
            image.height,
            image.width,
            image
                .data
                .iter()
                .map(|v| (v - self.mean) / self.std)
                .collect(),
        )
    }
}

/// Deterministic parameter draw; the order (scale, flip, crop y, crop x)
/// is part of the reproducibility contract.
pub fn draw_params(cfg: &AugmentConfig, seed: u64) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if cfg.scale_range.0 == cfg.scale_range.1 {
        cfg.scale_range.0
    } else {
        rng.gen_range(cfg.scale_range.0..cfg.scale_range.1)
    };
    let flip = rng.gen_range(0.0..1.0) < cfg.flip_prob;
    let crop_frac = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
    AugmentParams {
        scale,
        flip,
        crop_frac,
    }
}

/// Random scale, flip, reflect-pad/crop to the training extents, then
/// normalize. The mask undergoes the identical geometry.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    apply(sample, cfg, &draw_params(cfg, seed))
}

/// Applies explicitly chosen parameters (test hook and deterministic replay).
pub fn apply(sample: &Sample, cfg: &AugmentConfig, params: &AugmentParams) -> Sample {
    let mut s = scale_sample(sample, params.scale);
    if params.flip {
        s = hflip(&s);
    }
    let s = crop_or_pad(&s, cfg.out_height, cfg.out_width, params.crop_frac);
    Sample {
        id: s.id.clone(),
        image: cfg.normalize_image(&s.image),
        mask: s.mask,
    }
}

/// Horizontal mirror of image and mask; an involution.
pub fn hflip(sample: &Sample) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut image = vec![0.0f32; h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            image[y * w + x] = sample.image.at(y, w - 1 - x);
            mask[y * w + x] = sample.mask.at2(y, w - 1 - x);
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Image::new(h, w, image),
        mask: LabelMap::new(vec![h, w], mask).expect("mask shape"),
    }
}

/// Half-pixel-center source coordinate, clamped.
fn src_coord(i: usize, out: usize, src: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn scale_sample(sample: &Sample, factor: f64) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    if (nh, nw) == (h, w) {
        return sample.clone();
    }
    let mut image = vec![0.0f32; nh * nw];
    let mut mask = vec![0u8; nh * nw];
    for y in 0..nh {
        let sy = src_coord(y, nh, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        let ny = sy.round() as usize;
        for x in 0..nw {
            let sx = src_coord(x, nw, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            image[y * nw + x] = (1.0 - fy)
                * ((1.0 - fx) * sample.image.at(y0, x0) + fx * sample.image.at(y0, x1))
                + fy * ((1.0 - fx) * sample.image.at(y1, x0) + fx * sample.image.at(y1, x1));
            mask[y * nw + x] = sample.mask.at2(ny, sx.round() as usize);
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Image::new(nh, nw, image),
        mask: LabelMap::new(vec![nh, nw], mask).expect("mask shape"),
    }
}

/// Reflect index `i` into `[0, size)` without repeating the edge sample.
fn reflect(i: isize, size: usize) -> usize {
    if size == 1 {
        return 0;
    }
    let period = 2 * (size as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= size as isize {
        i = period - i;
    }
    i as usize
}

fn crop_or_pad(sample: &Sample, th: usize, tw: usize, crop_frac: (f64, f64)) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    // Crop at a random offset where long; reflect-pad symmetrically where short.
    let off_y = if h > th {
        ((crop_frac.0 * (h - th + 1) as f64).floor() as usize).min(h - th)
    } else {
        0
    };
    let off_x = if w > tw {
        ((crop_frac.1 * (w - tw + 1) as f64).floor() as usize).min(w - tw)
    } else {
        0
    };
    let (pad_y, pad_x) = (th.saturating_sub(h) / 2, tw.saturating_sub(w) / 2);
    let mut image = vec![0.0f32; th * tw];
    let mut mask = vec![0u8; th * tw];
    for y in 0..th {
        let sy = if h >= th {
            (y + off_y) as isize
        } else {
            y as isize - pad_y as isize
        };
        let sy = reflect(sy, h);
        for x in 0..tw {
            let sx = if w >= tw {
                (x + off_x) as isize
            } else {
                x as isize - pad_x as isize
            };
            let sx = reflect(sx, w);
            image[y * tw + x] = sample.image.at(sy, sx);
            mask[y * tw + x] = sample.mask.at2(sy, sx);
        }
    }
    Sample {
        id: sample.id.clone(),
        image: Image::new(th, tw, image),
        mask: LabelMap::new(vec![th, tw], mask).expect("mask shape"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthConfig};

    fn sample() -> Sample {
        generate(&SynthConfig::default_for_extents(64, 96), 1)
            .unwrap()
            .pop()
            .unwrap()
    }

    #[test]
    fn hflip_is_an_involution() {
        let s = sample();
        let twice = hflip(&hflip(&s));
        assert_eq!(twice.image.data, s.image.data);
        assert_eq!(twice.mask.data(), s.mask.data());
    }

    #[test]
    fn identity_params_only_normalize() {
        let s = sample();
        let cfg = AugmentConfig::for_extents(64, 96);
        let out = apply(
            &s,
            &cfg,
            &AugmentParams {
                scale: 1.0,
                flip: false,
                crop_frac: (0.0, 0.0),
            },
        );
        assert_eq!(out.mask.data(), s.mask.data());
        for (o, i) in out.image.data.iter().zip(&s.image.data) {
            assert!((o - (i - 0.5) / 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn augmented_mask_stays_binary() {
        let s = sample();
        let cfg = AugmentConfig::for_extents(64, 64);
        for seed in 0..30 {
            let out = augment(&s, &cfg, seed);
            assert_eq!(out.mask.shape(), &[64, 64]);
            assert_eq!(out.image.data.len(), 64 * 64);
            assert!(out.mask.data().iter().all(|&m| m <= 1));
        }
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let s = sample();
        let cfg = AugmentConfig::for_extents(64, 64);
        let a = augment(&s, &cfg, 7);
        let b = augment(&s, &cfg, 7);
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.mask.data(), b.mask.data());
    }

    #[test]
    fn scaling_preserves_wall_area_within_tolerance() {
        // Stated at default extents, where walls are thick enough for the
        // nearest-neighbor quantization to stay under 10%.
        let s = generate(&SynthConfig::default(), 1).unwrap().pop().unwrap();
        let before = s.mask.data().iter().filter(|&&m| m == 1).count() as f64;
        for factor in [0.75, 0.9, 1.1, 1.25] {
            let scaled = scale_sample(&s, factor);
            let after = scaled.mask.data().iter().filter(|&&m| m == 1).count() as f64;
            let expect = before * factor * factor;
            assert!(
                (after - expect).abs() / expect < 0.10,
                "factor {factor}: {after} vs {expect}"
            );
        }
    }

    #[test]
    fn padding_reflects_without_edge_duplication() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-3, 1), 0);
    }
}
