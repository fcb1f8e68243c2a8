//! Synthetic longitudinal-vessel corpus, augmentation and I/O.
//!
//! Generated images show two bright wavy wall bands around a dark lumen on
//! a mid-dark background, corrupted the way low-quality ultrasound is:
//! *dark segments* attenuate a stretch of wall without removing it from
//! the mask (the wall is anatomically present, merely faint), *gap
//! segments* erase a stretch from the image while keeping it in the mask
//! (the segmenter is supposed to bridge the discontinuity), and
//! multiplicative speckle roughens everything. Generation is a pure
//! function of `(seed, sample index)`.

mod augment;
mod corpus;
mod pgm;

pub use augment::{augment, hflip, AugmentConfig, AugmentParams};
pub use corpus::{
    config_hash, load_sample, read_manifest, split, write_corpus, ManifestEntry, Split,
};
pub use pgm::{read_image_pgm, read_mask_pgm, write_image_pgm, write_mask_pgm};

use std::f64::consts::TAU;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::labels::LabelMap;

#[derive(Debug)]
pub enum DataError {
    Io { path: String, source: std::io::Error },
    PgmParse { pos: usize, detail: String },
    InvalidConfig(String),
    EmptyDataset,
    Manifest(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "{path}: {source}"),
            DataError::PgmParse { pos, detail } => {
                write!(f, "malformed PGM at byte {pos}: {detail}")
            }
            DataError::InvalidConfig(d) => write!(f, "invalid generator config: {d}"),
            DataError::EmptyDataset => write!(f, "dataset is empty"),
            DataError::Manifest(d) => write!(f, "manifest: {d}"),
        }
    }
}

impl std::error::Error for DataError {}

/// Grayscale image in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(height * width, data.len());
        Self { height, width, data }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// One corpus element: image, mask (0 background, 1 vascular wall), id.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: LabelMap,
}

/// Generator parameters. Lengths are pixels, intensities in `[0, 1]`,
/// `(lo, hi)` pairs are inclusive uniform ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub wall_thickness: (f64, f64),
    pub wall_separation: (f64, f64),
    pub wall_intensity: (f64, f64),
    pub lumen_intensity: (f64, f64),
    pub background_intensity: (f64, f64),
    pub speckle_sigma: f64,
    pub dark_prob: f64,
    pub dark_len: (usize, usize),
    pub dark_attenuation: (f64, f64),
    pub gap_prob: f64,
    pub gap_len: (usize, usize),
    pub waviness_amplitude: (f64, f64),
    pub waviness_wavelength: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::default_for_extents(256, 256)
    }
}

impl SynthConfig {
    /// Geometry scaled to the requested extents; at 256x256 the wall
    /// fraction lands in the 3-15% class-imbalance band.
    pub fn default_for_extents(height: usize, width: usize) -> Self {
        let sh = height as f64 / 256.0;
        let sw = width as f64 / 256.0;
        Self {
            height,
            width,
            wall_thickness: (10.0 * sh, 16.0 * sh),
            wall_separation: (48.0 * sh, 88.0 * sh),
            wall_intensity: (0.62, 0.88),
            lumen_intensity: (0.04, 0.18),
            background_intensity: (0.24, 0.40),
            speckle_sigma: 0.07,
            dark_prob: 0.5,
            dark_len: ((24.0 * sw) as usize, (72.0 * sw) as usize),
            dark_attenuation: (0.35, 0.6),
            gap_prob: 0.35,
            gap_len: ((12.0 * sw) as usize, (36.0 * sw) as usize),
            waviness_amplitude: (2.0 * sh, 6.0 * sh),
            waviness_wavelength: (80.0 * sw, 160.0 * sw),
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |d: String| Err(DataError::InvalidConfig(d));
        if self.height == 0 || self.width == 0 {
            return err("extents must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("wall_thickness", self.wall_thickness),
            ("wall_separation", self.wall_separation),
            ("wall_intensity", self.wall_intensity),
            ("lumen_intensity", self.lumen_intensity),
            ("background_intensity", self.background_intensity),
            ("dark_attenuation", self.dark_attenuation),
            ("waviness_amplitude", self.waviness_amplitude),
            ("waviness_wavelength", self.waviness_wavelength),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return err(format!("{name} range ({lo}, {hi}) is not an ordered pair"));
            }
        }
        if self.wall_thickness.0 < 1.0 {
            return err("wall thickness must be >= 1 pixel".into());
        }
        if self.wall_separation.0 <= 2.0 * self.wall_thickness.1 {
            return err(format!(
                "wall separation {} must exceed twice the maximum thickness {}",
                self.wall_separation.0, self.wall_thickness.1
            ));
        }
        if self.dark_attenuation.0 <= 0.0 || self.dark_attenuation.1 >= 1.0 {
            return err("dark attenuation must lie strictly inside (0, 1)".into());
        }
        for (name, (lo, hi)) in [
            ("wall_intensity", self.wall_intensity),
            ("lumen_intensity", self.lumen_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if lo < 0.0 || hi > 1.0 {
                return err(format!("{name} range ({lo}, {hi}) outside [0, 1]"));
            }
        }
        for (name, p) in [("dark_prob", self.dark_prob), ("gap_prob", self.gap_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return err(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.speckle_sigma < 0.0 {
            return err("speckle sigma must be >= 0".into());
        }
        if self.waviness_wavelength.0 <= 0.0 {
            return err("waviness wavelength must be positive".into());
        }
        if self.dark_len.0 > self.dark_len.1 || self.gap_len.0 > self.gap_len.1 {
            return err("segment length ranges must be ordered".into());
        }
        // The deepest wall edge must stay inside the frame at zero jitter.
        let reach = self.wall_separation.1 / 2.0
            + self.wall_thickness.1
            + self.waviness_amplitude.1
            + 1.0;
        if reach >= self.height as f64 / 2.0 {
            return err(format!(
                "geometry does not fit: walls reach {reach:.1} px from center in a {} px tall frame",
                self.height
            ));
        }
        Ok(())
    }
}

/// Independent per-sample stream: `hash(seed, index)` via splitmix64.
fn sample_seed(seed: u64, index: u64) -> u64 {
    fn splitmix64(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn uniform_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn uniform_len(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

struct WallGeometry {
    center: f64,
    thickness: f64,
    intensity: f64,
    dark: Option<(usize, usize, f64)>,
    gap: Option<(usize, usize)>,
}

/// Generates `count` samples; byte-identical for equal `(config, count)`.
pub fn generate(config: &SynthConfig, count: usize) -> Result<Vec<Sample>, DataError> {
    config.validate()?;
    if count == 0 {
        return Err(DataError::InvalidConfig("count must be >= 1".into()));
    }
    Ok((0..count).map(|i| generate_one(config, i)).collect())
}

/// Generates the sample at one index of the stream.
pub fn generate_one(config: &SynthConfig, index: usize) -> Sample {
    let (h, w) = (config.height, config.width);
    let rng = &mut ChaCha8Rng::seed_from_u64(sample_seed(config.seed, index as u64));

    let t_top = uniform_in(rng, config.wall_thickness);
    let t_bot = uniform_in(rng, config.wall_thickness);
    let separation = uniform_in(rng, config.wall_separation);
    let amplitude = uniform_in(rng, config.waviness_amplitude);
    let wavelength = uniform_in(rng, config.waviness_wavelength);
    let phase = rng.gen_range(0.0..TAU);
    let reach = separation / 2.0 + t_top.max(t_bot) + amplitude + 1.0;
    let jitter_max = (h as f64 / 2.0 - reach).max(0.0);
    let jitter = if jitter_max > 0.0 {
        rng.gen_range(-jitter_max..jitter_max)
    } else {
        0.0
    };
    let lumen_center = h as f64 / 2.0 + jitter;

    let wall_base_top = uniform_in(rng, config.wall_intensity);
    let wall_base_bot = uniform_in(rng, config.wall_intensity);
    let lumen_value = uniform_in(rng, config.lumen_intensity);
    let background_value = uniform_in(rng, config.background_intensity);

    let mut top = WallGeometry {
        center: lumen_center - separation / 2.0 - t_top / 2.0,
        thickness: t_top,
        intensity: wall_base_top,
        dark: None,
        gap: None,
    };
    let mut bottom = WallGeometry {
        center: lumen_center + separation / 2.0 + t_bot / 2.0,
        thickness: t_bot,
        intensity: wall_base_bot,
        dark: None,
        gap: None,
    };
    for g in [&mut top, &mut bottom] {
        // The draws happen unconditionally so the stream layout is stable
        // regardless of which segments activate.
        let dark_active = rng.gen_range(0.0..1.0) < config.dark_prob;
        let dark_x0 = rng.gen_range(0..w);
        let dark_len = uniform_len(rng, config.dark_len).max(1);
        let attenuation = uniform_in(rng, config.dark_attenuation);
        g.dark = dark_active.then_some((dark_x0, (dark_x0 + dark_len).min(w), attenuation));
        let gap_active = rng.gen_range(0.0..1.0) < config.gap_prob;
        let gap_x0 = rng.gen_range(0..w);
        let gap_len = uniform_len(rng, config.gap_len).max(1);
        g.gap = gap_active.then_some((gap_x0, (gap_x0 + gap_len).min(w)));
    }

    let mut image = vec![0.0f32; h * w];
    let mut mask = vec![0u8; h * w];
    for x in 0..w {
        let wave = amplitude * (TAU * x as f64 / wavelength + phase).sin();
        let top_c = top.center + wave;
        let bot_c = bottom.center + wave;
        let lumen_lo = top_c + top.thickness / 2.0;
        let lumen_hi = bot_c - bottom.thickness / 2.0;
        for y in 0..h {
            let yy = y as f64;
            let (value, is_wall) = if (yy - top_c).abs() <= top.thickness / 2.0 {
                (wall_column_value(&top, x, background_value), true)
            } else if (yy - bot_c).abs() <= bottom.thickness / 2.0 {
                (wall_column_value(&bottom, x, background_value), true)
            } else if yy > lumen_lo && yy < lumen_hi {
                (lumen_value, false)
            } else {
                (background_value, false)
            };
            image[y * w + x] = value as f32;
            if is_wall {
                mask[y * w + x] = 1;
            }
        }
    }

    if config.speckle_sigma > 0.0 {
        for v in image.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = ((*v as f64) * (1.0 + config.speckle_sigma * z)).clamp(0.0, 1.0) as f32;
        }
    } else {
        for v in image.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    Sample {
        id: format!("synth_{index:06}"),
        image: Image::new(h, w, image),
        mask: LabelMap::new(vec![h, w], mask).expect("mask shape"),
    }
}

/// Wall intensity in one column after dark/gap corruption. The mask is
/// decided before corruption, so gaps keep their wall label.
fn wall_column_value(wall: &WallGeometry, x: usize, background: f64) -> f64 {
    if let Some((a, b)) = wall.gap {
        if x >= a && x < b {
            return background;
        }
    }
    if let Some((a, b, attenuation)) = wall.dark {
        if x >= a && x < b {
            return wall.intensity * attenuation;
        }
    }
    wall.intensity
}
