//! Corpus layout on disk and the train/val split.
//!
//! Layout: `<root>/images/<id>.pgm`, `<root>/masks/<id>.pgm` and
//! `<root>/manifest.tsv` with one `id<TAB>split<TAB>config-hash` line per
//! sample. Everything written here is bit-exact across platforms.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{DataError, Sample, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(DataError::Manifest(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub config_hash: String,
}

/// Deterministic shuffle then partition with `round(n * a / (a + b))`
/// training elements: disjoint, exhaustive, within one sample of the ratio.
pub fn split<T>(items: Vec<T>, ratio: (usize, usize), seed: u64) -> Result<(Vec<T>, Vec<T>), DataError> {
    if items.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(DataError::InvalidConfig(
            "split ratio parts must be positive".into(),
        ));
    }
    let n = items.len();
    let denom = ratio.0 + ratio.1;
    let n_train = ((n * ratio.0 + denom / 2) / denom).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let picked: std::collections::HashSet<usize> = order[..n_train].iter().copied().collect();
    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n - n_train);
    for (i, item) in items.into_iter().enumerate() {
        if picked.contains(&i) {
            train.push(item);
        } else {
            val.push(item);
        }
    }
    Ok((train, val))
}

/// Canonical `key = value` rendering of the generator config; the manifest
/// hash is the SHA-256 of this text.
pub fn encode_synth_config(c: &SynthConfig) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let _ = writeln!(s, "height = {}", c.height);
    let _ = writeln!(s, "width = {}", c.width);
    let _ = writeln!(s, "wall_thickness = {},{}", c.wall_thickness.0, c.wall_thickness.1);
    let _ = writeln!(s, "wall_separation = {},{}", c.wall_separation.0, c.wall_separation.1);
    let _ = writeln!(s, "wall_intensity = {},{}", c.wall_intensity.0, c.wall_intensity.1);
    let _ = writeln!(s, "lumen_intensity = {},{}", c.lumen_intensity.0, c.lumen_intensity.1);
    let _ = writeln!(
        s,
        "background_intensity = {},{}",
        c.background_intensity.0, c.background_intensity.1
    );
    let _ = writeln!(s, "speckle_sigma = {}", c.speckle_sigma);
    let _ = writeln!(s, "dark_prob = {}", c.dark_prob);
    let _ = writeln!(s, "dark_len = {},{}", c.dark_len.0, c.dark_len.1);
    let _ = writeln!(s, "dark_attenuation = {},{}", c.dark_attenuation.0, c.dark_attenuation.1);
    let _ = writeln!(s, "gap_prob = {}", c.gap_prob);
    let _ = writeln!(s, "gap_len = {},{}", c.gap_len.0, c.gap_len.1);
    let _ = writeln!(
        s,
        "waviness_amplitude = {},{}",
        c.waviness_amplitude.0, c.waviness_amplitude.1
    );
    let _ = writeln!(
        s,
        "waviness_wavelength = {},{}",
        c.waviness_wavelength.0, c.waviness_wavelength.1
    );
    let _ = writeln!(s, "seed = {}", c.seed);
    s
}

pub fn config_hash(c: &SynthConfig) -> String {
    let digest = Sha256::digest(encode_synth_config(c).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes images, masks and the manifest under `root`.
pub fn write_corpus(
    root: &Path,
    train: &[Sample],
    val: &[Sample],
    config: &SynthConfig,
) -> Result<(), DataError> {
    let hash = config_hash(config);
    let mut manifest = String::new();
    for (samples, split) in [(train, Split::Train), (val, Split::Val)] {
        for s in samples {
            super::write_image_pgm(&root.join("images").join(format!("{}.pgm", s.id)), &s.image)?;
            super::write_mask_pgm(&root.join("masks").join(format!("{}.pgm", s.id)), &s.mask)?;
            manifest.push_str(&format!("{}\t{}\t{}\n", s.id, split.as_str(), hash));
        }
    }
    fs::write(root.join("manifest.tsv"), manifest).map_err(|e| DataError::Io {
        path: root.join("manifest.tsv").display().to_string(),
        source: e,
    })
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let path = root.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (id, split, hash) = (parts.next(), parts.next(), parts.next());
        match (id, split, hash) {
            (Some(id), Some(split), Some(hash)) => entries.push(ManifestEntry {
                id: id.to_string(),
                split: Split::parse(split)?,
                config_hash: hash.to_string(),
            }),
            _ => {
                return Err(DataError::Manifest(format!(
                    "line {}: expected id<TAB>split<TAB>hash",
                    lineno + 1
                )))
            }
        }
    }
    if entries.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(entries)
}

pub fn load_sample(root: &Path, id: &str) -> Result<Sample, DataError> {
    let image = super::read_image_pgm(&root.join("images").join(format!("{id}.pgm")))?;
    let mask = super::read_mask_pgm(&root.join("masks").join(format!("{id}.pgm")))?;
    Ok(Sample {
        id: id.to_string(),
        image,
        mask,
    })
}
