//! Checkpoint serialization.
//!
//! Layout: magic bytes `BDN1`, format version `u16` little-endian, a
//! length-prefixed (`u32` LE) UTF-8 config block of `key = value` lines,
//! then a sequence of named tensors: name length `u16` LE, name bytes,
//! rank `u8`, extents as `u32` LE, raw 32-bit LE floats. Learnable
//! parameters come first, batch-norm running statistics after, both in the
//! model's fixed collection order, so save -> load -> save is byte-stable.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{BdNet, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BDN1";
const VERSION: u16 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic([u8; 4]),
    UnsupportedVersion(u16),
    Corrupt(String),
    Config(String),
    TensorMismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o: {e}"),
            CheckpointError::BadMagic(m) => write!(f, "unknown checkpoint magic {m:?}"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Corrupt(d) => write!(f, "corrupt checkpoint: {d}"),
            CheckpointError::Config(d) => write!(f, "bad checkpoint config: {d}"),
            CheckpointError::TensorMismatch(d) => write!(f, "checkpoint tensors: {d}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Save/load entry points for `f32` models.
pub struct Checkpoint;

impl Checkpoint {
    pub fn save(model: &BdNet<f32>, path: &Path) -> Result<()> {
        let bytes = Self::to_bytes(model);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_bytes(model: &BdNet<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = encode_config(model.config());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        for (name, tensor) in model.parameters().into_iter().chain(model.state_buffers()) {
            write_tensor(&mut out, &name, &tensor);
        }
        out
    }

    pub fn load(path: &Path) -> Result<BdNet<f32>> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BdNet<f32>> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic([
                magic[0], magic[1], magic[2], magic[3],
            ]));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|e| CheckpointError::Config(format!("config block not UTF-8: {e}")))?;
        let config = decode_config(config_text)?;
        let model = BdNet::<f32>::new(config, 0)
            .map_err(|e| CheckpointError::Config(format!("invalid config: {e}")))?;

        let mut expected: std::collections::HashMap<String, Tensor<f32>> = model
            .parameters()
            .into_iter()
            .chain(model.state_buffers())
            .collect();
        while !r.done() {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let tensor = expected.remove(&name).ok_or_else(|| {
                CheckpointError::TensorMismatch(format!("unexpected tensor {name}"))
            })?;
            if tensor.shape() != shape.as_slice() {
                return Err(CheckpointError::TensorMismatch(format!(
                    "{name}: shape {:?} in file, {:?} in model",
                    shape,
                    tensor.shape()
                )));
            }
            tensor.update_data(|dst| {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap());
                }
            });
        }
        if let Some(name) = expected.keys().next() {
            return Err(CheckpointError::TensorMismatch(format!(
                "missing tensor {name} (and possibly others)"
            )));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(tensor.shape().len() as u8);
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in tensor.read().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn csv(values: impl IntoIterator<Item = usize>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn encode_config(c: &ModelConfig) -> String {
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "num_classes = {}", c.num_classes);
    let _ = writeln!(s, "stage_channels = {}", csv(c.stage_channels.iter().copied()));
    let _ = writeln!(s, "embed_channels = {}", c.embed_channels);
    let _ = writeln!(s, "expand_ratio = {}", c.expand_ratio);
    let _ = writeln!(s, "kernel_size = {}", c.kernel_size);
    let _ = writeln!(s, "fusion_channels = {}", c.fusion_channels);
    let _ = writeln!(s, "psp_bins = {}", csv(c.psp_bins.iter().copied()));
    let _ = writeln!(s, "psp_channels = {}", c.psp_channels);
    let _ = writeln!(s, "head_hidden = {}", c.head_hidden);
    let _ = writeln!(s, "num_points = {}", c.num_points);
    let _ = writeln!(s, "height = {}", c.height);
    let _ = writeln!(s, "width = {}", c.width);
    let _ = writeln!(s, "multiscale = {}", c.multiscale);
    let _ = writeln!(s, "psp = {}", c.psp);
    let _ = writeln!(s, "refine = {}", c.refine);
    s
}

fn decode_config(text: &str) -> Result<ModelConfig> {
    let mut c = ModelConfig::default();
    let bad = |k: &str, v: &str| CheckpointError::Config(format!("bad value for {k}: {v}"));
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Config(format!("not a key = value line: {line}")))?;
        let (key, value) = (key.trim(), value.trim());
        let parse = |v: &str| v.parse::<usize>().map_err(|_| bad(key, v));
        let parse_bool = |v: &str| v.parse::<bool>().map_err(|_| bad(key, v));
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad(key, v)))
                .collect()
        };
        match key {
            "num_classes" => c.num_classes = parse(value)?,
            "stage_channels" => {
                let list = parse_list(value)?;
                if list.len() != 5 {
                    return Err(bad(key, value));
                }
                c.stage_channels = [list[0], list[1], list[2], list[3], list[4]];
            }
            "embed_channels" => c.embed_channels = parse(value)?,
            "expand_ratio" => c.expand_ratio = parse(value)?,
            "kernel_size" => c.kernel_size = parse(value)?,
            "fusion_channels" => c.fusion_channels = parse(value)?,
            "psp_bins" => c.psp_bins = parse_list(value)?,
            "psp_channels" => c.psp_channels = parse(value)?,
            "head_hidden" => c.head_hidden = parse(value)?,
            "num_points" => c.num_points = parse(value)?,
            "height" => c.height = parse(value)?,
            "width" => c.width = parse(value)?,
            "multiscale" => c.multiscale = parse_bool(value)?,
            "psp" => c.psp = parse_bool(value)?,
            "refine" => c.refine = parse_bool(value)?,
            _ => return Err(CheckpointError::Config(format!("unknown key {key}"))),
        }
    }
    Ok(c)
}
