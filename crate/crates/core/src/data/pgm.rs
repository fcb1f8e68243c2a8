//! Binary PGM (P5, maxval 255) reading and writing.
//!
//! Images quantize to `u8` with round-half-up on write and rescale to
//! `[0, 1]` on read. Masks store raw class indices, so a mask round-trip
//! is lossless. Parse errors carry the byte position.

use std::fs;
use std::path::Path;

use super::{DataError, Image};
use crate::labels::LabelMap;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn encode_header(width: usize, height: usize) -> Vec<u8> {
    format!("P5\n{width} {height}\n255\n").into_bytes()
}

/// Writes a grayscale image; values are clamped to `[0, 1]` and quantized
/// with round-half-up.
pub fn write_image_pgm(path: &Path, image: &Image) -> Result<(), DataError> {
    let mut bytes = encode_header(image.width, image.height);
    bytes.extend(
        image
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
    );
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes a `[H, W]` mask as raw class indices.
pub fn write_mask_pgm(path: &Path, mask: &LabelMap) -> Result<(), DataError> {
    assert_eq!(mask.shape().len(), 2, "mask PGM expects a [H, W] map");
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut bytes = encode_header(w, h);
    bytes.extend_from_slice(mask.data());
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_image_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, raw) = parse_pgm(&bytes)?;
    Ok(Image::new(
        h,
        w,
        raw.iter().map(|&b| b as f32 / 255.0).collect(),
    ))
}

pub fn read_mask_pgm(path: &Path) -> Result<LabelMap, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, raw) = parse_pgm(&bytes)?;
    Ok(LabelMap::new(vec![h, w], raw.to_vec()).expect("parse_pgm sizes the payload"))
}

/// Parses a binary PGM, returning `(width, height, payload)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8]), DataError> {
    let err = |pos: usize, detail: &str| DataError::PgmParse {
        pos,
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(err(0, "expected magic 'P5'"));
    }
    let mut at = 2usize;

    // Each token reports its own start position for error messages.
    let next_token = |at: &mut usize| -> Result<(usize, usize), DataError> {
        // Skip whitespace and '#' comment lines.
        loop {
            match bytes.get(*at) {
                Some(b) if b.is_ascii_whitespace() => *at += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(*at) {
                        *at += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = *at;
        while bytes.get(*at).is_some_and(|b| b.is_ascii_digit()) {
            *at += 1;
        }
        if start == *at {
            return Err(err(start, "expected a decimal integer"));
        }
        std::str::from_utf8(&bytes[start..*at])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .map(|v| (v, start))
            .ok_or_else(|| err(start, "integer out of range"))
    };

    let (width, _) = next_token(&mut at)?;
    let (height, _) = next_token(&mut at)?;
    let (maxval, maxval_pos) = next_token(&mut at)?;
    if maxval != 255 {
        return Err(err(maxval_pos, "maxval must be 255"));
    }
    match bytes.get(at) {
        Some(b) if b.is_ascii_whitespace() => at += 1,
        _ => return Err(err(at, "expected single whitespace before payload")),
    }
    if width == 0 || height == 0 {
        return Err(err(2, "extents must be positive"));
    }
    let need = width * height;
    if bytes.len() - at < need {
        return Err(err(at, "payload shorter than width * height"));
    }
    if bytes.len() - at > need {
        return Err(err(at + need, "trailing bytes after payload"));
    }
    Ok((width, height, &bytes[at..at + need]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn mask_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = LabelMap::new(vec![3, 5], vec![0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 0, 0, 1, 0])
            .unwrap();
        write_mask_pgm(&path, &mask).unwrap();
        let back = read_mask_pgm(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn image_round_trip_error_bounded_by_quantization() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("i.pgm");
        let data: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
        let image = Image::new(8, 8, data.clone());
        write_image_pgm(&path, &image).unwrap();
        let back = read_image_pgm(&path).unwrap();
        for (a, b) in back.data.iter().zip(&data) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }

    #[test]
    fn rejects_wrong_maxval_with_position() {
        let bytes = b"P5\n2 2\n65535\n\0\0\0\0";
        match parse_pgm(bytes) {
            Err(DataError::PgmParse { pos, detail }) => {
                assert_eq!(pos, 7);
                assert!(detail.contains("maxval"));
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_headers() {
        assert!(parse_pgm(b"P4\n2 2\n255\n\0\0\0\0").is_err());
        assert!(parse_pgm(b"P5\n2\n255\n\0\0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0\0\0").is_err()); // short payload
        assert!(parse_pgm(b"P5\n2 2\n255\n\0\0\0\0\0").is_err()); // long payload
    }

    #[test]
    fn accepts_comments_in_header() {
        let bytes = b"P5\n# generated\n2 1\n255\n\x10\x20";
        let (w, h, raw) = parse_pgm(bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(raw, &[0x10, 0x20]);
    }
}
