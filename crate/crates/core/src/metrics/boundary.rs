//! Boundary IoU on exact Euclidean distance transforms.
//!
//! The boundary band of a binary mask is the mask minus its erosion by a
//! disk of radius `d`: every mask pixel whose exact Euclidean distance to
//! the nearest background pixel is at most `d`. The frame exterior counts
//! as background, so a full-frame mask still has a band along the border.
//! Distances are squared-integer exact, so band membership is a precise
//! `dist^2 <= d^2` test with no rounding ambiguity.

use super::MetricError;
use crate::labels::LabelMap;

const INF: f64 = 1e18;

/// One-dimensional squared distance transform (lower envelope of
/// parabolas), the standard two-pass building block.
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    let mut k = 0usize;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = INF;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        out[q] = (q as f64 - p as f64) * (q as f64 - p as f64) + f[p];
    }
}

/// Squared Euclidean distance from every pixel to the nearest pixel that
/// is NOT of class `foreground` — with the frame exterior treated as
/// background. Background pixels get 0.
pub fn distance_sq_to_background(mask: &LabelMap, foreground: u8) -> Vec<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    // Pad with a one-pixel background ring so the exterior is a source.
    let (ph, pw) = (h + 2, w + 2);
    let mut grid = vec![0.0f64; ph * pw];
    for y in 0..h {
        for x in 0..w {
            grid[(y + 1) * pw + (x + 1)] = if mask.at2(y, x) == foreground { INF } else { 0.0 };
        }
    }
    let maxdim = ph.max(pw);
    let mut col = vec![0.0; maxdim];
    let mut out1 = vec![0.0; maxdim];
    let mut v = vec![0usize; maxdim];
    let mut z = vec![0.0; maxdim + 1];
    // Columns.
    for x in 0..pw {
        for y in 0..ph {
            col[y] = grid[y * pw + x];
        }
        dt_1d(&col[..ph], &mut out1[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = out1[y];
        }
    }
    // Rows.
    for y in 0..ph {
        col[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        dt_1d(&col[..pw], &mut out1[..pw], &mut v, &mut z);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&out1[..pw]);
    }
    // Crop the padding ring.
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&grid[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
    }
    out
}

/// Boundary band membership: mask pixels within distance `d` of background.
pub fn boundary_band(mask: &LabelMap, d: f64) -> Vec<bool> {
    let dist = distance_sq_to_background(mask, 1);
    let d_sq = d * d;
    mask.data()
        .iter()
        .zip(dist)
        .map(|(&m, ds)| m == 1 && ds <= d_sq)
        .collect()
}

/// Boundary IoU of two binary masks with band width `d` (pixels, >= 1).
///
/// Both bands empty scores 1; one empty band against a non-empty one
/// scores 0.
pub fn biou(pred: &LabelMap, gt: &LabelMap, d: f64) -> Result<f64, MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    if pred.shape().len() != 2 {
        return Err(MetricError::InvalidArgument(format!(
            "biou expects [H, W] masks, got {:?}",
            pred.shape()
        )));
    }
    if d < 1.0 {
        return Err(MetricError::InvalidArgument(format!(
            "boundary width d must be >= 1 pixel, got {d}"
        )));
    }
    for m in [pred, gt] {
        if let Some(&v) = m.data().iter().find(|&&v| v > 1) {
            return Err(MetricError::NotBinary { value: v });
        }
    }
    let bp = boundary_band(pred, d);
    let bg = boundary_band(gt, d);
    let mut inter = 0u64;
    let mut union = 0u64;
    for (p, g) in bp.iter().zip(&bg) {
        if *p && *g {
            inter += 1;
        }
        if *p || *g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Default band width: 2% of the image diagonal, at least 1 pixel.
pub fn default_band_width(h: usize, w: usize) -> f64 {
    (0.02 * ((h * h + w * w) as f64).sqrt()).max(1.0)
}
