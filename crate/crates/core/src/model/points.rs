//! Uncertainty margins and point selection.

use crate::tensor::{invalid, Element, Result, Tensor};

/// Confidence margin of one pixel's class scores: top-1 minus top-2.
///
/// Smaller means more uncertain; adding a constant to every score leaves
/// the margin unchanged, as does permuting the scores.
pub fn uncertainty<E: Element>(scores: &[E]) -> E {
    debug_assert!(scores.len() >= 2);
    let mut top1 = E::neg_infinity();
    let mut top2 = E::neg_infinity();
    for &s in scores {
        if s > top1 {
            top2 = top1;
            top1 = s;
        } else if s > top2 {
            top2 = s;
        }
    }
    top1 - top2
}

/// Per-pixel margin maps, one `H*W` vector per image, from `[N, C, H, W]`.
pub fn margin_map<E: Element>(logits: &Tensor<E>) -> Result<Vec<Vec<f64>>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] < 2 {
        return Err(invalid(
            "margin_map",
            format!("expected [N, C>=2, H, W], got {s:?}"),
        ));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let xs = logits.read();
    Ok((0..n)
        .map(|ni| {
            (0..hw)
                .map(|l| {
                    let mut top1 = f64::NEG_INFINITY;
                    let mut top2 = f64::NEG_INFINITY;
                    for chan in 0..c {
                        let v = xs[(ni * c + chan) * hw + l].into_f64();
                        if v > top1 {
                            top2 = top1;
                            top1 = v;
                        } else if v > top2 {
                            top2 = v;
                        }
                    }
                    top1 - top2
                })
                .collect()
        })
        .collect())
}

/// The selected uncertain points of a batch.
///
/// Coordinates are normalized pixel centers, one list per image, ordered by
/// ascending margin (most uncertain first) with ties broken by row-major
/// pixel order.
#[derive(Debug, Clone)]
pub struct SelectedPoints {
    pub coords: Vec<Vec<(f64, f64)>>,
    pub margins: Vec<Vec<f64>>,
    /// Row-major pixel indices, aligned with `coords`.
    pub pixel_indices: Vec<Vec<usize>>,
}

/// Selects the `p` smallest-margin pixels per image of `[N, C, H, W]`.
pub fn select_points<E: Element>(logit_map: &Tensor<E>, p: usize) -> Result<SelectedPoints> {
    let s = logit_map.shape();
    if s.len() != 4 {
        return Err(invalid("select_points", format!("expected 4-d logits, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    if p > h * w {
        return Err(invalid(
            "select_points",
            format!("cannot select {p} points from {h}x{w} = {} pixels", h * w),
        ));
    }
    let margins = margin_map(logit_map)?;
    let mut coords = Vec::with_capacity(margins.len());
    let mut kept_margins = Vec::with_capacity(margins.len());
    let mut pixel_indices = Vec::with_capacity(margins.len());
    for per_image in &margins {
        let mut order: Vec<usize> = (0..per_image.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            per_image[a]
                .total_cmp(&per_image[b])
                .then(a.cmp(&b))
        });
        order.truncate(p);
        coords.push(
            order
                .iter()
                .map(|&idx| {
                    let (y, x) = (idx / w, idx % w);
                    ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64)
                })
                .collect(),
        );
        kept_margins.push(order.iter().map(|&idx| per_image[idx]).collect());
        pixel_indices.push(order);
    }
    Ok(SelectedPoints {
        coords,
        margins: kept_margins,
        pixel_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncertainty_worked_examples() {
        assert!((uncertainty(&[0.7f64, 0.2, 0.1]) - 0.5).abs() < 1e-15);
        assert_eq!(uncertainty(&[0.5f64, 0.5]), 0.0);
        // Permutation invariance.
        let base = [0.1f64, 0.6, 0.3];
        let perms = [[0.1, 0.6, 0.3], [0.6, 0.3, 0.1], [0.3, 0.1, 0.6]];
        for p in perms {
            assert_eq!(uncertainty(&p), uncertainty(&base));
        }
    }

    #[test]
    fn select_uniform_ties_row_major() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 2, 3]);
        let sel = select_points(&logits, 3).unwrap();
        assert_eq!(sel.pixel_indices[0], vec![0, 1, 2]);
    }

    #[test]
    fn select_rejects_oversized_p() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        assert!(select_points(&logits, 5).is_err());
    }
}
