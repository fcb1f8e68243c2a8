//! Evaluation metrics: Dice, mean IoU, Boundary IoU and the
//! separable-convolution parameter ratio, plus report serialization.

mod boundary;
mod report;

pub use boundary::{biou, boundary_band, distance_sq_to_background};
pub use report::{to_csv, to_jsonl, ImageRecord, MetricReport};

use std::fmt;

use crate::labels::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricError {
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    ValueOutOfRange { value: u8, classes: usize },
    NotBinary { value: u8 },
    InvalidArgument(String),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::ShapeMismatch { left, right } => {
                write!(f, "mask shapes differ: {left:?} vs {right:?}")
            }
            MetricError::ValueOutOfRange { value, classes } => {
                write!(f, "mask value {value} outside [0, {classes})")
            }
            MetricError::NotBinary { value } => {
                write!(f, "expected a binary mask, found value {value}")
            }
            MetricError::InvalidArgument(d) => write!(f, "{d}"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Per-class pixel counts of one-vs-rest confusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// One-vs-rest confusion counts for every class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
}

impl ConfusionCounts {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            per_class: vec![ClassCounts::default(); num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Accumulates another confusion matrix (e.g. across a split).
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.per_class.len(), other.per_class.len());
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
    }
}

/// Exact one-vs-rest confusion counts between two same-shape masks.
pub fn confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
) -> Result<ConfusionCounts, MetricError> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let mut counts = ConfusionCounts::zeros(num_classes);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        for (v, name) in [(p, "pred"), (g, "gt")] {
            if v as usize >= num_classes {
                let _ = name;
                return Err(MetricError::ValueOutOfRange {
                    value: v,
                    classes: num_classes,
                });
            }
        }
        for (c, cc) in counts.per_class.iter_mut().enumerate() {
            let c = c as u8;
            match (p == c, g == c) {
                (true, true) => cc.tp += 1,
                (true, false) => cc.fp += 1,
                (false, true) => cc.fn_ += 1,
                (false, false) => cc.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// Dice overlap of one class: `2TP / (2TP + FN + FP)`; 1 when both masks
/// are empty for the class.
pub fn dice(counts: &ConfusionCounts, class: usize) -> f64 {
    let c = &counts.per_class[class];
    let denom = 2 * c.tp + c.fn_ + c.fp;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// Per-class IoU: `TP / (TP + FN + FP)`; 1 when the class is absent from
/// both masks.
pub fn class_iou(counts: &ConfusionCounts, class: usize) -> f64 {
    let c = &counts.per_class[class];
    let denom = c.tp + c.fn_ + c.fp;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// Unweighted mean of the per-class IoUs over all `k + 1` classes.
pub fn miou(counts: &ConfusionCounts) -> f64 {
    let n = counts.num_classes();
    (0..n).map(|c| class_iou(counts, c)).sum::<f64>() / n as f64
}

/// Parameter ratio of a depthwise-separable factorization against the
/// conventional convolution it replaces (bias-free):
/// `(Ci*K^2 + Co*Ci) / (Co*Ci*K^2) = 1/Co + 1/K^2`.
pub fn dsconv_ratio(ci: usize, co: usize, k: usize) -> f64 {
    assert!(ci >= 1 && co >= 1 && k >= 1);
    let enumerated = (ci * k * k + co * ci) as f64 / (co * ci * k * k) as f64;
    let closed = 1.0 / co as f64 + 1.0 / (k * k) as f64;
    assert!(
        (enumerated - closed).abs() <= 1e-12,
        "parameter-ratio identity violated: {enumerated} vs {closed}"
    );
    enumerated
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map2(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(vec![h, w], data).unwrap()
    }

    #[test]
    fn confusion_identical_masks() {
        let m = map2(2, 2, vec![0, 1, 1, 0]);
        let c = confusion(&m, &m, 2).unwrap();
        for cc in &c.per_class {
            assert_eq!(cc.fp, 0);
            assert_eq!(cc.fn_, 0);
            assert_eq!(cc.tp + cc.tn, 4);
        }
    }

    #[test]
    fn confusion_complementary_masks() {
        let a = map2(2, 2, vec![0, 0, 0, 0]);
        let b = map2(2, 2, vec![1, 1, 1, 1]);
        let c = confusion(&a, &b, 2).unwrap();
        assert_eq!(c.per_class[0].tp, 0);
        assert_eq!(c.per_class[1].tp, 0);
    }

    #[test]
    fn confusion_tally_oracle_4x4() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pred: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
            let gt: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3)).collect();
            let c = confusion(&map2(4, 4, pred.clone()), &map2(4, 4, gt.clone()), 3).unwrap();
            for class in 0..3u8 {
                let mut want = ClassCounts::default();
                for (&p, &g) in pred.iter().zip(&gt) {
                    match (p == class, g == class) {
                        (true, true) => want.tp += 1,
                        (true, false) => want.fp += 1,
                        (false, true) => want.fn_ += 1,
                        (false, false) => want.tn += 1,
                    }
                }
                assert_eq!(c.per_class[class as usize], want);
            }
        }
    }

    #[test]
    fn confusion_rejects_bad_inputs() {
        let a = map2(2, 2, vec![0, 0, 0, 0]);
        let b = map2(1, 4, vec![0, 0, 0, 0]);
        assert!(confusion(&a, &b, 2).is_err());
        let c = map2(2, 2, vec![0, 0, 0, 5]);
        assert!(confusion(&a, &c, 2).is_err());
    }

    #[test]
    fn dice_worked_examples() {
        let perfect = map2(2, 2, vec![1, 1, 0, 0]);
        let c = confusion(&perfect, &perfect, 2).unwrap();
        assert_eq!(dice(&c, 1), 1.0);

        let a = map2(2, 2, vec![1, 1, 0, 0]);
        let b = map2(2, 2, vec![0, 0, 1, 1]);
        let c = confusion(&a, &b, 2).unwrap();
        assert_eq!(dice(&c, 1), 0.0);

        // TP = 3, FP = 1, FN = 2 -> 6/9. Set-counting oracle: |A| = 4,
        // |B| = 5, |A intersect B| = 3 -> 2*3 / (4 + 5).
        let pred = map2(3, 3, vec![1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let gt = map2(3, 3, vec![1, 1, 1, 0, 1, 1, 0, 0, 0]);
        let c = confusion(&pred, &gt, 2).unwrap();
        assert_eq!(c.per_class[1].tp, 3);
        assert_eq!(c.per_class[1].fp, 1);
        assert_eq!(c.per_class[1].fn_, 2);
        assert!((dice(&c, 1) - 6.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn miou_counting_oracle() {
        // Foreground IoU 0.5 and background IoU 0.8 -> mean 0.65.
        // fg: TP=4, FP+FN=4; bg: TP=16, FP+FN=4. Build 5x5-ish counts directly.
        let counts = ConfusionCounts {
            per_class: vec![
                ClassCounts { tp: 16, fp: 2, fn_: 2, tn: 4 },
                ClassCounts { tp: 4, fp: 2, fn_: 2, tn: 16 },
            ],
        };
        assert!((miou(&counts) - 0.65).abs() < 1e-15);
    }

    #[test]
    fn miou_invariant_to_class_permutation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let pred: Vec<u8> = (0..36).map(|_| rng.gen_range(0..3)).collect();
        let gt: Vec<u8> = (0..36).map(|_| rng.gen_range(0..3)).collect();
        let base = miou(&confusion(&map2(6, 6, pred.clone()), &map2(6, 6, gt.clone()), 3).unwrap());
        let perm = [2u8, 0, 1];
        let p2: Vec<u8> = pred.iter().map(|&v| perm[v as usize]).collect();
        let g2: Vec<u8> = gt.iter().map(|&v| perm[v as usize]).collect();
        let permuted = miou(&confusion(&map2(6, 6, p2), &map2(6, 6, g2), 3).unwrap());
        assert!((base - permuted).abs() < 1e-15);
    }

    #[test]
    fn dsconv_ratio_worked_examples() {
        let r = dsconv_ratio(16, 32, 3);
        assert!((r - (1.0 / 32.0 + 1.0 / 9.0)).abs() < 1e-12);
        assert!((r - 656.0 / 4608.0).abs() < 1e-12);
        assert!((dsconv_ratio(7, 5, 1) - (1.0 / 5.0 + 1.0)).abs() < 1e-12);
        assert!((dsconv_ratio(7, 1, 3) - (1.0 + 1.0 / 9.0)).abs() < 1e-12);
    }
}
