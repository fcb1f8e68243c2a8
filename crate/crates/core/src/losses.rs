//! Loss terms and their staged combination.
//!
//! Three terms drive training: cross entropy over the full mask, cross
//! entropy over the refined point set, and the lovász-softmax relaxation of
//! the Jaccard loss. The combination is strictly piecewise in the stage
//! switch `alpha`: `alpha = 1` trains with mask CE plus point CE (early
//! stage), `alpha = 0` with mask CE plus lovász-softmax (finetune). No
//! other blend exists.

use std::sync::Arc;

use crate::labels::LabelMap;
use crate::model::Prediction;
use crate::tensor::{CustomGrad, Element, Tensor, TensorError};

/// Loss configuration; `alpha` only ever takes 0 or 1.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha: u8,
    pub class_average: ClassAverage,
    pub ignore_label: Option<u8>,
}

/// Which classes the lovász term averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassAverage {
    /// Per image, only classes present in the ground truth (default).
    ClassesPresent,
    /// All classes, absent ones included.
    AllClasses,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1,
            class_average: ClassAverage::ClassesPresent,
            ignore_label: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.alpha > 1 {
            return Err(LossError::InvalidAlpha(self.alpha));
        }
        Ok(())
    }

    pub fn with_alpha(&self, alpha: u8) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// `alpha` outside {0, 1}.
    InvalidAlpha(u8),
    /// A label value is outside `[0, C)` and is not the ignore label.
    LabelOutOfRange { label: u8, classes: usize },
    /// Logits/labels shapes disagree.
    ShapeMismatch { detail: String },
    /// lovász-softmax received probabilities whose channel sums stray from 1.
    NotNormalized { worst: f64 },
    /// `alpha = 1` requires point logits and point labels on the prediction.
    MissingPoints,
    /// Every location was ignored; the mean is undefined.
    EmptySupport,
    Tensor(TensorError),
}

impl std::fmt::Display for LossError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossError::InvalidAlpha(a) => write!(f, "alpha must be 0 or 1, got {a}"),
            LossError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} outside [0, {classes})")
            }
            LossError::ShapeMismatch { detail } => write!(f, "{detail}"),
            LossError::NotNormalized { worst } => {
                write!(f, "probabilities not normalized: worst channel sum error {worst}")
            }
            LossError::MissingPoints => {
                write!(f, "alpha = 1 requires point logits and point labels")
            }
            LossError::EmptySupport => write!(f, "no non-ignored locations to average over"),
            LossError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

fn check_label_shapes<E: Element>(
    op: &str,
    logits: &Tensor<E>,
    labels: &LabelMap,
) -> Result<(usize, usize, usize), LossError> {
    let s = logits.shape();
    if s.len() < 2 {
        return Err(LossError::ShapeMismatch {
            detail: format!("{op}: logits must be [N, C, ...], got {s:?}"),
        });
    }
    let (n, c) = (s[0], s[1]);
    let loc: usize = s[2..].iter().product();
    let mut want = vec![n];
    want.extend_from_slice(&s[2..]);
    if labels.shape() != want.as_slice() {
        return Err(LossError::ShapeMismatch {
            detail: format!(
                "{op}: labels shape {:?} does not match logits {s:?}",
                labels.shape()
            ),
        });
    }
    Ok((n, c, loc))
}

struct CrossEntropyBackward<E: Element> {
    logits: Tensor<E>,
    softmax: Vec<E>,
    labels: LabelMap,
    ignore: Option<u8>,
    count: usize,
}

impl<E: Element> CustomGrad<E> for CrossEntropyBackward<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.logits.clone()]
    }

    fn vjp(&self, upstream: &[E]) -> Vec<Option<Vec<E>>> {
        let s = self.logits.shape();
        let (n, c) = (s[0], s[1]);
        let loc: usize = s[2..].iter().product();
        let scale = upstream[0] * E::from_f64(1.0 / self.count as f64);
        let lab = self.labels.data();
        let mut dx = vec![E::zero(); self.logits.numel()];
        for ni in 0..n {
            for l in 0..loc {
                let y = lab[ni * loc + l];
                if Some(y) == self.ignore {
                    continue;
                }
                for chan in 0..c {
                    let at = (ni * c + chan) * loc + l;
                    let onehot = if chan as u8 == y { E::one() } else { E::zero() };
                    dx[at] = (self.softmax[at] - onehot) * scale;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Mean over non-ignored locations of the negative log softmax probability
/// of the true class. `logits` is `[N, C, ...]`, `labels` is `[N, ...]`.
pub fn cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &LabelMap,
    ignore: Option<u8>,
) -> Result<Tensor<E>, LossError> {
    let (n, c, loc) = check_label_shapes("cross_entropy", logits, labels)?;
    for &y in labels.data() {
        if (y as usize) >= c && Some(y) != ignore {
            return Err(LossError::LabelOutOfRange { label: y, classes: c });
        }
    }

    let xs = logits.read();
    let mut softmax = vec![E::zero(); logits.numel()];
    let mut total = 0.0f64;
    let mut count = 0usize;
    let lab = labels.data();
    for ni in 0..n {
        for l in 0..loc {
            let mut max = xs[(ni * c) * loc + l];
            for chan in 1..c {
                max = max.max(xs[(ni * c + chan) * loc + l]);
            }
            let mut denom = E::zero();
            for chan in 0..c {
                let e = (xs[(ni * c + chan) * loc + l] - max).exp();
                softmax[(ni * c + chan) * loc + l] = e;
                denom = denom + e;
            }
            let inv = E::one() / denom;
            for chan in 0..c {
                let at = (ni * c + chan) * loc + l;
                softmax[at] = softmax[at] * inv;
            }
            let y = lab[ni * loc + l];
            if Some(y) == ignore {
                continue;
            }
            // -log p = log(sum exp(x - max)) - (x_y - max), all finite.
            let x_y = xs[(ni * c + y as usize) * loc + l];
            total += denom.into_f64().ln() - (x_y - max).into_f64();
            count += 1;
        }
    }
    drop(xs);
    if count == 0 {
        return Err(LossError::EmptySupport);
    }
    let value = E::from_f64(total / count as f64);
    Ok(Tensor::custom(
        vec![],
        vec![value],
        Arc::new(CrossEntropyBackward {
            logits: logits.clone(),
            softmax,
            labels: labels.clone(),
            ignore,
            count,
        }),
    ))
}

/// Cross entropy over the refined point set: `[N, C, P]` against `[N, P]`.
pub fn point_cross_entropy<E: Element>(
    point_logits: &Tensor<E>,
    point_labels: &LabelMap,
    ignore: Option<u8>,
) -> Result<Tensor<E>, LossError> {
    cross_entropy(point_logits, point_labels, ignore)
}

struct LovaszBackward<E: Element> {
    probs: Tensor<E>,
    grad: Vec<E>,
}

impl<E: Element> CustomGrad<E> for LovaszBackward<E> {
    fn inputs(&self) -> Vec<Tensor<E>> {
        vec![self.probs.clone()]
    }

    fn vjp(&self, upstream: &[E]) -> Vec<Option<Vec<E>>> {
        let u = upstream[0];
        vec![Some(self.grad.iter().map(|g| *g * u).collect())]
    }
}

/// lovász-softmax: the lovász extension of the Jaccard loss evaluated on
/// softmax probabilities, averaged over classes and then the batch.
///
/// Per image and class `c`, the error vector is `1 - f_i(c)` on pixels of
/// class `c` and `f_i(c)` elsewhere; sorted descending (stable, so equal
/// errors keep pixel order), the loss is the dot product with the Jaccard
/// gradient vector of the sorted ground-truth indicators. At hard 0/1
/// probabilities this equals the mean Jaccard loss exactly.
pub fn lovasz_softmax<E: Element>(
    probs: &Tensor<E>,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<Tensor<E>, LossError> {
    let (n, c, loc) = check_label_shapes("lovasz_softmax", probs, labels)?;
    for &y in labels.data() {
        if (y as usize) >= c && Some(y) != cfg.ignore_label {
            return Err(LossError::LabelOutOfRange { label: y, classes: c });
        }
    }
    let ps = probs.read();
    // Reject inputs that are not softmax outputs.
    let mut worst = 0.0f64;
    for ni in 0..n {
        for l in 0..loc {
            let sum: f64 = (0..c).map(|ch| ps[(ni * c + ch) * loc + l].into_f64()).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    if worst > 1e-4 {
        return Err(LossError::NotNormalized { worst });
    }

    let lab = labels.data();
    let mut grad = vec![E::zero(); probs.numel()];
    let mut batch_total = 0.0f64;
    let mut batch_images = 0usize;
    for ni in 0..n {
        let valid: Vec<usize> = (0..loc)
            .filter(|&l| Some(lab[ni * loc + l]) != cfg.ignore_label)
            .collect();
        if valid.is_empty() {
            continue;
        }
        let class_set: Vec<usize> = match cfg.class_average {
            ClassAverage::AllClasses => (0..c).collect(),
            ClassAverage::ClassesPresent => {
                let mut present = vec![false; c];
                for &l in &valid {
                    present[lab[ni * loc + l] as usize] = true;
                }
                (0..c).filter(|&ch| present[ch]).collect()
            }
        };
        if class_set.is_empty() {
            continue;
        }
        let class_scale = 1.0 / class_set.len() as f64;
        let mut image_total = 0.0f64;
        for &ch in &class_set {
            // Error vector and ground-truth membership over valid pixels.
            let mut order: Vec<(f64, usize, bool)> = valid
                .iter()
                .map(|&l| {
                    let is_gt = lab[ni * loc + l] as usize == ch;
                    let f = ps[(ni * c + ch) * loc + l].into_f64();
                    let m = if is_gt { 1.0 - f } else { f };
                    (m, l, is_gt)
                })
                .collect();
            order.sort_by(|a, b| b.0.total_cmp(&a.0)); // stable descending
            let gts = order.iter().filter(|e| e.2).count() as f64;
            let mut cum_gt = 0.0f64;
            let mut prev_jaccard = 0.0f64;
            for (j, &(m, l, is_gt)) in order.iter().enumerate() {
                if is_gt {
                    cum_gt += 1.0;
                }
                let intersection = gts - cum_gt;
                let union = gts + (j as f64 + 1.0) - cum_gt;
                let jaccard = 1.0 - intersection / union;
                let delta = jaccard - prev_jaccard;
                prev_jaccard = jaccard;
                image_total += m * delta * class_scale;
                // d m / d f is -1 on ground-truth pixels, +1 elsewhere.
                let sign = if is_gt { -1.0 } else { 1.0 };
                let at = (ni * c + ch) * loc + l;
                grad[at] = grad[at] + E::from_f64(sign * delta * class_scale);
            }
        }
        batch_total += image_total;
        batch_images += 1;
    }
    drop(ps);
    if batch_images == 0 {
        return Err(LossError::EmptySupport);
    }
    let inv_images = 1.0 / batch_images as f64;
    for g in grad.iter_mut() {
        *g = *g * E::from_f64(inv_images);
    }
    Ok(Tensor::custom(
        vec![],
        vec![E::from_f64(batch_total * inv_images)],
        Arc::new(LovaszBackward {
            probs: probs.clone(),
            grad,
        }),
    ))
}

/// Individual terms of a combined loss, for logging and stage checks.
#[derive(Debug)]
pub struct LossTerms<E: Element> {
    pub total: Tensor<E>,
    pub ce: f64,
    pub pce: Option<f64>,
    pub ls: Option<f64>,
}

impl<E: Element> LossTerms<E> {
    pub fn total_value(&self) -> f64 {
        self.total.item().into_f64()
    }
}

/// `Loss = L_CE + (1 - alpha) L_LS + alpha L_PCE` with `alpha` in {0, 1}.
///
/// Mask CE always applies to the refined logits. With `alpha = 1` the point
/// term requires the prediction to carry point logits and gathered point
/// labels; with `alpha = 0` the lovász term applies to the softmax of the
/// refined logits.
pub fn combined_loss<E: Element>(
    pred: &Prediction<E>,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<LossTerms<E>, LossError> {
    cfg.validate()?;
    let ce = cross_entropy(&pred.refined_logits, labels, cfg.ignore_label)?;
    let ce_value = ce.item().into_f64();
    if cfg.alpha == 1 {
        let points = pred.points.as_ref().ok_or(LossError::MissingPoints)?;
        let (logits, plabels) = match (&points.logits, &points.labels) {
            (Some(l), Some(p)) => (l, p),
            _ => return Err(LossError::MissingPoints),
        };
        let pce = point_cross_entropy(logits, plabels, cfg.ignore_label)?;
        let pce_value = pce.item().into_f64();
        Ok(LossTerms {
            total: ce.add(&pce)?,
            ce: ce_value,
            pce: Some(pce_value),
            ls: None,
        })
    } else {
        let probs = pred.refined_logits.softmax_channel()?;
        let ls = lovasz_softmax(&probs, labels, cfg)?;
        let ls_value = ls.item().into_f64();
        Ok(LossTerms {
            total: ce.add(&ls)?,
            ce: ce_value,
            pce: None,
            ls: Some(ls_value),
        })
    }
}
