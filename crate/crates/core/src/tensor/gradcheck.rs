//! Finite-difference gradient checking.
//!
//! The checker evaluates the loss twice per coordinate at `x ± eps`
//! (central differences) with operator recording disabled, so the numeric
//! estimate never touches the backward implementation it is checking.
//! Checks are meant to run in `f64`, where the truncation error of the
//! central difference sits far below the pass threshold.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{no_grad, Result, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1)`: relative where the gradient is large,
/// absolute near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks every coordinate of every input.
///
/// `inputs` are `(shape, center values)` of the differentiable leaves; `f`
/// receives freshly built leaf tensors and must return a scalar loss.
pub fn check_gradients(
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let all: Vec<Vec<usize>> = inputs
        .iter()
        .map(|(_, data)| (0..data.len()).collect())
        .collect();
    check_at(inputs, &all, eps, f)
}

/// Checks a random subset of coordinates per input (for composed models
/// where exhaustive checking would be wasteful).
pub fn check_gradients_sampled(
    inputs: &[(Vec<usize>, Vec<f64>)],
    per_tensor: usize,
    seed: u64,
    eps: f64,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<Vec<usize>> = inputs
        .iter()
        .map(|(_, data)| {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(per_tensor.min(data.len()));
            idx.sort_unstable();
            idx
        })
        .collect();
    check_at(inputs, &picked, eps, f)
}

fn check_at(
    inputs: &[(Vec<usize>, Vec<f64>)],
    coords: &[Vec<usize>],
    eps: f64,
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    // Analytic gradients via one recorded forward + backward.
    let params: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| Tensor::param(shape.clone(), data.clone()).unwrap())
        .collect();
    let loss = f(&params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        no_grad(|| {
            let leaves: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(values)
                .map(|((shape, _), data)| Tensor::from_vec(shape.clone(), data.clone()).unwrap())
                .collect();
            Ok(f(&leaves)?.item())
        })
    };

    let mut center: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (ti, idx_list) in coords.iter().enumerate() {
        for &j in idx_list {
            let orig = center[ti][j];
            center[ti][j] = orig + eps;
            let plus = eval(&center)?;
            center[ti][j] = orig - eps;
            let minus = eval(&center)?;
            center[ti][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[ti][j], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
