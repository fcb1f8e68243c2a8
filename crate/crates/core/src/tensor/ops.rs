//! Forward operators.
//!
//! Every operator validates its preconditions, computes the result into a
//! fresh contiguous buffer and records an [`Op`] when gradient tracking is
//! active. The heavy image operators parallelize over disjoint output
//! planes, which keeps results bitwise independent of the thread count.

use rayon::prelude::*;

use super::backward::Op;
use super::{grad_enabled, invalid, Element, Result, Tensor, TensorError};

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Relu6,
}

/// Per-axis bilinear interpolation table: `(lo, hi, frac)` per output index.
///
/// Output index `i` maps to source coordinate `(i + 0.5) * src / out - 0.5`,
/// clamped to `[0, src - 1]` (half-pixel centers with edge clamping). The
/// same convention is shared by map resizing and point sampling so that
/// normalized refinement coordinates mean the same thing at every scale.
pub(crate) fn bilinear_axis(out: usize, src: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            let coord = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5)
                .clamp(0.0, (src - 1) as f64);
            axis_sample(coord, src)
        })
        .collect()
}

/// Interpolation endpoints for one continuous source coordinate.
pub(crate) fn axis_sample(coord: f64, src: usize) -> (usize, usize, f64) {
    let lo = coord.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, coord - lo as f64)
}

/// Continuous source coordinate of a normalized position in `[0, 1]`.
pub(crate) fn denormalize(u: f64, src: usize) -> f64 {
    (u * src as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

fn expect_rank4(op: &'static str, t: &Tensor<impl Element>) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(invalid(op, format!("expected a 4-d tensor, got shape {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn conv_out_extent(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(invalid(
            op,
            format!("kernel {k} exceeds padded extent {}", input + 2 * pad),
        ));
    }
    let out = (input + 2 * pad - k) / stride + 1;
    if out == 0 {
        return Err(invalid(op, "non-positive output extent"));
    }
    Ok(out)
}

/// Valid output range `[lo, hi]` such that `o * stride + k - pad` stays
/// inside `[0, input)`, additionally capped at `out - 1`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if input + pad < k + 1 {
        return None;
    }
    let hi = ((input + pad - k - 1) / stride).min(out - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

impl<E: Element> Tensor<E> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = {
            let a = self.read();
            let b = other.read();
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = {
            let a = self.read();
            let b = other.read();
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: E) -> Result<Tensor<E>> {
        let out = self.read().iter().map(|x| *x * factor).collect();
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Scale(self.clone(), factor),
        ))
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Result<Tensor<E>> {
        let total = self.read().iter().copied().sum();
        Ok(Tensor::result(vec![], vec![total], Op::Sum(self.clone())))
    }

    /// Arithmetic mean of all elements.
    pub fn mean(&self) -> Result<Tensor<E>> {
        let n = self.numel();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        self.sum()?.scale(E::one() / E::from_f64(n as f64))
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<E>> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape,
            });
        }
        Ok(Tensor::result(
            shape,
            self.clone_data(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Elementwise activation; the subgradient at kinks is 0.
    pub fn activation(&self, kind: Activation) -> Result<Tensor<E>> {
        let six = E::from_f64(6.0);
        let out = self
            .read()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => x.max(E::zero()),
                Activation::Relu6 => x.max(E::zero()).min(six),
            })
            .collect();
        Ok(Tensor::result(
            self.shape().to_vec(),
            out,
            Op::Activation(self.clone(), kind),
        ))
    }

    pub fn relu(&self) -> Result<Tensor<E>> {
        self.activation(Activation::Relu)
    }

    pub fn relu6(&self) -> Result<Tensor<E>> {
        self.activation(Activation::Relu6)
    }

    /// 2-d cross-correlation with zero padding.
    ///
    /// `self` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, Kh, Kw]`, `bias` is
    /// `[Co]`. Output extent per axis is `(in + 2*pad - k) / stride + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let [n, ci, h, w] = expect_rank4("conv2d", self)?;
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(invalid("conv2d", format!("weight must be 4-d, got {ws:?}")));
        }
        let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.shape().to_vec(),
                right: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be >= 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(invalid("conv2d", "kernel extents must be >= 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    left: b.shape().to_vec(),
                    right: vec![co],
                });
            }
        }
        let oh = conv_out_extent("conv2d", h, kh, stride, pad)?;
        let ow = conv_out_extent("conv2d", w, kw, stride, pad)?;

        let mut out = vec![E::zero(); n * co * oh * ow];
        {
            let xs = self.read();
            let wsv = weight.read();
            let bv = bias.map(|b| b.read());
            out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
                let (ni, coi) = (plane / co, plane % co);
                if let Some(b) = &bv {
                    o.fill(b[coi]);
                }
                for cii in 0..ci {
                    let xp = &xs[((ni * ci) + cii) * h * w..][..h * w];
                    let wb = ((coi * ci) + cii) * kh * kw;
                    accumulate_correlation(o, xp, &wsv[wb..wb + kh * kw], h, w, oh, ow, kh, kw, stride, pad);
                }
            });
        }
        Ok(Tensor::result(
            vec![n, co, oh, ow],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                pad,
            },
        ))
    }

    /// Depthwise 2-d cross-correlation: channel `c` of the output depends
    /// only on channel `c` of the input. `weight` is `[C, 1, Kh, Kw]`.
    pub fn depthwise_conv2d(
        &self,
        weight: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>> {
        let [n, c, h, w] = expect_rank4("depthwise_conv2d", self)?;
        let ws = weight.shape();
        if ws.len() != 4 || ws[1] != 1 {
            return Err(invalid(
                "depthwise_conv2d",
                format!("weight must be [C, 1, Kh, Kw], got {ws:?}"),
            ));
        }
        if ws[0] != c {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv2d",
                left: self.shape().to_vec(),
                right: ws.to_vec(),
            });
        }
        let (kh, kw) = (ws[2], ws[3]);
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(invalid("depthwise_conv2d", "stride and kernel must be >= 1"));
        }
        if let Some(b) = bias {
            if b.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "depthwise_conv2d",
                    left: b.shape().to_vec(),
                    right: vec![c],
                });
            }
        }
        let oh = conv_out_extent("depthwise_conv2d", h, kh, stride, pad)?;
        let ow = conv_out_extent("depthwise_conv2d", w, kw, stride, pad)?;

        let mut out = vec![E::zero(); n * c * oh * ow];
        {
            let xs = self.read();
            let wsv = weight.read();
            let bv = bias.map(|b| b.read());
            out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, o)| {
                let chan = plane % c;
                if let Some(b) = &bv {
                    o.fill(b[chan]);
                }
                let xp = &xs[plane * h * w..][..h * w];
                let wb = chan * kh * kw;
                accumulate_correlation(o, xp, &wsv[wb..wb + kh * kw], h, w, oh, ow, kh, kw, stride, pad);
            });
        }
        Ok(Tensor::result(
            vec![n, c, oh, ow],
            out,
            Op::DepthwiseConv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                pad,
            },
        ))
    }

    /// Per-channel batch normalization over `[N, C, H, W]`.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running buffers (`r = (1 - momentum) * r + momentum * batch`); eval
    /// mode normalizes with the running buffers. Gradients flow to the
    /// input, `gamma` and `beta`; the running buffers are plain state.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let [n, c, h, w] = expect_rank4("batch_norm", self)?;
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            if t.shape() != [c] {
                return Err(invalid(
                    "batch_norm",
                    format!("{name} must have shape [{c}], got {:?}", t.shape()),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(invalid("batch_norm", "eps must be positive"));
        }
        let m = n * h * w;
        if train && m < 2 {
            return Err(invalid(
                "batch_norm",
                format!("train mode needs N*H*W >= 2 for a defined variance, got {m}"),
            ));
        }

        let (mean, inv_std) = if train {
            let xs = self.read();
            let inv_m = 1.0 / m as f64;
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for chan in 0..c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let p = &xs[((ni * c) + chan) * h * w..][..h * w];
                    acc += p.iter().map(|v| v.into_f64()).sum::<f64>();
                }
                let mu = acc * inv_m;
                let mut vacc = 0.0;
                for ni in 0..n {
                    let p = &xs[((ni * c) + chan) * h * w..][..h * w];
                    vacc += p.iter().map(|v| (v.into_f64() - mu).powi(2)).sum::<f64>();
                }
                mean[chan] = E::from_f64(mu);
                var[chan] = E::from_f64(vacc * inv_m);
            }
            drop(xs);
            let mom = E::from_f64(momentum);
            let keep = E::one() - mom;
            running_mean.update_data(|r| {
                for (r, m) in r.iter_mut().zip(&mean) {
                    *r = keep * *r + mom * *m;
                }
            });
            running_var.update_data(|r| {
                for (r, v) in r.iter_mut().zip(&var) {
                    *r = keep * *r + mom * *v;
                }
            });
            let inv_std: Vec<E> = var
                .iter()
                .map(|v| E::from_f64(1.0 / (v.into_f64() + eps).sqrt()))
                .collect();
            (mean, inv_std)
        } else {
            let mean = running_mean.clone_data();
            let inv_std: Vec<E> = running_var
                .read()
                .iter()
                .map(|v| E::from_f64(1.0 / (v.into_f64() + eps).sqrt()))
                .collect();
            (mean, inv_std)
        };

        let mut out = vec![E::zero(); n * c * h * w];
        {
            let xs = self.read();
            let gs = gamma.read();
            let bs = beta.read();
            out.par_chunks_mut(h * w).enumerate().for_each(|(plane, o)| {
                let chan = plane % c;
                let (mu, is, g, b) = (mean[chan], inv_std[chan], gs[chan], bs[chan]);
                let xp = &xs[plane * h * w..][..h * w];
                for (dst, &x) in o.iter_mut().zip(xp) {
                    *dst = g * (x - mu) * is + b;
                }
            });
        }
        Ok(Tensor::result(
            vec![n, c, h, w],
            out,
            Op::BatchNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean,
                inv_std,
                train,
            },
        ))
    }

    /// Adaptive average pooling: output cell `(i, j)` is the mean of input
    /// rows `[floor(i*H/oh), ceil((i+1)*H/oh))` and the analogous columns.
    pub fn adaptive_avg_pool2d(&self, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        let [n, c, h, w] = expect_rank4("adaptive_avg_pool2d", self)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(invalid(
                "adaptive_avg_pool2d",
                format!("output {out_h}x{out_w} must be within 1..={h}x1..={w}"),
            ));
        }
        let rows = pool_windows(out_h, h);
        let cols = pool_windows(out_w, w);
        let mut out = vec![E::zero(); n * c * out_h * out_w];
        {
            let xs = self.read();
            out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(plane, o)| {
                let xp = &xs[plane * h * w..][..h * w];
                for (i, &(r0, r1)) in rows.iter().enumerate() {
                    for (j, &(c0, c1)) in cols.iter().enumerate() {
                        let mut acc = E::zero();
                        for y in r0..r1 {
                            for x in c0..c1 {
                                acc = acc + xp[y * w + x];
                            }
                        }
                        let area = ((r1 - r0) * (c1 - c0)) as f64;
                        o[i * out_w + j] = acc * E::from_f64(1.0 / area);
                    }
                }
            });
        }
        Ok(Tensor::result(
            vec![n, c, out_h, out_w],
            out,
            Op::AdaptiveAvgPool {
                input: self.clone(),
                out_h,
                out_w,
            },
        ))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
        let [n, c, h, w] = expect_rank4("bilinear_resize", self)?;
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", "output extents must be >= 1"));
        }
        if (out_h, out_w) == (h, w) {
            // Identity resize still records an op so gradients pass through.
            return self.reshape(self.shape().to_vec());
        }
        let rows = bilinear_axis(out_h, h);
        let cols = bilinear_axis(out_w, w);
        let mut out = vec![E::zero(); n * c * out_h * out_w];
        {
            let xs = self.read();
            out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(plane, o)| {
                let xp = &xs[plane * h * w..][..h * w];
                for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                    let wy1 = E::from_f64(fy);
                    let wy0 = E::one() - wy1;
                    let r0 = &xp[y0 * w..][..w];
                    let r1 = &xp[y1 * w..][..w];
                    let orow = &mut o[i * out_w..][..out_w];
                    for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                        let wx1 = E::from_f64(fx);
                        let wx0 = E::one() - wx1;
                        orow[j] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1])
                            + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                    }
                }
            });
        }
        Ok(Tensor::result(
            vec![n, c, out_h, out_w],
            out,
            Op::BilinearResize {
                input: self.clone(),
                out_h,
                out_w,
            },
        ))
    }

    /// Samples `[N, C, H, W]` features at normalized per-image coordinates,
    /// returning `[N, C, P]`. Coordinates are `(u, v)` in `[0, 1]^2` and use
    /// the same half-pixel convention as [`Tensor::bilinear_resize`], so a
    /// given normalized point means the same image location at any scale.
    pub fn sample_points_bilinear(&self, coords: &[Vec<(f64, f64)>]) -> Result<Tensor<E>> {
        let [n, c, h, w] = expect_rank4("sample_points_bilinear", self)?;
        validate_coords("sample_points_bilinear", coords, n)?;
        let p = coords[0].len();
        let mut out = vec![E::zero(); n * c * p];
        {
            let xs = self.read();
            for ni in 0..n {
                for (pi, &(u, v)) in coords[ni].iter().enumerate() {
                    let (x0, x1, fx) = axis_sample(denormalize(u, w), w);
                    let (y0, y1, fy) = axis_sample(denormalize(v, h), h);
                    let (wx1, wy1) = (E::from_f64(fx), E::from_f64(fy));
                    let (wx0, wy0) = (E::one() - wx1, E::one() - wy1);
                    for chan in 0..c {
                        let xp = &xs[((ni * c) + chan) * h * w..][..h * w];
                        out[((ni * c) + chan) * p + pi] = wy0 * (wx0 * xp[y0 * w + x0] + wx1 * xp[y0 * w + x1])
                            + wy1 * (wx0 * xp[y1 * w + x0] + wx1 * xp[y1 * w + x1]);
                    }
                }
            }
        }
        Ok(Tensor::result(
            vec![n, c, p],
            out,
            Op::SamplePoints {
                input: self.clone(),
                coords: std::sync::Arc::new(coords.to_vec()),
            },
        ))
    }

    /// Writes per-point values into a copy of `self` at the pixel index
    /// nearest each denormalized coordinate; duplicate coordinates resolve
    /// last-writer-wins in point order. All untouched pixels are bitwise
    /// unchanged. `values` is `[N, C, P]`.
    pub fn scatter_points(
        &self,
        coords: &[Vec<(f64, f64)>],
        values: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let [n, c, h, w] = expect_rank4("scatter_points", self)?;
        if coords.len() == n && coords.iter().all(|c| c.is_empty()) {
            // Empty point set: the destination passes through unchanged.
            return self.reshape(self.shape().to_vec());
        }
        validate_coords("scatter_points", coords, n)?;
        let p = coords[0].len();
        if values.shape() != [n, c, p] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_points",
                left: values.shape().to_vec(),
                right: vec![n, c, p],
            });
        }
        // Resolve winners: last point in order owns its pixel.
        let mut winners: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
        for per_image in coords.iter() {
            let mut claim: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
            for (pi, &(u, v)) in per_image.iter().enumerate() {
                let px = (u * w as f64 - 0.5).round();
                let py = (v * h as f64 - 0.5).round();
                if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
                    return Err(invalid(
                        "scatter_points",
                        format!("point ({u}, {v}) maps outside the {h}x{w} grid"),
                    ));
                }
                claim.insert(py as usize * w + px as usize, pi);
            }
            let mut list: Vec<(usize, usize)> = per_image
                .iter()
                .enumerate()
                .filter_map(|(pi, &(u, v))| {
                    let px = (u * w as f64 - 0.5).round() as usize;
                    let py = (v * h as f64 - 0.5).round() as usize;
                    let pix = py * w + px;
                    (claim[&pix] == pi).then_some((pix, pi))
                })
                .collect();
            list.sort_unstable();
            winners.push(list);
        }

        let mut out = self.clone_data();
        {
            let vals = values.read();
            for (ni, list) in winners.iter().enumerate() {
                for &(pix, pi) in list {
                    for chan in 0..c {
                        out[((ni * c) + chan) * h * w + pix] = vals[((ni * c) + chan) * p + pi];
                    }
                }
            }
        }
        Ok(Tensor::result(
            vec![n, c, h, w],
            out,
            Op::ScatterPoints {
                dst: self.clone(),
                values: values.clone(),
                winners: std::sync::Arc::new(winners),
            },
        ))
    }

    /// Channel softmax over axis 1 of `[N, C, ...]`, max-subtracted for
    /// stability. Outputs are positive and sum to 1 at every location.
    pub fn softmax_channel(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(invalid("softmax_channel", "expected shape [N, C, ...]"));
        }
        let (n, c) = (s[0], s[1]);
        if c < 2 {
            return Err(invalid("softmax_channel", "needs at least 2 channels"));
        }
        let loc: usize = s[2..].iter().product();
        let mut out = vec![E::zero(); self.numel()];
        {
            let xs = self.read();
            for ni in 0..n {
                let base = ni * c * loc;
                for l in 0..loc {
                    let mut max = xs[base + l];
                    for chan in 1..c {
                        max = max.max(xs[base + chan * loc + l]);
                    }
                    let mut total = E::zero();
                    for chan in 0..c {
                        let e = (xs[base + chan * loc + l] - max).exp();
                        out[base + chan * loc + l] = e;
                        total = total + e;
                    }
                    let inv = E::one() / total;
                    for chan in 0..c {
                        out[base + chan * loc + l] = out[base + chan * loc + l] * inv;
                    }
                }
            }
        }
        let saved = out.clone();
        Ok(Tensor::result(
            s.to_vec(),
            out,
            Op::SoftmaxChannel {
                input: self.clone(),
                output: saved,
            },
        ))
    }

    /// Concatenates tensors along the channel axis (axis 1).
    pub fn concat_channels(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(invalid("concat_channels", "no inputs"));
        }
        let first = parts[0].shape();
        if first.len() < 2 {
            return Err(invalid("concat_channels", "expected shape [N, C, ...]"));
        }
        let n = first[0];
        let tail = &first[2..];
        let loc: usize = tail.iter().product();
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || s[0] != n || &s[2..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    left: first.to_vec(),
                    right: s.to_vec(),
                });
            }
            channels.push(s[1]);
        }
        let c_total: usize = channels.iter().sum();
        let mut out = vec![E::zero(); n * c_total * loc];
        {
            let guards: Vec<_> = parts.iter().map(|p| p.read()).collect();
            let mut offset = 0;
            for (gi, g) in guards.iter().enumerate() {
                let cp = channels[gi];
                for ni in 0..n {
                    let src = &g[ni * cp * loc..][..cp * loc];
                    let dst = &mut out[(ni * c_total + offset) * loc..][..cp * loc];
                    dst.copy_from_slice(src);
                }
                offset += cp;
            }
        }
        let mut shape = vec![n, c_total];
        shape.extend_from_slice(tail);
        Ok(Tensor::result(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Wraps a tensor produced by an operator with a caller-supplied
    /// backward rule (used by the loss functions).
    pub(crate) fn custom(
        shape: Vec<usize>,
        data: Vec<E>,
        rule: std::sync::Arc<dyn super::backward::CustomGrad<E>>,
    ) -> Tensor<E> {
        let requires = grad_enabled() && rule.inputs().iter().any(|t| t.requires_grad());
        if requires {
            Tensor::result(shape, data, Op::Custom(rule))
        } else {
            Tensor::from_vec(shape, data).expect("custom op shape/data mismatch")
        }
    }
}

fn validate_coords(op: &'static str, coords: &[Vec<(f64, f64)>], n: usize) -> Result<()> {
    if coords.len() != n {
        return Err(invalid(
            op,
            format!("expected {n} per-image coordinate lists, got {}", coords.len()),
        ));
    }
    let p = coords[0].len();
    if p == 0 {
        return Err(invalid(op, "at least one point is required"));
    }
    for per_image in coords {
        if per_image.len() != p {
            return Err(invalid(op, "ragged per-image point counts"));
        }
        for &(u, v) in per_image {
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                return Err(invalid(op, format!("coordinate ({u}, {v}) outside [0, 1]^2")));
            }
        }
    }
    Ok(())
}

/// Shared inner loop of the convolution forwards: accumulates one input
/// plane correlated with one `Kh x Kw` kernel into the output plane.
#[allow(clippy::too_many_arguments)]
fn accumulate_correlation<E: Element>(
    out: &mut [E],
    input: &[E],
    kernel: &[E],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    for ky in 0..kh {
        let Some((oy_lo, oy_hi)) = valid_range(oh, h, ky, stride, pad) else {
            continue;
        };
        for kx in 0..kw {
            let wv = kernel[ky * kw + kx];
            let Some((ox_lo, ox_hi)) = valid_range(ow, w, kx, stride, pad) else {
                continue;
            };
            for oy in oy_lo..=oy_hi {
                let iy = oy * stride + ky - pad;
                let xrow = &input[iy * w..][..w];
                let orow = &mut out[oy * ow..][..ow];
                for ox in ox_lo..=ox_hi {
                    let ix = ox * stride + kx - pad;
                    orow[ox] = orow[ox] + wv * xrow[ix];
                }
            }
        }
    }
}

/// Pooling windows `[(start, end))` per output index; windows tile the input.
pub(crate) fn pool_windows(out: usize, src: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * src / out;
            let end = ((i + 1) * src).div_ceil(out);
            (start, end)
        })
        .collect()
}
