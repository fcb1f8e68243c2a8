//! Reverse-mode differentiation.
//!
//! Non-leaf tensors carry the [`Op`] that produced them; `backward` walks
//! the implicit graph in reverse topological order, propagating
//! vector-Jacobian products and accumulating into every reachable leaf
//! exactly once per use. Calling `backward` again without `zero_grad`
//! accumulates on top of the existing leaf gradients.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;

use super::ops::{axis_sample, bilinear_axis, denormalize, pool_windows, Activation};
use super::{Element, Result, Tensor, TensorError, TensorId};

/// Caller-supplied backward rule for fused operators (used by the losses).
pub(crate) trait CustomGrad<E: Element>: Send + Sync {
    fn inputs(&self) -> Vec<Tensor<E>>;
    /// One gradient per input, aligned with `inputs()`.
    fn vjp(&self, upstream: &[E]) -> Vec<Option<Vec<E>>>;
}

/// Record of the operator that produced a tensor.
pub(crate) enum Op<E: Element> {
    Add(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    Sum(Tensor<E>),
    Reshape(Tensor<E>),
    Activation(Tensor<E>, Activation),
    Conv2d {
        input: Tensor<E>,
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        input: Tensor<E>,
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: Tensor<E>,
        gamma: Tensor<E>,
        beta: Tensor<E>,
        mean: Vec<E>,
        inv_std: Vec<E>,
        train: bool,
    },
    AdaptiveAvgPool {
        input: Tensor<E>,
        out_h: usize,
        out_w: usize,
    },
    BilinearResize {
        input: Tensor<E>,
        out_h: usize,
        out_w: usize,
    },
    SamplePoints {
        input: Tensor<E>,
        coords: Arc<Vec<Vec<(f64, f64)>>>,
    },
    ScatterPoints {
        dst: Tensor<E>,
        values: Tensor<E>,
        /// Per image: `(pixel index, winning point index)`, unique pixels.
        winners: Arc<Vec<Vec<(usize, usize)>>>,
    },
    SoftmaxChannel {
        input: Tensor<E>,
        output: Vec<E>,
    },
    Concat {
        parts: Vec<Tensor<E>>,
    },
    Custom(Arc<dyn CustomGrad<E>>),
}

impl<E: Element> Op<E> {
    pub(crate) fn inputs(&self) -> Vec<Tensor<E>> {
        match self {
            Op::Add(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Activation(a, _) => {
                vec![a.clone()]
            }
            Op::Conv2d {
                input, weight, bias, ..
            }
            | Op::DepthwiseConv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input.clone(), gamma.clone(), beta.clone()],
            Op::AdaptiveAvgPool { input, .. }
            | Op::BilinearResize { input, .. }
            | Op::SamplePoints { input, .. }
            | Op::SoftmaxChannel { input, .. } => vec![input.clone()],
            Op::ScatterPoints { dst, values, .. } => vec![dst.clone(), values.clone()],
            Op::Concat { parts } => parts.clone(),
            Op::Custom(rule) => rule.inputs(),
        }
    }

    fn vjp(&self, node: &Tensor<E>, g: &[E]) -> Result<Vec<Option<Vec<E>>>> {
        Ok(match self {
            Op::Add(_, _) => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Mul(a, b) => {
                let av = a.read();
                let bv = b.read();
                let da = g.iter().zip(bv.iter()).map(|(g, b)| *g * *b).collect();
                let db = g.iter().zip(av.iter()).map(|(g, a)| *g * *a).collect();
                vec![Some(da), Some(db)]
            }
            Op::Scale(_, k) => vec![Some(g.iter().map(|v| *v * *k).collect())],
            Op::Sum(a) => vec![Some(vec![g[0]; a.numel()])],
            Op::Reshape(_) => vec![Some(g.to_vec())],
            Op::Activation(a, kind) => {
                let six = E::from_f64(6.0);
                let av = a.read();
                let da = g
                    .iter()
                    .zip(av.iter())
                    .map(|(g, &x)| match kind {
                        Activation::Relu => {
                            if x > E::zero() {
                                *g
                            } else {
                                E::zero()
                            }
                        }
                        Activation::Relu6 => {
                            if x > E::zero() && x < six {
                                *g
                            } else {
                                E::zero()
                            }
                        }
                    })
                    .collect();
                vec![Some(da)]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => conv2d_vjp(node, input, weight, bias.as_ref(), *stride, *pad, g, false),
            Op::DepthwiseConv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => conv2d_vjp(node, input, weight, bias.as_ref(), *stride, *pad, g, true),
            Op::BatchNorm {
                input,
                gamma,
                mean,
                inv_std,
                train,
                ..
            } => batch_norm_vjp(input, gamma, mean, inv_std, *train, g),
            Op::AdaptiveAvgPool { input, out_h, out_w } => {
                let s = input.shape();
                let (h, w) = (s[2], s[3]);
                let rows = pool_windows(*out_h, h);
                let cols = pool_windows(*out_w, w);
                let planes = s[0] * s[1];
                let mut dx = vec![E::zero(); input.numel()];
                dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, d)| {
                    debug_assert!(plane < planes);
                    let gp = &g[plane * out_h * out_w..][..out_h * out_w];
                    for (i, &(r0, r1)) in rows.iter().enumerate() {
                        for (j, &(c0, c1)) in cols.iter().enumerate() {
                            let share = gp[i * out_w + j]
                                * E::from_f64(1.0 / ((r1 - r0) * (c1 - c0)) as f64);
                            for y in r0..r1 {
                                for x in c0..c1 {
                                    d[y * w + x] = d[y * w + x] + share;
                                }
                            }
                        }
                    }
                });
                vec![Some(dx)]
            }
            Op::BilinearResize { input, out_h, out_w } => {
                let s = input.shape();
                let (h, w) = (s[2], s[3]);
                let rows = bilinear_axis(*out_h, h);
                let cols = bilinear_axis(*out_w, w);
                let mut dx = vec![E::zero(); input.numel()];
                dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, d)| {
                    let gp = &g[plane * out_h * out_w..][..out_h * out_w];
                    for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
                        let wy1 = E::from_f64(fy);
                        let wy0 = E::one() - wy1;
                        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let gv = gp[i * out_w + j];
                            let wx1 = E::from_f64(fx);
                            let wx0 = E::one() - wx1;
                            d[y0 * w + x0] = d[y0 * w + x0] + gv * wy0 * wx0;
                            d[y0 * w + x1] = d[y0 * w + x1] + gv * wy0 * wx1;
                            d[y1 * w + x0] = d[y1 * w + x0] + gv * wy1 * wx0;
                            d[y1 * w + x1] = d[y1 * w + x1] + gv * wy1 * wx1;
                        }
                    }
                });
                vec![Some(dx)]
            }
            Op::SamplePoints { input, coords } => {
                let s = input.shape();
                let (c, h, w) = (s[1], s[2], s[3]);
                let p = coords[0].len();
                let mut dx = vec![E::zero(); input.numel()];
                dx.par_chunks_mut(c * h * w).enumerate().for_each(|(ni, d)| {
                    for (pi, &(u, v)) in coords[ni].iter().enumerate() {
                        let (x0, x1, fx) = axis_sample(denormalize(u, w), w);
                        let (y0, y1, fy) = axis_sample(denormalize(v, h), h);
                        let (wx1, wy1) = (E::from_f64(fx), E::from_f64(fy));
                        let (wx0, wy0) = (E::one() - wx1, E::one() - wy1);
                        for chan in 0..c {
                            let gv = g[((ni * c) + chan) * p + pi];
                            let dp = &mut d[chan * h * w..][..h * w];
                            dp[y0 * w + x0] = dp[y0 * w + x0] + gv * wy0 * wx0;
                            dp[y0 * w + x1] = dp[y0 * w + x1] + gv * wy0 * wx1;
                            dp[y1 * w + x0] = dp[y1 * w + x0] + gv * wy1 * wx0;
                            dp[y1 * w + x1] = dp[y1 * w + x1] + gv * wy1 * wx1;
                        }
                    }
                });
                vec![Some(dx)]
            }
            Op::ScatterPoints { dst, values, winners } => {
                let s = dst.shape();
                let (c, hw) = (s[1], s[2] * s[3]);
                let p = values.shape()[2];
                // Replaced pixels pass no gradient to the destination.
                let mut ddst = g.to_vec();
                let mut dvals = vec![E::zero(); values.numel()];
                for (ni, list) in winners.iter().enumerate() {
                    for &(pix, pi) in list {
                        for chan in 0..c {
                            let at = ((ni * c) + chan) * hw + pix;
                            dvals[((ni * c) + chan) * p + pi] = g[at];
                            ddst[at] = E::zero();
                        }
                    }
                }
                vec![Some(ddst), Some(dvals)]
            }
            Op::SoftmaxChannel { input, output } => {
                let s = input.shape();
                let (n, c) = (s[0], s[1]);
                let loc: usize = s[2..].iter().product();
                let mut dx = vec![E::zero(); input.numel()];
                for ni in 0..n {
                    let base = ni * c * loc;
                    for l in 0..loc {
                        let mut dot = E::zero();
                        for chan in 0..c {
                            let at = base + chan * loc + l;
                            dot = dot + g[at] * output[at];
                        }
                        for chan in 0..c {
                            let at = base + chan * loc + l;
                            dx[at] = output[at] * (g[at] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Concat { parts } => {
                let n = parts[0].shape()[0];
                let loc: usize = parts[0].shape()[2..].iter().product();
                let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
                let mut grads = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for part in parts {
                    let cp = part.shape()[1];
                    let mut d = vec![E::zero(); part.numel()];
                    for ni in 0..n {
                        let src = &g[(ni * c_total + offset) * loc..][..cp * loc];
                        d[ni * cp * loc..][..cp * loc].copy_from_slice(src);
                    }
                    offset += cp;
                    grads.push(Some(d));
                }
                grads
            }
            Op::Custom(rule) => rule.vjp(g),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_vjp<E: Element>(
    node: &Tensor<E>,
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
    g: &[E],
    depthwise: bool,
) -> Vec<Option<Vec<E>>> {
    let xs = input.shape();
    let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = weight.shape();
    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
    let os = node.shape();
    let (oh, ow) = (os[2], os[3]);
    // For depthwise, each output channel reads exactly its own input channel.
    let groups_note = depthwise;

    let xv = input.read();
    let wv = weight.read();

    let dx = if input.requires_grad() {
        let mut dx = vec![E::zero(); input.numel()];
        dx.par_chunks_mut(ci * h * w).enumerate().for_each(|(ni, d)| {
            for coi in 0..co {
                let gp = &g[((ni * co) + coi) * oh * ow..][..oh * ow];
                let (ci_lo, ci_hi) = if groups_note { (coi, coi + 1) } else { (0, ci) };
                for cii in ci_lo..ci_hi {
                    let wb = if groups_note {
                        coi * kh * kw
                    } else {
                        ((coi * ci) + cii) * kh * kw
                    };
                    let dplane = &mut d[cii * h * w..][..h * w];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wval = wv[wb + ky * kw + kx];
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let grow = &gp[oy * ow..][..ow];
                                let drow = &mut dplane[iy * w..][..w];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    drow[ix] = drow[ix] + wval * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(dx)
    } else {
        None
    };

    let dw = if weight.requires_grad() {
        let per_out = if groups_note { kh * kw } else { ci * kh * kw };
        let mut dw = vec![E::zero(); weight.numel()];
        dw.par_chunks_mut(per_out).enumerate().for_each(|(coi, d)| {
            let (ci_lo, ci_hi) = if groups_note { (coi, coi + 1) } else { (0, ci) };
            for cii in ci_lo..ci_hi {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = E::zero();
                        for ni in 0..n {
                            let xp = &xv[((ni * ci) + cii) * h * w..][..h * w];
                            let gp = &g[((ni * co) + coi) * oh * ow..][..oh * ow];
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let xrow = &xp[(iy - pad) * w..][..w];
                                let grow = &gp[oy * ow..][..ow];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    acc = acc + xrow[ix - pad] * gv;
                                }
                            }
                        }
                        let at = if groups_note {
                            ky * kw + kx
                        } else {
                            (cii - ci_lo) * kh * kw + ky * kw + kx
                        };
                        d[at] = acc;
                    }
                }
            }
        });
        Some(dw)
    } else {
        None
    };

    let mut out = vec![dx, dw];
    if let Some(b) = bias {
        let db = if b.requires_grad() {
            let mut db = vec![E::zero(); co];
            for ni in 0..n {
                for (coi, dst) in db.iter_mut().enumerate() {
                    let gp = &g[((ni * co) + coi) * oh * ow..][..oh * ow];
                    *dst = *dst + gp.iter().copied().sum();
                }
            }
            Some(db)
        } else {
            None
        };
        out.push(db);
    }
    out
}

fn batch_norm_vjp<E: Element>(
    input: &Tensor<E>,
    gamma: &Tensor<E>,
    mean: &[E],
    inv_std: &[E],
    train: bool,
    g: &[E],
) -> Vec<Option<Vec<E>>> {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = (n * h * w) as f64;
    let xv = input.read();
    let gv = gamma.read();

    // Per-channel reductions over the batch and spatial axes.
    let mut sum_g = vec![E::zero(); c];
    let mut sum_g_xhat = vec![E::zero(); c];
    for ni in 0..n {
        for chan in 0..c {
            let plane = ((ni * c) + chan) * h * w;
            let xp = &xv[plane..][..h * w];
            let gp = &g[plane..][..h * w];
            let (mu, is) = (mean[chan], inv_std[chan]);
            let mut a = E::zero();
            let mut b = E::zero();
            for (&x, &gg) in xp.iter().zip(gp) {
                a = a + gg;
                b = b + gg * (x - mu) * is;
            }
            sum_g[chan] = sum_g[chan] + a;
            sum_g_xhat[chan] = sum_g_xhat[chan] + b;
        }
    }

    let dx = if input.requires_grad() {
        let inv_m = E::from_f64(1.0 / m);
        let mut dx = vec![E::zero(); input.numel()];
        dx.par_chunks_mut(h * w).enumerate().for_each(|(plane, d)| {
            let chan = plane % c;
            let (mu, is, ga) = (mean[chan], inv_std[chan], gv[chan]);
            let xp = &xv[plane * h * w..][..h * w];
            let gp = &g[plane * h * w..][..h * w];
            if train {
                let mean_g = sum_g[chan] * inv_m;
                let mean_g_xhat = sum_g_xhat[chan] * inv_m;
                for ((d, &x), &gg) in d.iter_mut().zip(xp).zip(gp) {
                    let xhat = (x - mu) * is;
                    *d = ga * is * (gg - mean_g - xhat * mean_g_xhat);
                }
            } else {
                for (d, &gg) in d.iter_mut().zip(gp) {
                    *d = ga * is * gg;
                }
            }
        });
        Some(dx)
    } else {
        None
    };

    let dgamma = gamma.requires_grad().then(|| sum_g_xhat.clone());
    let dbeta = sum_g.clone();
    vec![dx, dgamma, Some(dbeta)]
}

impl<E: Element> Tensor<E> {
    /// Reverse-mode pass from a scalar loss; accumulates into leaf `grad`
    /// buffers. Repeated calls without [`Tensor::zero_grad`] accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward {
                numel: self.numel(),
            });
        }
        let order = topo_order(self);
        let mut grads: HashMap<TensorId, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => {
                    if node.requires_grad() {
                        node.accumulate_grad(&g);
                    }
                }
                Some(op) => {
                    let inputs = op.inputs();
                    let input_grads = op.vjp(node, &g)?;
                    debug_assert_eq!(inputs.len(), input_grads.len());
                    for (inp, ig) in inputs.iter().zip(input_grads) {
                        if !inp.requires_grad() {
                            continue;
                        }
                        let Some(ig) = ig else { continue };
                        match grads.entry(inp.id()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (dst, v) in e.get_mut().iter_mut().zip(&ig) {
                                    *dst = *dst + *v;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the sub-graph that requires gradients.
fn topo_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited: HashSet<TensorId> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) || !t.requires_grad() {
            continue;
        }
        let children = t.op().map(|op| op.inputs()).unwrap_or_default();
        stack.push((t, true));
        for ch in children {
            if !visited.contains(&ch.id()) {
                stack.push((ch, false));
            }
        }
    }
    order
}
