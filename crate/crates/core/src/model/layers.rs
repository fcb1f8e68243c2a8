//! Building blocks: convolution + batch-norm units and inverted residuals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Activation, Element, Result, Tensor};

/// Centered uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_weights<E: Element>(rng: &mut ChaCha8Rng, numel: usize, fan_in: usize) -> Vec<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..numel)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

pub(crate) struct Conv2dLayer<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub stride: usize,
    pub pad: usize,
    depthwise: bool,
}

impl<E: Element> Conv2dLayer<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = ci * k * k;
        let weight = Tensor::param(vec![co, ci, k, k], init_weights(rng, co * ci * k * k, fan_in))
            .expect("conv weight shape");
        let bias = bias.then(|| Tensor::param(vec![co], vec![E::zero(); co]).expect("conv bias"));
        Self {
            weight,
            bias,
            stride,
            pad,
            depthwise: false,
        }
    }

    /// Depthwise variant: weight is `[C, 1, K, K]`.
    pub fn new_depthwise(rng: &mut ChaCha8Rng, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let weight = Tensor::param(vec![c, 1, k, k], init_weights(rng, c * k * k, k * k))
            .expect("depthwise weight shape");
        Self {
            weight,
            bias: None,
            stride,
            pad,
            depthwise: true,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if self.depthwise {
            x.depthwise_conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
        } else {
            x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.pad)
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

pub(crate) struct BatchNorm2d<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub momentum: f64,
    pub eps: f64,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::param(vec![c], vec![E::one(); c]).expect("bn gamma"),
            beta: Tensor::param(vec![c], vec![E::zero(); c]).expect("bn beta"),
            running_mean: Tensor::zeros(vec![c]),
            running_var: Tensor::full(vec![c], E::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        x.batch_norm(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            train,
            self.momentum,
            self.eps,
        )
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }

    pub fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

/// Convolution + batch norm + optional activation.
pub(crate) struct ConvBnAct<E: Element> {
    pub conv: Conv2dLayer<E>,
    pub bn: BatchNorm2d<E>,
    pub act: Option<Activation>,
}

impl<E: Element> ConvBnAct<E> {
    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, train)?;
        match self.act {
            Some(a) => y.activation(a),
            None => Ok(y),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.bn.collect(&format!("{prefix}.bn"), out);
    }

    pub fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.bn.collect_state(&format!("{prefix}.bn"), out);
    }
}

/// Inverted residual: pointwise expand, depthwise K x K, pointwise project.
///
/// Expand and depthwise stages use relu6; the projection is linear. The
/// skip connection applies iff stride is 1 and the channel count is kept.
pub(crate) struct InvertedResidual<E: Element> {
    pub expand: ConvBnAct<E>,
    pub depthwise: ConvBnAct<E>,
    pub project: ConvBnAct<E>,
    pub skip: bool,
}

impl<E: Element> InvertedResidual<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        expand_ratio: usize,
        k: usize,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "inverted residual stride must be 1 or 2");
        let mid = in_ch * expand_ratio;
        let expand = ConvBnAct {
            conv: Conv2dLayer::new(rng, in_ch, mid, 1, 1, 0, false),
            bn: BatchNorm2d::new(mid),
            act: Some(Activation::Relu6),
        };
        let depthwise = ConvBnAct {
            conv: Conv2dLayer::new_depthwise(rng, mid, k, stride, k / 2),
            bn: BatchNorm2d::new(mid),
            act: Some(Activation::Relu6),
        };
        let project = ConvBnAct {
            conv: Conv2dLayer::new(rng, mid, out_ch, 1, 1, 0, false),
            bn: BatchNorm2d::new(out_ch),
            act: None,
        };
        Self {
            expand,
            depthwise,
            project,
            skip: stride == 1 && in_ch == out_ch,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let h = self.expand.forward(x, train)?;
        let h = self.depthwise.forward(&h, train)?;
        let h = self.project.forward(&h, train)?;
        if self.skip {
            h.add(x)
        } else {
            Ok(h)
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.expand.collect(&format!("{prefix}.expand"), out);
        self.depthwise.collect(&format!("{prefix}.depthwise"), out);
        self.project.collect(&format!("{prefix}.project"), out);
    }

    pub fn collect_state(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.expand.collect_state(&format!("{prefix}.expand"), out);
        self.depthwise.collect_state(&format!("{prefix}.depthwise"), out);
        self.project.collect_state(&format!("{prefix}.project"), out);
    }
}
