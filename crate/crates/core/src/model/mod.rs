//! The boundary-delineation network.
//!
//! Pipeline: a lightweight inverted-residual encoder downsamples the image
//! through five stride-2 stages (saving the 1/2, 1/4 and 1/8 feature maps)
//! and embeds the 1/32 output; multi-scale fusion projects every saved
//! scale to a common width, resizes to 1/8 and fuses them; a pyramid
//! pooling stage injects multi-receptive-field context; a 1x1 head emits
//! coarse class logits at 1/8; boundary refinement upsamples the logits,
//! re-predicts the most uncertain pixels from point-sampled features with a
//! shared MLP and scatters the new logits back into the map.

mod checkpoint;
mod count;
mod layers;
mod points;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use count::{count_model, CountReport, ModuleCount};
pub use points::{margin_map, select_points, uncertainty, SelectedPoints};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelMap;
use crate::tensor::{invalid, Activation, Element, Result, Tensor};
use layers::{BatchNorm2d, Conv2dLayer, ConvBnAct, InvertedResidual};

/// Architectural hyperparameters. Input extents are fixed per model and
/// must be divisible by 32.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Output widths of the five stride-2 encoder stages.
    pub stage_channels: [usize; 5],
    /// Width of the stride-1 embedding block after stage 5.
    pub embed_channels: usize,
    /// Channel expansion inside inverted residuals.
    pub expand_ratio: usize,
    /// Depthwise kernel size inside inverted residuals.
    pub kernel_size: usize,
    /// Common width the per-scale 1x1 projections map to before fusion.
    pub fusion_channels: usize,
    /// Pyramid pooling bin extents, strictly increasing.
    pub psp_bins: Vec<usize>,
    pub psp_channels: usize,
    /// Hidden width of the per-point refinement MLP.
    pub head_hidden: usize,
    /// Number of refined points P (0 disables refinement diagnostically).
    pub num_points: usize,
    pub height: usize,
    pub width: usize,
    /// Ablation toggles; all true for the full model.
    pub multiscale: bool,
    pub psp: bool,
    pub refine: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (h, w) = (256, 256);
        Self {
            num_classes: 2,
            stage_channels: [16, 24, 32, 64, 128],
            embed_channels: 128,
            expand_ratio: 6,
            kernel_size: 3,
            fusion_channels: 64,
            psp_bins: vec![1, 2, 3, 6],
            psp_channels: 64,
            head_hidden: 256,
            num_points: Self::default_num_points(h, w),
            height: h,
            width: w,
            multiscale: true,
            psp: true,
            refine: true,
        }
    }
}

impl ModelConfig {
    /// 640 points at 256x256, scaled proportionally to the pixel count.
    pub fn default_num_points(h: usize, w: usize) -> usize {
        (((640 * h * w) as f64 / (256.0 * 256.0)).round() as usize).max(1)
    }

    /// Small configuration for fast desk-scale runs and gradient checks.
    pub fn toy(h: usize, w: usize) -> Self {
        let default = Self::default();
        let bins: Vec<usize> = default
            .psp_bins
            .iter()
            .copied()
            .filter(|&b| b <= (h / 8).min(w / 8))
            .collect();
        Self {
            stage_channels: [4, 4, 8, 8, 8],
            embed_channels: 8,
            fusion_channels: 16,
            psp_bins: bins,
            psp_channels: 16,
            head_hidden: 32,
            num_points: Self::default_num_points(h, w),
            height: h,
            width: w,
            ..default
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid("model_config", "num_classes must be >= 2"));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(invalid(
                "model_config",
                format!("input extents {}x{} must be divisible by 32", self.height, self.width),
            ));
        }
        for &c in self
            .stage_channels
            .iter()
            .chain([&self.embed_channels, &self.fusion_channels, &self.psp_channels, &self.head_hidden])
        {
            if c == 0 {
                return Err(invalid("model_config", "channel counts must be >= 1"));
            }
        }
        if self.expand_ratio == 0 {
            return Err(invalid("model_config", "expand_ratio must be >= 1"));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(invalid("model_config", "kernel_size must be odd and >= 1"));
        }
        if self.psp_bins.is_empty() {
            return Err(invalid("model_config", "psp_bins must not be empty"));
        }
        let (h8, w8) = (self.height / 8, self.width / 8);
        let mut prev = 0;
        for &b in &self.psp_bins {
            if b <= prev {
                return Err(invalid("model_config", "psp_bins must be strictly increasing"));
            }
            if b > h8 || b > w8 {
                return Err(invalid(
                    "model_config",
                    format!("psp bin {b} exceeds the 1/8 feature extent {h8}x{w8}"),
                ));
            }
            prev = b;
        }
        if self.num_points > self.height * self.width {
            return Err(invalid("model_config", "num_points exceeds the pixel count"));
        }
        Ok(())
    }

    /// Channel width of the fine-grained feature map fed to the heads.
    pub fn fine_channels(&self) -> usize {
        if self.psp {
            self.psp_channels
        } else if self.multiscale {
            self.fusion_channels
        } else {
            self.embed_channels
        }
    }

    /// Per-branch width inside the pyramid pooling stage.
    pub fn psp_branch_channels(&self) -> usize {
        (self.psp_channels / self.psp_bins.len().max(1)).max(1)
    }
}

/// Saved encoder features: 1/2, 1/4, 1/8 scales plus the embedded 1/32.
pub struct FeaturePyramid<E: Element> {
    pub f2: Tensor<E>,
    pub f4: Tensor<E>,
    pub f8: Tensor<E>,
    pub f32e: Tensor<E>,
}

/// Coordinates, margins, re-predicted logits and (in training) gathered
/// ground-truth labels of the refined point set.
#[derive(Debug)]
pub struct PointSet<E: Element> {
    /// Normalized (u, v) pixel centers, one list per image, most uncertain
    /// first.
    pub coords: Vec<Vec<(f64, f64)>>,
    /// Margins aligned with `coords`, non-decreasing per image.
    pub margins: Vec<Vec<f64>>,
    /// Re-predicted point logits `[N, C, P]`.
    pub logits: Option<Tensor<E>>,
    /// Ground-truth labels `[N, P]` gathered at the point pixels.
    pub labels: Option<LabelMap>,
}

/// Network output: coarse 1/8 logits, refined full-resolution logits and
/// the refined point set. The refined map differs from the plain upsampled
/// coarse map only at the scattered point pixels.
#[derive(Debug)]
pub struct Prediction<E: Element> {
    pub coarse_logits: Tensor<E>,
    pub refined_logits: Tensor<E>,
    pub points: Option<PointSet<E>>,
}

impl<E: Element> Prediction<E> {
    /// Argmax over channels of the refined logits: the predicted mask.
    pub fn mask(&self) -> LabelMap {
        let s = self.refined_logits.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xs = self.refined_logits.read();
        let mut data = vec![0u8; n * hw];
        for ni in 0..n {
            for l in 0..hw {
                let mut best = 0usize;
                let mut best_v = xs[(ni * c) * hw + l];
                for chan in 1..c {
                    let v = xs[(ni * c + chan) * hw + l];
                    if v > best_v {
                        best_v = v;
                        best = chan;
                    }
                }
                data[ni * hw + l] = best as u8;
            }
        }
        LabelMap::new(vec![n, s[2], s[3]], data).expect("mask shape")
    }
}

struct FusionModule<E: Element> {
    lateral2: Conv2dLayer<E>,
    lateral4: Conv2dLayer<E>,
    lateral8: Conv2dLayer<E>,
    lateral32: Conv2dLayer<E>,
    fuse: ConvBnAct<E>,
}

struct PspModule<E: Element> {
    branches: Vec<(usize, ConvBnAct<E>)>,
    fuse: ConvBnAct<E>,
}

struct PointHead<E: Element> {
    fc1: Conv2dLayer<E>,
    fc2: Conv2dLayer<E>,
    fc3: Conv2dLayer<E>,
}

/// The boundary-delineation network.
pub struct BdNet<E: Element = f32> {
    config: ModelConfig,
    stages: Vec<InvertedResidual<E>>,
    embed: InvertedResidual<E>,
    fusion: Option<FusionModule<E>>,
    psp: Option<PspModule<E>>,
    seg_head: Conv2dLayer<E>,
    point_head: Option<PointHead<E>>,
}

impl<E: Element> BdNet<E> {
    /// Builds a network with freshly initialized parameters; fully
    /// determined by `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;

        let mut stages = Vec::with_capacity(5);
        let mut in_ch = 1;
        for &out_ch in &config.stage_channels {
            stages.push(InvertedResidual::new(rng, in_ch, out_ch, 2, config.expand_ratio, k));
            in_ch = out_ch;
        }
        let embed = InvertedResidual::new(rng, in_ch, config.embed_channels, 1, config.expand_ratio, k);

        let fusion = config.multiscale.then(|| {
            let fc = config.fusion_channels;
            FusionModule {
                lateral2: Conv2dLayer::new(rng, config.stage_channels[0], fc, 1, 1, 0, true),
                lateral4: Conv2dLayer::new(rng, config.stage_channels[1], fc, 1, 1, 0, true),
                lateral8: Conv2dLayer::new(rng, config.stage_channels[2], fc, 1, 1, 0, true),
                lateral32: Conv2dLayer::new(rng, config.embed_channels, fc, 1, 1, 0, true),
                fuse: ConvBnAct {
                    conv: Conv2dLayer::new(rng, 4 * fc, fc, 3, 1, 1, false),
                    bn: BatchNorm2d::new(fc),
                    act: Some(Activation::Relu),
                },
            }
        });

        let psp_in = if config.multiscale {
            config.fusion_channels
        } else {
            config.embed_channels
        };
        let psp = config.psp.then(|| {
            let bc = config.psp_branch_channels();
            let branches = config
                .psp_bins
                .iter()
                .map(|&b| {
                    (
                        b,
                        ConvBnAct {
                            conv: Conv2dLayer::new(rng, psp_in, bc, 1, 1, 0, false),
                            bn: BatchNorm2d::new(bc),
                            act: Some(Activation::Relu),
                        },
                    )
                })
                .collect::<Vec<_>>();
            let cat_ch = psp_in + bc * config.psp_bins.len();
            PspModule {
                branches,
                fuse: ConvBnAct {
                    conv: Conv2dLayer::new(rng, cat_ch, config.psp_channels, 3, 1, 1, false),
                    bn: BatchNorm2d::new(config.psp_channels),
                    act: Some(Activation::Relu),
                },
            }
        });

        let seg_head = Conv2dLayer::new(rng, config.fine_channels(), config.num_classes, 1, 1, 0, true);

        let point_head = config.refine.then(|| {
            let in_ch = config.fine_channels() + config.num_classes;
            PointHead {
                fc1: Conv2dLayer::new(rng, in_ch, config.head_hidden, 1, 1, 0, true),
                fc2: Conv2dLayer::new(rng, config.head_hidden, config.head_hidden, 1, 1, 0, true),
                fc3: Conv2dLayer::new(rng, config.head_hidden, config.num_classes, 1, 1, 0, true),
            }
        });

        Ok(Self {
            config,
            stages,
            embed,
            fusion,
            psp,
            seg_head,
            point_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Five stride-2 stages then the stride-1 embedding; saves the 1/2,
    /// 1/4 and 1/8 maps along the way.
    pub fn encode(&self, image: &Tensor<E>, train: bool) -> Result<FeaturePyramid<E>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(invalid("encode", format!("expected [N, 1, H, W], got {s:?}")));
        }
        if s[2] != self.config.height || s[3] != self.config.width {
            return Err(invalid(
                "encode",
                format!(
                    "input {}x{} does not match the configured extents {}x{}",
                    s[2], s[3], self.config.height, self.config.width
                ),
            ));
        }
        let f2 = self.stages[0].forward(image, train)?;
        let f4 = self.stages[1].forward(&f2, train)?;
        let f8 = self.stages[2].forward(&f4, train)?;
        let f16 = self.stages[3].forward(&f8, train)?;
        let f32 = self.stages[4].forward(&f16, train)?;
        let f32e = self.embed.forward(&f32, train)?;
        Ok(FeaturePyramid { f2, f4, f8, f32e })
    }

    /// Projects each pyramid scale to a common width with a 1x1 map,
    /// resizes everything to 1/8, concatenates and fuses with a 3x3 unit.
    pub fn fuse_multiscale(&self, pyramid: &FeaturePyramid<E>, train: bool) -> Result<Tensor<E>> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| invalid("fuse_multiscale", "multi-scale fusion is disabled"))?;
        let (h8, w8) = (self.config.height / 8, self.config.width / 8);
        let l2 = fusion.lateral2.forward(&pyramid.f2)?.bilinear_resize(h8, w8)?;
        let l4 = fusion.lateral4.forward(&pyramid.f4)?.bilinear_resize(h8, w8)?;
        let l8 = fusion.lateral8.forward(&pyramid.f8)?.bilinear_resize(h8, w8)?;
        let l32 = fusion.lateral32.forward(&pyramid.f32e)?.bilinear_resize(h8, w8)?;
        let cat = Tensor::concat_channels(&[l2, l4, l8, l32])?;
        fusion.fuse.forward(&cat, train)
    }

    /// Pyramid pooling: per bin, adaptive average pool, 1x1 unit, resize
    /// back to 1/8; the input is concatenated with every branch so nothing
    /// is lost, then fused with a 3x3 unit.
    pub fn psp(&self, f: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let psp = self
            .psp
            .as_ref()
            .ok_or_else(|| invalid("psp", "pyramid pooling is disabled"))?;
        let (h8, w8) = (self.config.height / 8, self.config.width / 8);
        let mut parts = vec![f.clone()];
        for (bin, unit) in &psp.branches {
            let pooled = f.adaptive_avg_pool2d(*bin, *bin)?;
            let mapped = unit.forward(&pooled, train)?;
            parts.push(mapped.bilinear_resize(h8, w8)?);
        }
        let cat = Tensor::concat_channels(&parts)?;
        psp.fuse.forward(&cat, train)
    }

    /// 1x1 convolution from fine features to class logits (no activation).
    pub fn seg_head(&self, f_fine: &Tensor<E>) -> Result<Tensor<E>> {
        self.seg_head.forward(f_fine)
    }

    /// Fine-grained features for the configured ablation variant.
    fn fine_features(&self, pyramid: &FeaturePyramid<E>, train: bool) -> Result<Tensor<E>> {
        let base = if self.config.multiscale {
            self.fuse_multiscale(pyramid, train)?
        } else {
            let (h8, w8) = (self.config.height / 8, self.config.width / 8);
            pyramid.f32e.bilinear_resize(h8, w8)?
        };
        if self.config.psp {
            self.psp(&base, train)
        } else {
            Ok(base)
        }
    }

    /// Boundary refinement: upsample the coarse logits, select the P most
    /// uncertain pixels, re-predict them from concatenated point-sampled
    /// fine features and coarse logits with the shared MLP, and scatter the
    /// results back. In training mode ground-truth labels are gathered at
    /// the same pixels.
    pub fn refine(
        &self,
        coarse_logits: &Tensor<E>,
        f_fine: &Tensor<E>,
        train: bool,
        labels: Option<&LabelMap>,
    ) -> Result<Prediction<E>> {
        let (h, w) = (self.config.height, self.config.width);
        let up = coarse_logits.bilinear_resize(h, w)?;
        let head = match (&self.point_head, self.config.num_points) {
            (Some(head), p) if p > 0 => head,
            _ => {
                return Ok(Prediction {
                    coarse_logits: coarse_logits.clone(),
                    refined_logits: up,
                    points: None,
                });
            }
        };
        let p = self.config.num_points;
        let selected = select_points(&up, p)?;

        let fine_pts = f_fine.sample_points_bilinear(&selected.coords)?;
        let coarse_pts = up.sample_points_bilinear(&selected.coords)?;
        let cat = Tensor::concat_channels(&[fine_pts, coarse_pts])?;
        let n = cat.shape()[0];
        let cin = cat.shape()[1];
        let h1 = head.fc1.forward(&cat.reshape(vec![n, cin, p, 1])?)?.relu()?;
        let h2 = head.fc2.forward(&h1)?.relu()?;
        let point_logits = head
            .fc3
            .forward(&h2)?
            .reshape(vec![n, self.config.num_classes, p])?;

        let refined = up.scatter_points(&selected.coords, &point_logits)?;

        let gathered = match (train, labels) {
            (true, Some(lab)) => {
                let mut data = Vec::with_capacity(n * p);
                for (ni, idxs) in selected.pixel_indices.iter().enumerate() {
                    for &pix in idxs {
                        data.push(lab.at3(ni, pix / w, pix % w));
                    }
                }
                Some(LabelMap::new(vec![n, p], data).expect("point label shape"))
            }
            _ => None,
        };

        Ok(Prediction {
            coarse_logits: coarse_logits.clone(),
            refined_logits: refined,
            points: Some(PointSet {
                coords: selected.coords,
                margins: selected.margins,
                logits: Some(point_logits),
                labels: gathered,
            }),
        })
    }

    /// Full pipeline: encode, fuse, pool, coarse head, refine.
    ///
    /// `labels` is only consulted in training mode, to gather ground truth
    /// at the refined points.
    pub fn forward(
        &self,
        image: &Tensor<E>,
        train: bool,
        labels: Option<&LabelMap>,
    ) -> Result<Prediction<E>> {
        let pyramid = self.encode(image, train)?;
        let fine = self.fine_features(&pyramid, train)?;
        let coarse = self.seg_head(&fine)?;
        self.refine(&coarse, &fine, train, labels)
    }

    /// Learnable parameters in a fixed, name-keyed order.
    pub fn parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect(&format!("encoder.stage{}", i + 1), &mut out);
        }
        self.embed.collect("encoder.embed", &mut out);
        if let Some(f) = &self.fusion {
            f.lateral2.collect("fusion.lateral2", &mut out);
            f.lateral4.collect("fusion.lateral4", &mut out);
            f.lateral8.collect("fusion.lateral8", &mut out);
            f.lateral32.collect("fusion.lateral32", &mut out);
            f.fuse.collect("fusion.fuse", &mut out);
        }
        if let Some(p) = &self.psp {
            for (i, (_, unit)) in p.branches.iter().enumerate() {
                unit.collect(&format!("psp.branch{i}"), &mut out);
            }
            p.fuse.collect("psp.fuse", &mut out);
        }
        self.seg_head.collect("seg_head", &mut out);
        if let Some(h) = &self.point_head {
            h.fc1.collect("point_head.fc1", &mut out);
            h.fc2.collect("point_head.fc2", &mut out);
            h.fc3.collect("point_head.fc3", &mut out);
        }
        out
    }

    /// Non-learnable state (batch-norm running statistics), name-keyed.
    pub fn state_buffers(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect_state(&format!("encoder.stage{}", i + 1), &mut out);
        }
        self.embed.collect_state("encoder.embed", &mut out);
        if let Some(f) = &self.fusion {
            f.fuse.collect_state("fusion.fuse", &mut out);
        }
        if let Some(p) = &self.psp {
            for (i, (_, unit)) in p.branches.iter().enumerate() {
                unit.collect_state(&format!("psp.branch{i}"), &mut out);
            }
            p.fuse.collect_state("psp.fuse", &mut out);
        }
        out
    }

    /// Total learnable parameter count (enumerated from the live tensors).
    pub fn parameter_total(&self) -> u64 {
        self.parameters().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.parameters() {
            t.zero_grad();
        }
    }
}
