//! Parameter and FLOP accounting.
//!
//! Counts are exact enumerations over the layer geometry implied by a
//! configuration; a test pins them to the live tensor shapes. The FLOP
//! convention throughout is 2 operations per multiply-accumulate, plus the
//! cheap elementwise work (activations, normalization, interpolation), all
//! reported at the configured input extents for one image.

use super::ModelConfig;

/// Parameter and FLOP totals of one module group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModuleCount {
    pub params: u64,
    /// Work that scales with the image area (convolutions, normalization,
    /// activations, pooling, interpolation over maps).
    pub area_flops: u64,
    /// Work that scales with the refined point count.
    pub point_flops: u64,
    /// Work at fixed extents (the pooled-bin interiors of the pyramid),
    /// independent of both area and point count.
    pub fixed_flops: u64,
}

impl ModuleCount {
    pub fn flops(&self) -> u64 {
        self.area_flops + self.point_flops + self.fixed_flops
    }

    fn conv(&mut self, ci: usize, co: usize, k: usize, oh: usize, ow: usize, bias: bool) {
        self.params += (co * ci * k * k + if bias { co } else { 0 }) as u64;
        self.area_flops += 2 * (co * ci * k * k * oh * ow) as u64;
        if bias {
            self.area_flops += (co * oh * ow) as u64;
        }
    }

    /// Convolution whose extents are bin-fixed rather than area-scaled.
    fn conv_fixed(&mut self, ci: usize, co: usize, k: usize, oh: usize, ow: usize) {
        self.params += (co * ci * k * k) as u64;
        self.fixed_flops += 2 * (co * ci * k * k * oh * ow) as u64;
    }

    fn depthwise(&mut self, c: usize, k: usize, oh: usize, ow: usize) {
        self.params += (c * k * k) as u64;
        self.area_flops += 2 * (c * k * k * oh * ow) as u64;
    }

    fn bn(&mut self, c: usize, h: usize, w: usize) {
        self.params += 2 * c as u64;
        self.area_flops += 2 * (c * h * w) as u64;
    }

    fn bn_fixed(&mut self, c: usize, h: usize, w: usize) {
        self.params += 2 * c as u64;
        self.fixed_flops += 2 * (c * h * w) as u64;
    }

    fn act(&mut self, c: usize, h: usize, w: usize) {
        self.area_flops += (c * h * w) as u64;
    }

    fn resize(&mut self, c: usize, oh: usize, ow: usize) {
        // 4 multiplies + 3 adds per interpolated value.
        self.area_flops += 7 * (c * oh * ow) as u64;
    }

    fn pool_to_bins(&mut self, c: usize, h: usize, w: usize, oh: usize, ow: usize) {
        self.area_flops += (c * h * w) as u64;
        self.fixed_flops += (c * oh * ow) as u64;
    }

    fn add(&mut self, c: usize, h: usize, w: usize) {
        self.area_flops += (c * h * w) as u64;
    }
}

/// Full accounting: per-module counts, the conventional-convolution twin of
/// the downsampling module and the separable-vs-conventional unit totals
/// the parameter-ratio identity predicts.
#[derive(Debug, Clone)]
pub struct CountReport {
    pub height: usize,
    pub width: usize,
    pub downsampling: ModuleCount,
    pub fusion: ModuleCount,
    pub boundary_refinement: ModuleCount,
    /// Twin downsampling module with each depthwise + pointwise pair
    /// replaced by one conventional K x K convolution, all else unchanged.
    pub conv_twin_downsampling: ModuleCount,
    /// Depthwise + projection units (with their batch norms) summed over
    /// all encoder blocks.
    pub separable_unit_params: u64,
    /// The conventional K x K units (with batch norm) of the twin.
    pub twin_unit_params: u64,
    /// Bias-free ratio the parameter identity predicts for those units:
    /// sum(mid*K^2 + mid*co) / sum(mid*co*K^2).
    pub predicted_unit_ratio: f64,
}

impl CountReport {
    pub fn total(&self) -> ModuleCount {
        ModuleCount {
            params: self.downsampling.params + self.fusion.params + self.boundary_refinement.params,
            area_flops: self.downsampling.area_flops
                + self.fusion.area_flops
                + self.boundary_refinement.area_flops,
            point_flops: self.downsampling.point_flops
                + self.fusion.point_flops
                + self.boundary_refinement.point_flops,
            fixed_flops: self.downsampling.fixed_flops
                + self.fusion.fixed_flops
                + self.boundary_refinement.fixed_flops,
        }
    }

    /// Share of the downsampling module in the whole model, in percent.
    pub fn downsampling_param_share(&self) -> f64 {
        100.0 * self.downsampling.params as f64 / self.total().params as f64
    }

    /// Enumerated separable/conventional unit ratio (batch norms included).
    pub fn enumerated_unit_ratio(&self) -> f64 {
        self.separable_unit_params as f64 / self.twin_unit_params as f64
    }
}

struct BlockGeometry {
    in_ch: usize,
    out_ch: usize,
    mid: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    skip: bool,
}

fn encoder_blocks(config: &ModelConfig) -> Vec<BlockGeometry> {
    let (mut h, mut w) = (config.height, config.width);
    let mut blocks = Vec::new();
    let mut in_ch = 1;
    for &out_ch in &config.stage_channels {
        blocks.push(BlockGeometry {
            in_ch,
            out_ch,
            mid: in_ch * config.expand_ratio,
            h_in: h,
            w_in: w,
            h_out: h / 2,
            w_out: w / 2,
            skip: false,
        });
        h /= 2;
        w /= 2;
        in_ch = out_ch;
    }
    blocks.push(BlockGeometry {
        in_ch,
        out_ch: config.embed_channels,
        mid: in_ch * config.expand_ratio,
        h_in: h,
        w_in: w,
        h_out: h,
        w_out: w,
        skip: in_ch == config.embed_channels,
    });
    blocks
}

/// Exact parameter and FLOP enumeration for a configuration.
pub fn count_model(config: &ModelConfig) -> CountReport {
    let k = config.kernel_size;
    let blocks = encoder_blocks(config);

    let mut down = ModuleCount::default();
    let mut twin = ModuleCount::default();
    let mut separable_unit_params = 0u64;
    let mut twin_unit_params = 0u64;
    let mut bare_separable = 0u64;
    let mut bare_twin = 0u64;
    for b in &blocks {
        // Shared expansion.
        for acc in [&mut down, &mut twin] {
            acc.conv(b.in_ch, b.mid, 1, b.h_in, b.w_in, false);
            acc.bn(b.mid, b.h_in, b.w_in);
            acc.act(b.mid, b.h_in, b.w_in);
        }
        // Separable unit: depthwise + BN + relu6 + projection + BN.
        down.depthwise(b.mid, k, b.h_out, b.w_out);
        down.bn(b.mid, b.h_out, b.w_out);
        down.act(b.mid, b.h_out, b.w_out);
        down.conv(b.mid, b.out_ch, 1, b.h_out, b.w_out, false);
        down.bn(b.out_ch, b.h_out, b.w_out);
        // Twin unit: one conventional K x K convolution + BN.
        twin.conv(b.mid, b.out_ch, k, b.h_out, b.w_out, false);
        twin.bn(b.out_ch, b.h_out, b.w_out);
        if b.skip {
            down.add(b.out_ch, b.h_out, b.w_out);
            twin.add(b.out_ch, b.h_out, b.w_out);
        }

        separable_unit_params +=
            (b.mid * k * k + 2 * b.mid + b.mid * b.out_ch + 2 * b.out_ch) as u64;
        twin_unit_params += (b.mid * b.out_ch * k * k + 2 * b.out_ch) as u64;
        bare_separable += (b.mid * k * k + b.mid * b.out_ch) as u64;
        bare_twin += (b.mid * b.out_ch * k * k) as u64;
    }

    let (h8, w8) = (config.height / 8, config.width / 8);
    let mut fusion = ModuleCount::default();
    if config.multiscale {
        let fc = config.fusion_channels;
        let laterals = [
            (config.stage_channels[0], config.height / 2, config.width / 2),
            (config.stage_channels[1], config.height / 4, config.width / 4),
            (config.stage_channels[2], h8, w8),
            (config.embed_channels, config.height / 32, config.width / 32),
        ];
        for (ci, h, w) in laterals {
            fusion.conv(ci, fc, 1, h, w, true);
            fusion.resize(fc, h8, w8);
        }
        fusion.conv(4 * fc, fc, 3, h8, w8, false);
        fusion.bn(fc, h8, w8);
        fusion.act(fc, h8, w8);
    } else {
        fusion.resize(config.embed_channels, h8, w8);
    }
    if config.psp {
        let psp_in = if config.multiscale {
            config.fusion_channels
        } else {
            config.embed_channels
        };
        let bc = config.psp_branch_channels();
        for &bin in &config.psp_bins {
            fusion.pool_to_bins(psp_in, h8, w8, bin, bin);
            fusion.conv_fixed(psp_in, bc, 1, bin, bin);
            fusion.bn_fixed(bc, bin, bin);
            fusion.fixed_flops += (bc * bin * bin) as u64; // relu on the bins
            fusion.resize(bc, h8, w8);
        }
        let cat = psp_in + bc * config.psp_bins.len();
        fusion.conv(cat, config.psp_channels, 3, h8, w8, false);
        fusion.bn(config.psp_channels, h8, w8);
        fusion.act(config.psp_channels, h8, w8);
    }
    // Coarse head: part of the feature-extraction side of the pipeline.
    fusion.conv(config.fine_channels(), config.num_classes, 1, h8, w8, true);

    let mut refine = ModuleCount::default();
    refine.resize(config.num_classes, config.height, config.width);
    let c = config.num_classes as u64;
    let fine = config.fine_channels() as u64;
    let hidden = config.head_hidden as u64;
    let cin = fine + c;
    if config.refine {
        refine.params += cin * hidden + hidden;
        refine.params += hidden * hidden + hidden;
        refine.params += hidden * c + c;
    }
    if config.refine && config.num_points > 0 {
        let p = config.num_points as u64;
        refine.point_flops += 7 * p * (fine + c); // bilinear point sampling
        refine.point_flops += p * (2 * cin * hidden + hidden + hidden); // fc1 + bias + relu
        refine.point_flops += p * (2 * hidden * hidden + hidden + hidden); // fc2 + bias + relu
        refine.point_flops += p * (2 * hidden * c + c); // fc3 + bias
        refine.point_flops += p * c; // scatter
    }

    CountReport {
        height: config.height,
        width: config.width,
        downsampling: down,
        fusion,
        boundary_refinement: refine,
        conv_twin_downsampling: twin,
        separable_unit_params,
        twin_unit_params,
        predicted_unit_ratio: bare_separable as f64 / bare_twin as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pointwise_conv_params() {
        // A 1x1 convolution 4 -> 8 with bias: 4*8 + 8 = 40 parameters.
        let mut m = ModuleCount::default();
        m.conv(4, 8, 1, 10, 10, true);
        assert_eq!(m.params, 40);
    }

    #[test]
    fn doubling_extent_quadruples_area_flops_only() {
        let small = count_model(&ModelConfig::toy(64, 64));
        let big = count_model(&ModelConfig {
            num_points: ModelConfig::toy(64, 64).num_points,
            ..ModelConfig::toy(128, 128)
        });
        assert_eq!(small.total().params, big.total().params);
        assert_eq!(4 * small.total().area_flops, big.total().area_flops);
        assert_eq!(small.total().point_flops, big.total().point_flops);
        assert_eq!(small.total().fixed_flops, big.total().fixed_flops);
    }

    #[test]
    fn default_widths_beat_the_conv_twin_by_5x() {
        let report = count_model(&ModelConfig::default());
        assert!(report.downsampling.params * 5 < report.conv_twin_downsampling.params);
        let enumerated = report.enumerated_unit_ratio();
        let predicted = report.predicted_unit_ratio;
        assert!(
            (enumerated / predicted - 1.0).abs() <= 0.15,
            "enumerated {enumerated} vs predicted {predicted}"
        );
    }
}
