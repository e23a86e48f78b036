//! Analytic multiply-accumulate and parameter counts.
//!
//! One MAC counts as one FLOP. Convolutions cost `k²·c_in·c_out·h_out·w_out`
//! MACs and carry `k²·c_in·c_out + c_out` parameters; dilation only changes
//! the output grid. Pooling, resizing and element-wise layers cost nothing.
//! Codeword generation and assembly products cost `n·c·h·w`.
//!
//! Segmentation rows use a ResNet encoder with its segmentation head and an
//! auxiliary head on the stride-16 stage. Detection rows cover the ResNet-50
//! encoder, the pyramid and the pyramid decoder; detection heads are
//! excluded.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpn::FpnConfig;
use crate::hgd::{HgdConfig, STRIDES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv { kernel: usize, stride: usize, dilation: usize },
    /// Transposed convolution whose kernel equals its stride.
    Deconv { kernel: usize },
    Pool,
    Resize,
    Elementwise,
    /// `n`-term product per output element (codeword generation/assembly).
    Matmul { n: usize },
    /// Free learned scalars.
    Scalars { count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Weights are shared with an earlier layer and not counted again.
    pub shares_weights: bool,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind, c_in: usize, c_out: usize, out: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            kind,
            c_in,
            c_out,
            out_h: out.0,
            out_w: out.1,
            shares_weights: false,
        }
    }

    pub fn conv(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, out: (usize, usize)) -> Self {
        Self::new(
            name,
            LayerKind::Conv {
                kernel,
                stride: 1,
                dilation: 1,
            },
            c_in,
            c_out,
            out,
        )
    }
}

/// `(macs, params)` of one layer.
pub fn count_layer(spec: &LayerSpec) -> Result<(u64, u64)> {
    let area = (spec.out_h * spec.out_w) as u64;
    let (ci, co) = (spec.c_in as u64, spec.c_out as u64);
    let (macs, params) = match spec.kind {
        LayerKind::Conv { kernel, stride, dilation } => {
            if kernel == 0 || stride == 0 || dilation == 0 {
                return Err(Error::Config(format!("layer `{}`: zero kernel, stride or dilation", spec.name)));
            }
            let k2 = (kernel * kernel) as u64;
            (k2 * ci * co * area, k2 * ci * co + co)
        }
        LayerKind::Deconv { kernel } => {
            if kernel == 0 {
                return Err(Error::Config(format!("layer `{}`: zero kernel", spec.name)));
            }
            let k2 = (kernel * kernel) as u64;
            // Every input pixel scatters a k×k patch: k²·c_in·c_out per input pixel.
            (k2 * ci * co * area / k2, k2 * ci * co + co)
        }
        LayerKind::Pool | LayerKind::Resize | LayerKind::Elementwise => (0, 0),
        LayerKind::Matmul { n } => (n as u64 * co * area, 0),
        LayerKind::Scalars { count } => (0, count as u64),
    };
    Ok((macs, if spec.shares_weights { 0 } else { params }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchSpec {
    pub name: String,
    pub input: (usize, usize),
    pub tags: IndexMap<String, String>,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(name: impl Into<String>, input: (usize, usize)) -> Self {
        Self {
            name: name.into(),
            input,
            tags: IndexMap::new(),
            layers: Vec::new(),
        }
    }

    fn tag(mut self, key: &str, value: impl ToString) -> Self {
        self.tags.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub name: String,
    pub rows: Vec<CostRow>,
    pub total_macs: u64,
    pub total_params: u64,
    pub convention: &'static str,
}

pub const CONVENTION: &str = "1 MAC = 1 FLOP; resize, pooling and element-wise layers cost 0";

impl CostReport {
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    /// Summed MACs and params of layers whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.layer.starts_with(prefix))
            .fold((0, 0), |(m, p), r| (m + r.macs, p + r.params))
    }

    /// `layer,macs,params` rows in spec order, then a `total` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["layer", "macs", "params"]).map_err(fail)?;
        for r in &self.rows {
            w.write_record([r.layer.clone(), r.macs.to_string(), r.params.to_string()])
                .map_err(fail)?;
        }
        w.write_record(["total".to_string(), self.total_macs.to_string(), self.total_params.to_string()])
            .map_err(fail)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>16}  {:>12}", "layer", "macs", "params");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>16}  {:>12}", r.layer, r.macs, r.params);
        }
        let _ = writeln!(out, "{:<width$}  {:>16}  {:>12}", "total", self.total_macs, self.total_params);
        let _ = writeln!(
            out,
            "{}: {:.2} GMACs, {:.2} M params ({})",
            self.name,
            self.gmacs(),
            self.mparams(),
            self.convention
        );
        out
    }
}

pub fn emit_report(spec: &ArchSpec) -> Result<CostReport> {
    let mut rows = Vec::with_capacity(spec.layers.len());
    let (mut total_macs, mut total_params) = (0, 0);
    for l in &spec.layers {
        let (macs, params) = count_layer(l)?;
        total_macs += macs;
        total_params += params;
        rows.push(CostRow {
            layer: l.name.clone(),
            macs,
            params,
        });
    }
    Ok(CostReport {
        name: spec.name.clone(),
        rows,
        total_macs,
        total_params,
        convention: CONVENTION,
    })
}

// ---------------------------------------------------------------------------
// Builders

/// Output length of a "same"-padded convolution or pooling window.
fn out_len(len: usize, kernel: usize, stride: usize, dilation: usize) -> usize {
    let pad = dilation * (kernel - 1) / 2;
    (len + 2 * pad - dilation * (kernel - 1) - 1) / stride + 1
}

type Grid = (usize, usize);

fn conv_layer(name: String, c_in: usize, c_out: usize, kernel: usize, stride: usize, dilation: usize, input: Grid) -> LayerSpec {
    let out = (
        out_len(input.0, kernel, stride, dilation),
        out_len(input.1, kernel, stride, dilation),
    );
    LayerSpec::new(name, LayerKind::Conv { kernel, stride, dilation }, c_in, c_out, out)
}

fn grid(l: &LayerSpec) -> Grid {
    (l.out_h, l.out_w)
}

/// One encoder stage output: `(channels, grid)`.
pub type Tap = (usize, Grid);

fn resnet_blocks(depth: usize) -> Result<[usize; 4]> {
    match depth {
        50 => Ok([3, 4, 6, 3]),
        101 => Ok([3, 4, 23, 3]),
        _ => Err(Error::UnknownArch(format!("resnet{depth}"))),
    }
}

/// Bottleneck ResNet encoder (stride on the 3×3 convolution). With
/// `dilated_last_two`, stages 4 and 5 keep stride 8 and dilate by 2 and 4.
/// Returns the four stage outputs at strides 4, 8, 16, 32 (or 4, 8, 8, 8).
pub fn resnet_layers(depth: usize, input: Grid, dilated_last_two: bool, out: &mut Vec<LayerSpec>) -> Result<[Tap; 4]> {
    let blocks = resnet_blocks(depth)?;
    let stem = conv_layer("stem.conv".into(), 3, 64, 7, 2, 1, input);
    let mut g = grid(&stem);
    out.push(stem);
    g = (out_len(g.0, 3, 2, 1), out_len(g.1, 3, 2, 1));
    out.push(LayerSpec::new("stem.pool", LayerKind::Pool, 64, 64, g));

    let mut c_in = 64;
    let mut taps = [(0, (0, 0)); 4];
    for (s, &count) in blocks.iter().enumerate() {
        let planes = 64 << s;
        let (stride, dilation) = match (s, dilated_last_two) {
            (0, _) => (1, 1),
            (2, true) => (1, 2),
            (3, true) => (1, 4),
            _ => (2, 1),
        };
        for b in 0..count {
            let prefix = format!("layer{}.{b}", s + 1);
            let st = if b == 0 { stride } else { 1 };
            let c1 = conv_layer(format!("{prefix}.conv1"), c_in, planes, 1, 1, 1, g);
            let c2 = conv_layer(format!("{prefix}.conv2"), planes, planes, 3, st, dilation, g);
            let g2 = grid(&c2);
            let c3 = conv_layer(format!("{prefix}.conv3"), planes, planes * 4, 1, 1, 1, g2);
            out.extend([c1, c2, c3]);
            if b == 0 {
                out.push(conv_layer(format!("{prefix}.downsample"), c_in, planes * 4, 1, st, 1, g));
            }
            out.push(LayerSpec::new(format!("{prefix}.add"), LayerKind::Elementwise, planes * 4, planes * 4, g2));
            g = g2;
            c_in = planes * 4;
        }
        taps[s] = (c_in, g);
    }
    Ok(taps)
}

fn check_input(input: Grid, multiple: usize) -> Result<()> {
    if input.0 == 0 || input.1 == 0 || input.0 % multiple != 0 || input.1 % multiple != 0 {
        return Err(Error::Config(format!(
            "input {}x{} must be a positive multiple of {multiple}",
            input.0, input.1
        )));
    }
    Ok(())
}

/// Default class count of the segmentation rows (59 classes plus background).
pub const SEG_CLASSES: usize = 60;

fn fcn_head(prefix: &str, tap: Tap, mid: usize, classes: usize, out: &mut Vec<LayerSpec>) {
    out.push(conv_layer(format!("{prefix}.conv"), tap.0, mid, 3, 1, 1, tap.1));
    out.push(conv_layer(format!("{prefix}.classifier"), mid, classes, 1, 1, 1, tap.1));
}

fn aux_head(taps: &[Tap; 4], classes: usize, out: &mut Vec<LayerSpec>) {
    fcn_head("aux", taps[2], taps[2].0 / 4, classes, out);
}

/// ResNet encoder with an FCN head (3×3 to a quarter of the width, then a
/// 1×1 classifier) on its last stage and the auxiliary head on stage 4.
pub fn resnet_spec(depth: usize, input: Grid, dilated_last_two: bool) -> Result<ArchSpec> {
    check_input(input, 32)?;
    let name = format!("resnet{depth}{}", if dilated_last_two { "-dilated" } else { "" });
    let mut spec = ArchSpec::new(name, input)
        .tag("depth", depth)
        .tag("dilated_last_two", dilated_last_two)
        .tag("classes", SEG_CLASSES);
    let taps = resnet_layers(depth, input, dilated_last_two, &mut spec.layers)?;
    fcn_head("head", taps[3], taps[3].0 / 4, SEG_CLASSES, &mut spec.layers);
    aux_head(&taps, SEG_CLASSES, &mut spec.layers);
    Ok(spec)
}

/// Layers of one segmentation decoder over taps at strides 8, 16 and 32.
pub fn hgd_layers(prefix: &str, cfg: &HgdConfig, taps: [Tap; 3], out: &mut Vec<LayerSpec>) -> Result<()> {
    cfg.validate()?;
    let p = |s: &str| format!("{prefix}.{s}");
    for (i, stride) in STRIDES.iter().enumerate() {
        if cfg.code_scales.contains(stride) || cfg.guide_scales.contains(stride) {
            out.push(LayerSpec::conv(p(&format!("compress{stride}")), taps[i].0, cfg.compressed_channels, 1, taps[i].1));
        }
    }
    let (g8, g32) = (taps[0].1, taps[2].1);
    let code_in = cfg.code_input_channels();
    let guide_in = cfg.guide_input_channels();
    out.push(LayerSpec::new(p("fuse32"), LayerKind::Resize, code_in, code_in, g32));
    out.push(LayerSpec::conv(p("bases"), code_in, cfg.codeword_dim, 1, g32));
    out.push(LayerSpec::conv(p("weighting"), code_in, cfg.n_codewords, 1, g32));
    out.push(LayerSpec::new(p("codewords"), LayerKind::Matmul { n: cfg.n_codewords }, cfg.codeword_dim, cfg.codeword_dim, g32));
    out.push(LayerSpec::new(p("fuse8"), LayerKind::Resize, guide_in, guide_in, g8));
    out.push(LayerSpec::conv(p("guidance"), guide_in, cfg.guidance_channels, 1, g8));
    out.push(LayerSpec::conv(p("assembly"), cfg.guidance_channels, cfg.n_codewords, 1, g8));
    out.push(LayerSpec::new(p("upsample"), LayerKind::Matmul { n: cfg.n_codewords }, cfg.codeword_dim, cfg.codeword_dim, g8));
    Ok(())
}

/// Full-size decoder widths with `n` codewords of dimension `c`.
pub fn efficientfcn_decoder(n: usize, c: usize) -> HgdConfig {
    HgdConfig {
        n_codewords: n,
        codeword_dim: c,
        guidance_channels: c,
        ..HgdConfig::full_scale()
    }
}

/// ResNet-101 encoder without dilation, the decoder, a 1×1 classifier on
/// the stride-8 output and the auxiliary head.
pub fn efficientfcn_spec(n: usize, c: usize, input: Grid) -> Result<ArchSpec> {
    check_input(input, 32)?;
    let cfg = efficientfcn_decoder(n, c);
    let mut spec = ArchSpec::new("efficientfcn", input)
        .tag("n", n)
        .tag("c", c)
        .tag("classes", SEG_CLASSES);
    let taps = resnet_layers(101, input, false, &mut spec.layers)?;
    hgd_layers("hgd", &cfg, [taps[1], taps[2], taps[3]], &mut spec.layers)?;
    spec.layers
        .push(LayerSpec::conv("classifier", cfg.output_channels(), SEG_CLASSES, 1, taps[1].1));
    spec.layers
        .push(LayerSpec::new("upsample8", LayerKind::Resize, SEG_CLASSES, SEG_CLASSES, input));
    aux_head(&taps, SEG_CLASSES, &mut spec.layers);
    Ok(spec)
}

/// U-Net style decoder to stride 8: every tap compressed to 512, merged
/// top-down by bilinear upsampling (or 2×2 deconvolution) plus addition,
/// and refined by one 3×3 convolution per merge.
pub fn unet_spec(deconv: bool, input: Grid) -> Result<ArchSpec> {
    check_input(input, 32)?;
    const WIDTH: usize = 512;
    let name = if deconv { "unet-deconv" } else { "unet-bilinear" };
    let mut spec = ArchSpec::new(name, input).tag("classes", SEG_CLASSES);
    let taps = resnet_layers(101, input, false, &mut spec.layers)?;
    for (i, tap) in taps[1..].iter().enumerate() {
        spec.layers
            .push(LayerSpec::conv(format!("compress{}", 8 << i), tap.0, WIDTH, 1, tap.1));
    }
    for (i, tap) in [taps[2], taps[1]].iter().enumerate() {
        let up = if deconv {
            LayerSpec::new(format!("up{i}"), LayerKind::Deconv { kernel: 2 }, WIDTH, WIDTH, tap.1)
        } else {
            LayerSpec::new(format!("up{i}"), LayerKind::Resize, WIDTH, WIDTH, tap.1)
        };
        spec.layers.push(up);
        spec.layers
            .push(LayerSpec::new(format!("merge{i}"), LayerKind::Elementwise, WIDTH, WIDTH, tap.1));
        spec.layers.push(LayerSpec::conv(format!("refine{i}"), WIDTH, WIDTH, 3, tap.1));
    }
    spec.layers
        .push(LayerSpec::conv("classifier", WIDTH, SEG_CLASSES, 1, taps[1].1));
    aux_head(&taps, SEG_CLASSES, &mut spec.layers);
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpnVariant {
    /// Plain top-down feature pyramid.
    Fpn,
    /// Feature pyramid followed by `k` holistically-guided decoding stages.
    HgdFpn,
}

/// Level grids P3..P7 for an input, each level halving the previous one
/// with odd extents rounding up. The finest level is at stride 4.
pub fn detection_grids(input: Grid) -> [Grid; 5] {
    let mut g = [(0, 0); 5];
    let mut cur = (input.0.div_ceil(4), input.1.div_ceil(4));
    for slot in &mut g {
        *slot = cur;
        cur = (cur.0.div_ceil(2), cur.1.div_ceil(2));
    }
    g
}

/// One decoding stage over levels with the given grids. Branch kernels use
/// `cfg.branch_kernel`.
pub fn hgd_fpn_stage_layers(prefix: &str, cfg: &FpnConfig, grids: [Grid; 5], shared: bool, out: &mut Vec<LayerSpec>) -> Result<()> {
    cfg.validate()?;
    let k = cfg.branch_kernel;
    let c = cfg.output_channels;
    let p = |s: &str| format!("{prefix}.{s}");
    let start = out.len();
    out.push(LayerSpec::new(p("coeffs"), LayerKind::Scalars { count: 14 }, 0, 0, (1, 1)));
    out.push(LayerSpec::new(p("code_map"), LayerKind::Elementwise, c, c, grids[3]));
    out.push(LayerSpec::conv(p("bases"), c, cfg.codeword_dim, k, grids[3]));
    out.push(LayerSpec::conv(p("weighting"), c, cfg.n_codewords, k, grids[3]));
    out.push(LayerSpec::new(p("codewords"), LayerKind::Matmul { n: cfg.n_codewords }, cfg.codeword_dim, cfg.codeword_dim, grids[3]));
    for level in [1usize, 2, 3] {
        let g = grids[level];
        let s = |name: &str| p(&format!("scale{}.{name}", level + 3));
        out.push(LayerSpec::new(s("fuse"), LayerKind::Elementwise, c, c, g));
        out.push(LayerSpec::conv(s("guidance"), c, cfg.guidance_channels, k, g));
        out.push(LayerSpec::conv(s("assembly"), cfg.guidance_channels, cfg.n_codewords, k, g));
        out.push(LayerSpec::new(s("upsample"), LayerKind::Matmul { n: cfg.n_codewords }, cfg.codeword_dim, cfg.codeword_dim, g));
        out.push(LayerSpec::conv(s("projection"), cfg.codeword_dim + cfg.guidance_channels, c, k, g));
    }
    out.push(LayerSpec::new(p("shortcut3"), LayerKind::Resize, c, c, grids[0]));
    out.push(LayerSpec::new(p("shortcut7"), LayerKind::Pool, c, c, grids[4]));
    out.push(LayerSpec::new(p("residual"), LayerKind::Elementwise, c, c, grids[0]));
    if shared {
        for l in &mut out[start..] {
            l.shares_weights = true;
        }
    }
    Ok(())
}

/// ResNet-50 encoder with a top-down pyramid (1×1 laterals, 3×3 outputs,
/// max-pooled coarsest level). For [`FpnVariant::HgdFpn`], `k` decoding
/// stages follow; with `cfg.share_params` only the first stage's weights
/// are counted.
pub fn fpn_spec(variant: FpnVariant, cfg: &FpnConfig, input: Grid) -> Result<ArchSpec> {
    cfg.validate()?;
    if input.0 == 0 || input.1 == 0 {
        return Err(Error::Config("input must be non-empty".into()));
    }
    let name = match variant {
        FpnVariant::Fpn => "fpn",
        FpnVariant::HgdFpn => "hgd-fpn",
    };
    let mut spec = ArchSpec::new(name, input);
    if variant == FpnVariant::HgdFpn {
        spec = spec
            .tag("n", cfg.n_codewords)
            .tag("c", cfg.codeword_dim)
            .tag("k", cfg.k_recurrence)
            .tag("branch_kernel", cfg.branch_kernel)
            .tag("share_params", cfg.share_params);
    }
    let taps = resnet_layers(50, input, false, &mut spec.layers)?;
    let c = cfg.output_channels;
    for (i, tap) in taps.iter().enumerate() {
        spec.layers.push(LayerSpec::conv(format!("fpn.lateral{}", i + 3), tap.0, c, 1, tap.1));
    }
    for (i, tap) in taps.iter().enumerate() {
        spec.layers.push(LayerSpec::conv(format!("fpn.output{}", i + 3), c, c, 3, tap.1));
    }
    let coarsest = taps[3].1;
    spec.layers.push(LayerSpec::new(
        "fpn.pool7",
        LayerKind::Pool,
        c,
        c,
        (coarsest.0.div_ceil(2), coarsest.1.div_ceil(2)),
    ));
    if variant == FpnVariant::HgdFpn {
        let grids = [taps[0].1, taps[1].1, taps[2].1, taps[3].1, (coarsest.0.div_ceil(2), coarsest.1.div_ceil(2))];
        for stage in 0..cfg.k_recurrence {
            let shared = cfg.share_params && stage > 0;
            hgd_fpn_stage_layers(&format!("hgd{stage}"), cfg, grids, shared, &mut spec.layers)?;
        }
    }
    Ok(spec)
}

/// Detection input assumed for the pyramid rows.
pub const DETECTION_INPUT: Grid = (800, 1333);

/// Named rows available to the command line.
pub const ARCHITECTURES: &[&str] = &[
    "resnet50",
    "resnet101",
    "resnet50-dilated",
    "resnet101-dilated",
    "efficientfcn",
    "unet-bilinear",
    "unet-deconv",
    "fpn",
    "hgd-fpn",
];

/// Knobs shared by the named rows; `None` means the row's default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ArchOptions {
    pub n: Option<usize>,
    pub c: Option<usize>,
    pub k: Option<usize>,
    pub input: Option<Grid>,
    pub branch_kernel: Option<usize>,
}

pub fn named_spec(name: &str, opts: &ArchOptions) -> Result<ArchSpec> {
    let seg_input = opts.input.unwrap_or((512, 512));
    match name {
        "resnet50" => resnet_spec(50, seg_input, false),
        "resnet101" => resnet_spec(101, seg_input, false),
        "resnet50-dilated" => resnet_spec(50, seg_input, true),
        "resnet101-dilated" => resnet_spec(101, seg_input, true),
        "efficientfcn" => efficientfcn_spec(opts.n.unwrap_or(256), opts.c.unwrap_or(1024), seg_input),
        "unet-bilinear" => unet_spec(false, seg_input),
        "unet-deconv" => unet_spec(true, seg_input),
        "fpn" | "hgd-fpn" => {
            let cfg = FpnConfig {
                n_codewords: opts.n.unwrap_or(128),
                codeword_dim: opts.c.unwrap_or(512),
                guidance_channels: opts.c.unwrap_or(512),
                k_recurrence: opts.k.unwrap_or(4),
                branch_kernel: opts.branch_kernel.unwrap_or(3),
                ..FpnConfig::default()
            };
            let variant = if name == "fpn" { FpnVariant::Fpn } else { FpnVariant::HgdFpn };
            fpn_spec(variant, &cfg, opts.input.unwrap_or(DETECTION_INPUT))
        }
        other => Err(Error::UnknownArch(other.to_string())),
    }
}
