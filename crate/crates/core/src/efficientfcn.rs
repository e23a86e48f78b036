//! EfficientFCN: a strided encoder, the holistically-guided decoder and a
//! 1×1 classifier, plus everything needed to train it at toy scale.
//!
//! The encoder is a stack of 3×3 convolutions with ReLU; the first block of
//! each stage halves the resolution. The decoder consumes its stride-8, 16
//! and 32 outputs, and the class logits computed on the stride-8 decoder
//! output are bilinearly upsampled by 8 to the input resolution.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgd::{hgd_forward, HgdConfig, HgdOutput, HgdParams, HgdVars};
use crate::params::{collect_grads, join, Conv, ConvVars, Parameters, VarSet, LINEAR_GAIN, RELU_GAIN};
use crate::tensor::{Graph, Real, Tensor, Var, IGNORE_LABEL};

/// Input extents must be a multiple of the coarsest stride.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Width of the stride-2 stem.
    pub stem_channels: usize,
    /// Widths of the stages at strides 4, 8, 16 and 32.
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [32, 64, 96, 128],
            blocks_per_stage: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.blocks_per_stage == 0 {
            return Err(Error::Config("backbone widths and block count must be positive".into()));
        }
        Ok(())
    }

    /// Widths of the stride-8, 16 and 32 taps.
    pub fn tap_channels(&self) -> [usize; 3] {
        let c = self.stage_channels;
        [c[1], c[2], c[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T: Real = f64> {
    pub stem: Conv<T>,
    /// `stages[s][b]`; block 0 of each stage has stride 2.
    pub stages: Vec<Vec<Conv<T>>>,
}

impl<T: Real> BackboneParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv::init(cfg.stem_channels, 3, 3, RELU_GAIN, rng);
        let mut c_in = cfg.stem_channels;
        let mut stages = Vec::new();
        for &c_out in &cfg.stage_channels {
            let blocks = (0..cfg.blocks_per_stage)
                .map(|b| Conv::init(c_out, if b == 0 { c_in } else { c_out }, 3, RELU_GAIN, rng))
                .collect();
            stages.push(blocks);
            c_in = c_out;
        }
        Ok(Self { stem, stages })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BackboneVars {
        BackboneVars {
            stem: self.stem.bind(g),
            stages: self.stages.iter().map(|s| s.iter().map(|c| c.bind(g)).collect()).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for BackboneParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, conv) in stage.iter().enumerate() {
                conv.visit(&join(prefix, &format!("stage{}.{b}", s + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, conv) in stage.iter_mut().enumerate() {
                conv.visit_mut(&join(prefix, &format!("stage{}.{b}", s + 1)), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub stem: ConvVars,
    pub stages: Vec<Vec<ConvVars>>,
}

impl VarSet for BackboneVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        self.stem.visit_vars(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, conv) in stage.iter().enumerate() {
                conv.visit_vars(&join(prefix, &format!("stage{}.{b}", s + 1)), f);
            }
        }
    }
}

/// Runs the encoder and returns the taps at strides 8, 16 and 32.
pub fn backbone_forward<T: Real>(g: &mut Graph<T>, image: Var, vars: &BackboneVars) -> Result<[Var; 3]> {
    let (_, h, w) = g.value(image).chw()?;
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::shape(
            "backbone_forward",
            format!("input {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"),
        ));
    }
    let x = vars.stem.apply_strided(g, image, 2)?;
    let mut x = g.relu(x)?;
    let mut outputs = Vec::with_capacity(vars.stages.len());
    for stage in &vars.stages {
        for (b, conv) in stage.iter().enumerate() {
            let y = if b == 0 { conv.apply_strided(g, x, 2)? } else { conv.apply(g, x)? };
            x = g.relu(y)?;
        }
        outputs.push(x);
    }
    match outputs[..] {
        [_, e8, e16, e32] => Ok([e8, e16, e32]),
        _ => Err(Error::Config(format!("backbone has {} stages, expected 4", outputs.len()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub backbone: BackboneConfig,
    pub hgd: HgdConfig,
    pub num_classes: usize,
}

impl SegConfig {
    /// Full decoder widths over the default toy encoder.
    pub fn full_scale(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::default(),
            hgd: HgdConfig::full_scale(),
            num_classes,
        }
    }

    /// Narrow network for gradient checks and CPU training.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::default(),
            hgd: HgdConfig {
                n_codewords: 32,
                codeword_dim: 32,
                compressed_channels: 16,
                guidance_channels: 32,
                ..HgdConfig::tiny()
            },
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.hgd.validate()?;
        if self.num_classes == 0 || self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}, got {}",
                IGNORE_LABEL, self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegParams<T: Real = f64> {
    pub backbone: BackboneParams<T>,
    pub hgd: HgdParams<T>,
    pub classifier: Conv<T>,
}

impl<T: Real> SegParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &SegConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backbone: BackboneParams::init(&cfg.backbone, rng)?,
            hgd: HgdParams::init(&cfg.hgd, cfg.backbone.tap_channels(), rng)?,
            classifier: Conv::init(cfg.num_classes, cfg.hgd.output_channels(), 1, LINEAR_GAIN, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> SegVars {
        SegVars {
            backbone: self.backbone.bind(g),
            hgd: self.hgd.bind(g),
            classifier: self.classifier.bind(g),
        }
    }

    pub fn cast<U: Real>(&self) -> SegParams<U> {
        SegParams {
            backbone: BackboneParams {
                stem: cast_conv(&self.backbone.stem),
                stages: self.backbone.stages.iter().map(|s| s.iter().map(cast_conv).collect()).collect(),
            },
            hgd: HgdParams {
                compress: self.hgd.compress.each_ref().map(|c| c.as_ref().map(cast_conv)),
                bases: cast_conv(&self.hgd.bases),
                weighting: cast_conv(&self.hgd.weighting),
                guidance: cast_conv(&self.hgd.guidance),
                assembly: cast_conv(&self.hgd.assembly),
            },
            classifier: cast_conv(&self.classifier),
        }
    }
}

fn cast_conv<T: Real, U: Real>(c: &Conv<T>) -> Conv<U> {
    Conv {
        weight: c.weight.cast(),
        bias: c.bias.cast(),
    }
}

impl<T: Real> Parameters<T> for SegParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.hgd.visit(&join(prefix, "hgd"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.hgd.visit_mut(&join(prefix, "hgd"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

#[derive(Debug, Clone)]
pub struct SegVars {
    pub backbone: BackboneVars,
    pub hgd: HgdVars,
    pub classifier: ConvVars,
}

impl VarSet for SegVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        self.backbone.visit_vars(&join(prefix, "backbone"), f);
        self.hgd.visit_vars(&join(prefix, "hgd"), f);
        self.classifier.visit_vars(&join(prefix, "classifier"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SegOutput {
    /// `(num_classes, h, w)` at input resolution.
    pub logits: Var,
    /// Logits on the stride-8 grid, before upsampling.
    pub coarse_logits: Var,
    pub taps: [Var; 3],
    pub decoder: HgdOutput,
}

pub fn segment_forward<T: Real>(g: &mut Graph<T>, image: Var, vars: &SegVars, cfg: &SegConfig) -> Result<SegOutput> {
    let (_, h, w) = g.value(image).chw()?;
    let taps = backbone_forward(g, image, &vars.backbone)?;
    let decoder = hgd_forward(g, taps, &vars.hgd, &cfg.hgd)?;
    let coarse_logits = vars.classifier.apply(g, decoder.output)?;
    let logits = g.bilinear_resize(coarse_logits, h, w)?;
    Ok(SegOutput {
        logits,
        coarse_logits,
        taps,
        decoder,
    })
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn predict_labels<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = logits.chw()?;
    if c > IGNORE_LABEL as usize {
        return Err(Error::Config(format!("{c} classes do not fit the label encoding")));
    }
    let hw = h * w;
    let data = logits.data();
    Ok((0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if data[k * hw + p] > data[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Optimization

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_iter: 500,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0) {
            return Err(Error::Config(format!("poly power must be positive, got {}", self.power)));
        }
        if !(self.base_lr >= 0.0) || self.max_iter == 0 || self.batch == 0 {
            return Err(Error::Config("base_lr must be non-negative; max_iter and batch positive".into()));
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/max_iter)^power`. Iterations past the end clamp to 0.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter > cfg.max_iter {
        log::warn!("poly_lr: iteration {iter} is past max_iter {}; using 0", cfg.max_iter);
        return 0.0;
    }
    cfg.base_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power)
}

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T: Real = f64> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.get(name)
    }

    pub fn step(&mut self, params: &mut dyn Parameters<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        let mut missing = None;
        let velocity = &mut self.velocity;
        params.visit_mut("", &mut |name, p| {
            let Some(g) = grads.get(&name) else {
                missing.get_or_insert(name);
                return;
            };
            if g.dims() != p.dims() {
                missing.get_or_insert(name);
                return;
            }
            let v = velocity.entry(name).or_insert_with(|| Tensor::zeros(p.dims().to_vec()));
            for ((v, p), &g) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            }
        });
        match missing {
            Some(name) => Err(Error::Config(format!("no gradient of matching shape for `{name}`"))),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Accumulates one label map; ground-truth ignore pixels are skipped.
    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim("metrics", "pixel count", gt.len(), pred.len()));
        }
        let n = self.num_classes;
        for (&p, &t) in pred.iter().zip(gt) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= n || t >= n {
                return Err(Error::Config(format!("label {} out of range for {n} classes", p.max(t))));
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pix_acc(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let correct: u64 = (0..self.num_classes).map(|k| self.get(k, k)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Per-class IoU; `None` for classes absent from both maps.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let n = self.num_classes;
        (0..n)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..n).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..n).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64> {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// `(pixAcc, mIoU)` of one prediction against ground truth.
pub fn metrics(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<(f64, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.update(pred, gt)?;
    Ok((cm.pix_acc()?, cm.mean_iou()?))
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// RGB in `[0, 1]`, `(3, h, w)`.
    pub image: Tensor<f64>,
    /// Row-major class ids, `h·w` entries.
    pub label: Vec<u8>,
}

impl SegSample {
    pub fn size(&self) -> (usize, usize) {
        let d = self.image.dims();
        (d[1], d[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    pub max_shapes: usize,
    /// Chance that a shape is a disk rather than a rectangle.
    pub disk_probability: f64,
    /// Amplitude of uniform per-pixel color noise.
    pub noise: f64,
    /// Rectangle edges snap to multiples of this many pixels.
    pub grid: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            max_shapes: 3,
            disk_probability: 0.0,
            noise: 0.05,
            grid: 8,
        }
    }
}

/// Class color: background is dark gray, other classes are spread in hue.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.15];
    }
    let h = (class - 1) as f64 / (num_classes - 1).max(1) as f64 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

pub fn synth_dataset(seed: u64, count: usize, size: usize, num_classes: usize) -> Result<Vec<SegSample>> {
    synth_dataset_with(seed, count, size, num_classes, &SynthOptions::default())
}

/// Colored shapes on a background. Class 0 is the background; each shape
/// takes a class in `1..num_classes` and that class's color plus noise.
pub fn synth_dataset_with(
    seed: u64,
    count: usize,
    size: usize,
    num_classes: usize,
    opts: &SynthOptions,
) -> Result<Vec<SegSample>> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::Config(format!("image size {size} must be a positive multiple of {INPUT_MULTIPLE}")));
    }
    if num_classes == 0 || num_classes > IGNORE_LABEL as usize {
        return Err(Error::Config(format!("num_classes must be in 1..={IGNORE_LABEL}")));
    }
    if opts.grid == 0 || size % opts.grid != 0 || size / opts.grid < 2 {
        return Err(Error::Config(format!("grid {} does not tile size {size}", opts.grid)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = size / opts.grid;
    let palette: Vec<[f64; 3]> = (0..num_classes).map(|k| class_color(k, num_classes)).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut label = vec![0u8; size * size];
        if num_classes > 1 {
            for _ in 0..rng.gen_range(1..=opts.max_shapes.max(1)) {
                let class = rng.gen_range(1..num_classes) as u8;
                if rng.gen_bool(opts.disk_probability.clamp(0.0, 1.0)) {
                    let r = rng.gen_range(size as f64 / 10.0..size as f64 / 4.0);
                    let cy = rng.gen_range(0.0..size as f64);
                    let cx = rng.gen_range(0.0..size as f64);
                    for y in 0..size {
                        for x in 0..size {
                            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                            if dy * dy + dx * dx <= r * r {
                                label[y * size + x] = class;
                            }
                        }
                    }
                } else {
                    let max_extent = (cells / 2).max(2);
                    let (hc, wc) = (rng.gen_range(2..=max_extent), rng.gen_range(2..=max_extent));
                    let (y0, x0) = (rng.gen_range(0..=cells - hc), rng.gen_range(0..=cells - wc));
                    for y in y0 * opts.grid..(y0 + hc) * opts.grid {
                        label[y * size + x0 * opts.grid..y * size + (x0 + wc) * opts.grid].fill(class);
                    }
                }
            }
        }
        let mut image = Tensor::zeros(vec![3, size, size]);
        let plane = size * size;
        for (p, &l) in label.iter().enumerate() {
            for (ch, &base) in palette[l as usize].iter().enumerate() {
                let jitter = if opts.noise > 0.0 {
                    rng.gen_range(-opts.noise..=opts.noise)
                } else {
                    0.0
                };
                image.data_mut()[ch * plane + p] = (base + jitter).clamp(0.0, 1.0);
            }
        }
        out.push(SegSample { image, label });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(rename = "pixAcc")]
    pub pix_acc: f64,
}

/// Mean loss of a batch, the mean gradients, and the confusion of the
/// batch predictions. Batch elements are evaluated on independent graphs.
pub fn batch_gradients<T: Real>(
    params: &SegParams<T>,
    cfg: &SegConfig,
    batch: &[&SegSample],
) -> Result<(f64, IndexMap<String, Tensor<T>>, ConfusionMatrix)> {
    if batch.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let per_sample: Vec<(f64, IndexMap<String, Tensor<T>>, ConfusionMatrix)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let vars = params.bind(&mut g);
            let image = g.input(s.image.cast());
            let out = segment_forward(&mut g, image, &vars, cfg)?;
            let loss = g.cross_entropy(out.logits, &s.label)?;
            let pred = predict_labels(g.value(out.logits))?;
            let mut cm = ConfusionMatrix::new(cfg.num_classes);
            cm.update(&pred, &s.label)?;
            let value = g.value(loss).data()[0].as_f64();
            g.backward(loss)?;
            Ok((value, collect_grads(&g, &vars), cm))
        })
        .collect::<Result<_>>()?;

    let scale = T::lit(1.0 / batch.len() as f64);
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads, mut cm) = iter.next().expect("non-empty batch");
    for (l, g, c) in iter {
        loss += l;
        for (acc, add) in grads.values_mut().zip(g.values()) {
            acc.add_assign(add);
        }
        cm.merge(&c);
    }
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss / batch.len() as f64, grads, cm))
}

/// Poly-LR SGD over `data`, reshuffled every epoch. `on_step` sees each
/// record as it is produced.
pub fn train<T: Real>(
    params: &mut SegParams<T>,
    cfg: &SegConfig,
    data: &[SegSample],
    tc: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut sgd = Sgd::new(tc.momentum, tc.weight_decay);
    let mut log = Vec::with_capacity(tc.max_iter);
    for iter in 0..tc.max_iter {
        let mut batch = Vec::with_capacity(tc.batch);
        while batch.len() < tc.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads, cm) = batch_gradients(params, cfg, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at iteration {iter}")));
        }
        let lr = poly_lr(iter, tc);
        sgd.step(params, &grads, lr)?;
        let record = StepRecord {
            iter,
            lr,
            loss,
            pix_acc: cm.pix_acc()?,
        };
        on_step(&record);
        log.push(record);
    }
    Ok(log)
}

/// Dataset-level `(pixAcc, mIoU)` of the current parameters.
pub fn evaluate<T: Real>(params: &SegParams<T>, cfg: &SegConfig, data: &[SegSample]) -> Result<(f64, f64)> {
    let parts: Vec<ConfusionMatrix> = data
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            g.set_check_finite(false);
            let vars = params.bind(&mut g);
            let image = g.input(s.image.cast());
            let out = segment_forward(&mut g, image, &vars, cfg)?;
            let mut cm = ConfusionMatrix::new(cfg.num_classes);
            cm.update(&predict_labels(g.value(out.logits))?, &s.label)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for c in &parts {
        cm.merge(c);
    }
    Ok((cm.pix_acc()?, cm.mean_iou()?))
}

/// Writes training records as CSV with an `iter,lr,loss,pixAcc` header.
pub fn write_log<W: std::io::Write>(out: W, records: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
