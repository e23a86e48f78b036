//! The holistically-guided decoder.
//!
//! Encoder taps at output strides 8, 16 and 32 are compressed and fused
//! into a coarse map `m32` and a fine map `m8`. Softmax-normalized spatial
//! weighting maps computed from `m32` average a bases map into `n` holistic
//! codewords. A guidance map computed from `m8` (optionally shifted by the
//! spatial mean of the bases) predicts per-pixel assembly coefficients, and
//! the upsampled feature at every fine position is the coefficient-weighted
//! sum of the codewords. The decoder output concatenates that feature with
//! the raw guidance map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Conv, ConvVars, Parameters, VarSet, LINEAR_GAIN};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Output strides of the three encoder taps, in concatenation order.
pub const STRIDES: [u32; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgdConfig {
    pub n_codewords: usize,
    /// Channels of the bases map, i.e. the length of each codeword.
    pub codeword_dim: usize,
    /// Channels each encoder tap is compressed to.
    pub compressed_channels: usize,
    pub guidance_channels: usize,
    /// Adds the spatial mean of the bases map to the guidance map.
    pub transfer_enabled: bool,
    /// Strides fused into the codeword branch input.
    #[serde(default = "all_strides")]
    pub code_scales: Vec<u32>,
    /// Strides fused into the guidance branch input.
    #[serde(default = "all_strides")]
    pub guide_scales: Vec<u32>,
}

fn all_strides() -> Vec<u32> {
    STRIDES.to_vec()
}

impl Default for HgdConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl HgdConfig {
    /// Widths of the full-size segmentation decoder: 256 codewords of
    /// dimension 1024, taps compressed to 512, 1024 guidance channels.
    pub fn full_scale() -> Self {
        Self {
            n_codewords: 256,
            codeword_dim: 1024,
            compressed_channels: 512,
            guidance_channels: 1024,
            transfer_enabled: true,
            code_scales: all_strides(),
            guide_scales: all_strides(),
        }
    }

    /// Narrow widths for CPU-scale training and gradient checks.
    pub fn tiny() -> Self {
        Self {
            n_codewords: 8,
            codeword_dim: 16,
            compressed_channels: 8,
            guidance_channels: 16,
            transfer_enabled: true,
            code_scales: all_strides(),
            guide_scales: all_strides(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_codewords", self.n_codewords),
            ("codeword_dim", self.codeword_dim),
            ("compressed_channels", self.compressed_channels),
            ("guidance_channels", self.guidance_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.transfer_enabled && self.guidance_channels != self.codeword_dim {
            return Err(Error::Config(format!(
                "codeword transfer adds the {}-d mean bases vector to a {}-channel guidance map; \
                 guidance_channels must equal codeword_dim",
                self.codeword_dim, self.guidance_channels
            )));
        }
        for (name, set) in [("code_scales", &self.code_scales), ("guide_scales", &self.guide_scales)] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} must name at least one stride")));
            }
            for (i, s) in set.iter().enumerate() {
                if !STRIDES.contains(s) || set[..i].contains(s) {
                    return Err(Error::Config(format!("{name}: invalid or repeated stride {s}")));
                }
            }
        }
        Ok(())
    }

    fn uses(&self, stride: u32) -> bool {
        self.code_scales.contains(&stride) || self.guide_scales.contains(&stride)
    }

    /// Channels of the fused map feeding the bases and weighting branches.
    pub fn code_input_channels(&self) -> usize {
        self.compressed_channels * self.code_scales.len()
    }

    pub fn guide_input_channels(&self) -> usize {
        self.compressed_channels * self.guide_scales.len()
    }

    /// Channels of the decoder output: codeword features plus guidance.
    pub fn output_channels(&self) -> usize {
        self.codeword_dim + self.guidance_channels
    }
}

/// Codeword matrix, one column per codeword: `(codeword_dim, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codewords<T: Real = f64>(Tensor<T>);

impl<T: Real> Codewords<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        matrix.matrix_dims()?;
        Ok(Self(matrix))
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn count(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn column(&self, i: usize) -> Vec<T> {
        (0..self.dim()).map(|d| self.0.at(&[d, i])).collect()
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Learned kernels of one decoder instance. All branches are plain affine
/// 1×1 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct HgdParams<T: Real = f64> {
    /// Per-stride compression, indexed like [`STRIDES`]; absent when the
    /// stride feeds neither branch.
    pub compress: [Option<Conv<T>>; 3],
    pub bases: Conv<T>,
    pub weighting: Conv<T>,
    pub guidance: Conv<T>,
    pub assembly: Conv<T>,
}

impl<T: Real> HgdParams<T> {
    /// `in_channels` are the encoder tap widths at strides 8, 16, 32.
    pub fn init<R: Rng + ?Sized>(cfg: &HgdConfig, in_channels: [usize; 3], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.compressed_channels;
        let compress = [0, 1, 2].map(|i| cfg.uses(STRIDES[i]).then(|| Conv::init(c, in_channels[i], 1, LINEAR_GAIN, rng)));
        Ok(Self {
            compress,
            bases: Conv::init(cfg.codeword_dim, cfg.code_input_channels(), 1, LINEAR_GAIN, rng),
            weighting: Conv::init(cfg.n_codewords, cfg.code_input_channels(), 1, LINEAR_GAIN, rng),
            guidance: Conv::init(cfg.guidance_channels, cfg.guide_input_channels(), 1, LINEAR_GAIN, rng),
            assembly: Conv::init(cfg.n_codewords, cfg.guidance_channels, 1, LINEAR_GAIN, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> HgdVars {
        HgdVars {
            compress: self.compress.each_ref().map(|c| c.as_ref().map(|c| c.bind(g))),
            bases: self.bases.bind(g),
            weighting: self.weighting.bind(g),
            guidance: self.guidance.bind(g),
            assembly: self.assembly.bind(g),
        }
    }

    /// Reorders the codeword index: output channels of both the weighting
    /// and the assembly kernels. `perm[new] = old`.
    pub fn permute_codewords(&mut self, perm: &[usize]) -> Result<()> {
        permute_outputs(&mut self.weighting, perm)?;
        permute_outputs(&mut self.assembly, perm)
    }
}

/// Reorders the output channels of a kernel: row `new` takes row `perm[new]`.
pub fn permute_outputs<T: Real>(conv: &mut Conv<T>, perm: &[usize]) -> Result<()> {
    let c_out = conv.c_out();
    let mut seen = vec![false; c_out];
    if perm.len() != c_out || perm.iter().any(|&p| p >= c_out || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Config(format!("not a permutation of {c_out} channels: {perm:?}")));
    }
    let row = conv.weight.numel() / c_out;
    let w = conv.weight.data().to_vec();
    let b = conv.bias.data().to_vec();
    for (new, &old) in perm.iter().enumerate() {
        conv.weight.data_mut()[new * row..(new + 1) * row].copy_from_slice(&w[old * row..(old + 1) * row]);
        conv.bias.data_mut()[new] = b[old];
    }
    Ok(())
}

const COMPRESS_NAMES: [&str; 3] = ["compress8", "compress16", "compress32"];

impl<T: Real> Parameters<T> for HgdParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (c, name) in self.compress.iter().zip(COMPRESS_NAMES) {
            if let Some(c) = c {
                c.visit(&join(prefix, name), f);
            }
        }
        self.bases.visit(&join(prefix, "bases"), f);
        self.weighting.visit(&join(prefix, "weighting"), f);
        self.guidance.visit(&join(prefix, "guidance"), f);
        self.assembly.visit(&join(prefix, "assembly"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (c, name) in self.compress.iter_mut().zip(COMPRESS_NAMES) {
            if let Some(c) = c {
                c.visit_mut(&join(prefix, name), f);
            }
        }
        self.bases.visit_mut(&join(prefix, "bases"), f);
        self.weighting.visit_mut(&join(prefix, "weighting"), f);
        self.guidance.visit_mut(&join(prefix, "guidance"), f);
        self.assembly.visit_mut(&join(prefix, "assembly"), f);
    }
}

#[derive(Debug, Clone)]
pub struct HgdVars {
    pub compress: [Option<ConvVars>; 3],
    pub bases: ConvVars,
    pub weighting: ConvVars,
    pub guidance: ConvVars,
    pub assembly: ConvVars,
}

impl VarSet for HgdVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        for (c, name) in self.compress.iter().zip(COMPRESS_NAMES) {
            if let Some(c) = c {
                c.visit_vars(&join(prefix, name), f);
            }
        }
        self.bases.visit_vars(&join(prefix, "bases"), f);
        self.weighting.visit_vars(&join(prefix, "weighting"), f);
        self.guidance.visit_vars(&join(prefix, "guidance"), f);
        self.assembly.visit_vars(&join(prefix, "assembly"), f);
    }
}

/// Fuses the three encoder taps. Returns `(m8, m32)`: the compressed taps
/// selected by the config, bilinearly resampled to the stride-8 and stride-32
/// grids respectively and concatenated in stride order.
pub fn fuse_multiscale<T: Real>(
    g: &mut Graph<T>,
    taps: [Var; 3],
    vars: &HgdVars,
    cfg: &HgdConfig,
) -> Result<(Var, Var)> {
    let grids: Vec<(usize, usize)> = taps
        .iter()
        .map(|&t| g.value(t).chw().map(|(_, h, w)| (h, w)))
        .collect::<Result<_>>()?;
    for i in 0..2 {
        let (fine, coarse) = (grids[i], grids[i + 1]);
        if fine.0 != 2 * coarse.0 || fine.1 != 2 * coarse.1 {
            return Err(Error::Config(format!(
                "stride-{} tap is {}x{} but stride-{} tap is {}x{}; consecutive taps must differ by exactly 2x",
                STRIDES[i], fine.0, fine.1, STRIDES[i + 1], coarse.0, coarse.1
            )));
        }
    }

    let mut compressed = [None; 3];
    for i in 0..3 {
        if let Some(conv) = &vars.compress[i] {
            compressed[i] = Some(conv.apply(g, taps[i])?);
        }
    }
    let gather = |g: &mut Graph<T>, set: &[u32], grid: (usize, usize)| -> Result<Var> {
        let mut parts = Vec::new();
        for (i, stride) in STRIDES.iter().enumerate() {
            if !set.contains(stride) {
                continue;
            }
            let x = compressed[i].ok_or_else(|| Error::Config(format!("no compression kernel for stride {stride}")))?;
            parts.push(if grids[i] == grid { x } else { g.bilinear_resize(x, grid.0, grid.1)? });
        }
        g.concat_channels(&parts)
    };
    let m8 = gather(g, &cfg.guide_scales, grids[0])?;
    let m32 = gather(g, &cfg.code_scales, grids[2])?;
    Ok((m8, m32))
}

/// Handles produced by codeword generation.
#[derive(Debug, Clone, Copy)]
pub struct CodewordBranch {
    /// `(codeword_dim, n)` codeword matrix.
    pub codewords: Var,
    /// Bases map `B`.
    pub bases: Var,
    /// Raw weighting logits `A`.
    pub logits: Var,
    /// Spatially normalized weighting maps `Ã`.
    pub weights: Var,
}

/// `c_i = Σ_{p,q} Ã_i(p,q) · B(p,q)` with `Ã = softmax_spatial(A)`.
pub fn generate_codewords<T: Real>(
    g: &mut Graph<T>,
    fused: Var,
    bases_conv: &ConvVars,
    weighting_conv: &ConvVars,
) -> Result<CodewordBranch> {
    let bases = bases_conv.apply(g, fused)?;
    let logits = weighting_conv.apply(g, fused)?;
    let weights = g.softmax_spatial(logits)?;
    let (dim, h, w) = g.value(bases).chw()?;
    let n = g.value(weights).dims()[0];
    let a = g.reshape(weights, vec![n, h * w])?;
    let b = g.reshape(bases, vec![dim, h * w])?;
    let bt = g.transpose(b)?;
    let per_codeword = g.matmul(a, bt)?;
    let codewords = g.transpose(per_codeword)?;
    Ok(CodewordBranch {
        codewords,
        bases,
        logits,
        weights,
    })
}

/// Raw guidance `G` and the guidance actually used for assembly, `Ḡ`.
#[derive(Debug, Clone, Copy)]
pub struct Guidance {
    pub raw: Var,
    pub guided: Var,
}

pub fn build_guidance<T: Real>(
    g: &mut Graph<T>,
    fused: Var,
    bases: Var,
    guidance_conv: &ConvVars,
    transfer_enabled: bool,
) -> Result<Guidance> {
    let raw = guidance_conv.apply(g, fused)?;
    if !transfer_enabled {
        return Ok(Guidance { raw, guided: raw });
    }
    let (gc, _, _) = g.value(raw).chw()?;
    let (bc, _, _) = g.value(bases).chw()?;
    if gc != bc {
        return Err(Error::Config(format!(
            "codeword transfer needs guidance channels ({gc}) equal to codeword dimension ({bc})"
        )));
    }
    let mean = g.global_avg_spatial(bases)?;
    let guided = g.broadcast_add_channel(raw, mean)?;
    Ok(Guidance { raw, guided })
}

#[derive(Debug, Clone, Copy)]
pub struct Assembly {
    /// Per-pixel linear coefficients `W`, `(n, h, w)`, un-normalized.
    pub coefficients: Var,
    /// `f̃(x,y) = Σ_i W_i(x,y) · c_i`, `(codeword_dim, h, w)`.
    pub upsampled: Var,
}

pub fn assemble<T: Real>(g: &mut Graph<T>, guided: Var, codewords: Var, assembly_conv: &ConvVars) -> Result<Assembly> {
    let coefficients = assembly_conv.apply(g, guided)?;
    let (n, h, w) = g.value(coefficients).chw()?;
    let (dim, cn) = g.value(codewords).matrix_dims()?;
    if cn != n {
        return Err(Error::dim("assemble", "codeword count", n, cn));
    }
    let flat = g.reshape(coefficients, vec![n, h * w])?;
    let assembled = g.matmul(codewords, flat)?;
    let upsampled = g.reshape(assembled, vec![dim, h, w])?;
    Ok(Assembly {
        coefficients,
        upsampled,
    })
}

/// Every intermediate of one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct HgdOutput {
    /// `[f̃; G]` at stride 8.
    pub output: Var,
    pub m8: Var,
    pub m32: Var,
    pub codewords: CodewordBranch,
    pub guidance: Guidance,
    pub assembly: Assembly,
}

pub fn hgd_forward<T: Real>(
    g: &mut Graph<T>,
    taps: [Var; 3],
    vars: &HgdVars,
    cfg: &HgdConfig,
) -> Result<HgdOutput> {
    cfg.validate()?;
    let (m8, m32) = fuse_multiscale(g, taps, vars, cfg)?;
    let codewords = generate_codewords(g, m32, &vars.bases, &vars.weighting)?;
    let guidance = build_guidance(g, m8, codewords.bases, &vars.guidance, cfg.transfer_enabled)?;
    let assembly = assemble(g, guidance.guided, codewords.codewords, &vars.assembly)?;
    let output = g.concat_channels(&[assembly.upsampled, guidance.raw])?;
    Ok(HgdOutput {
        output,
        m8,
        m32,
        codewords,
        guidance,
        assembly,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::testing::assert_binding_matches;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn transfer_requires_matching_dims() {
        let cfg = HgdConfig {
            guidance_channels: 12,
            ..HgdConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = HgdConfig {
            transfer_enabled: false,
            ..cfg
        };
        ok.validate().unwrap();
    }

    #[test]
    fn scale_sets_are_validated() {
        let bad = HgdConfig {
            code_scales: vec![32, 32],
            ..HgdConfig::tiny()
        };
        assert!(bad.validate().is_err());
        let bad = HgdConfig {
            guide_scales: vec![4],
            ..HgdConfig::tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn binding_names_line_up() {
        let cfg = HgdConfig {
            code_scales: vec![32],
            guide_scales: vec![8, 16],
            ..HgdConfig::tiny()
        };
        let p = HgdParams::<f64>::init(&cfg, [4, 5, 6], &mut rng(0)).unwrap();
        assert!(p.compress.iter().all(Option::is_some));
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        assert_binding_matches(&p, &g, &v);
    }

    #[test]
    fn unused_stride_has_no_compression_kernel() {
        let cfg = HgdConfig {
            code_scales: vec![16, 32],
            guide_scales: vec![16, 32],
            ..HgdConfig::tiny()
        };
        let p = HgdParams::<f64>::init(&cfg, [4, 5, 6], &mut rng(0)).unwrap();
        assert!(p.compress[0].is_none());
    }

    #[test]
    fn mismatched_tap_ratio_is_a_config_error() {
        let cfg = HgdConfig::tiny();
        let p = HgdParams::<f64>::init(&cfg, [3, 3, 3], &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let e8 = g.input(Tensor::zeros(vec![3, 8, 8]));
        let e16 = g.input(Tensor::zeros(vec![3, 4, 4]));
        let e32 = g.input(Tensor::zeros(vec![3, 3, 2]));
        assert!(matches!(fuse_multiscale(&mut g, [e8, e16, e32], &v, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn permutation_rejects_non_permutations() {
        let mut c = Conv::<f64>::zeros(3, 2, 1);
        assert!(permute_outputs(&mut c, &[0, 0, 1]).is_err());
        assert!(permute_outputs(&mut c, &[0, 1]).is_err());
        permute_outputs(&mut c, &[2, 0, 1]).unwrap();
    }

    #[test]
    fn forward_shapes_at_tiny_scale() {
        let cfg = HgdConfig::tiny();
        let p = HgdParams::<f64>::init(&cfg, [4, 6, 8], &mut rng(2)).unwrap();
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let mut r = rng(3);
        let e8 = g.input(Tensor::uniform(vec![4, 8, 12], -1.0, 1.0, &mut r));
        let e16 = g.input(Tensor::uniform(vec![6, 4, 6], -1.0, 1.0, &mut r));
        let e32 = g.input(Tensor::uniform(vec![8, 2, 3], -1.0, 1.0, &mut r));
        let out = hgd_forward(&mut g, [e8, e16, e32], &v, &cfg).unwrap();
        assert_eq!(g.value(out.output).dims(), &[cfg.output_channels(), 8, 12]);
        assert_eq!(g.value(out.m32).dims(), &[24, 2, 3]);
        assert_eq!(g.value(out.m8).dims(), &[24, 8, 12]);
        let c = Codewords::new(g.value(out.codewords.codewords).clone()).unwrap();
        assert_eq!((c.dim(), c.count()), (cfg.codeword_dim, cfg.n_codewords));
    }

    fn affine(conv: &Conv<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (ci, h, w) = x.chw().unwrap();
        let co = conv.c_out();
        Tensor::from_fn(vec![co, h, w], |idx| {
            let (o, p) = (idx / (h * w), idx % (h * w));
            let mut acc = conv.bias.data()[o];
            for i in 0..ci {
                acc += conv.weight.data()[o * ci + i] * x.data()[i * h * w + p];
            }
            acc
        })
    }

    fn random_conv(co: usize, ci: usize, r: &mut ChaCha8Rng) -> Conv<f64> {
        Conv {
            weight: Tensor::uniform(vec![co, ci], -1.0, 1.0, r),
            bias: Tensor::uniform(vec![co], -1.0, 1.0, r),
        }
    }

    fn codewords_of(m32: &Tensor<f64>, bases: &Conv<f64>, weighting: &Conv<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.input(m32.clone());
        let (b, a) = (bases.bind(&mut g), weighting.bind(&mut g));
        let out = generate_codewords(&mut g, x, &b, &a).unwrap();
        (g.value(out.codewords).clone(), g.value(out.bases).clone())
    }

    #[test]
    fn codewords_match_double_loop() {
        let mut r = rng(10);
        let m32 = Tensor::uniform(vec![12, 4, 6], -1.0, 1.0, &mut r);
        let bases = random_conv(5, 12, &mut r);
        let weighting = random_conv(3, 12, &mut r);
        let (c, _) = codewords_of(&m32, &bases, &weighting);
        let b = affine(&bases, &m32);
        let a = affine(&weighting, &m32);
        for i in 0..3 {
            let logits = a.channel(i);
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            for d in 0..5 {
                let mut acc = 0.0;
                for p in 0..24 {
                    acc += logits[p].exp() / z * b.channel(d)[p];
                }
                assert!((c.at(&[d, i]) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_logits_give_spatial_mean() {
        let mut r = rng(11);
        let m32 = Tensor::uniform(vec![4, 3, 3], -1.0, 1.0, &mut r);
        let bases = random_conv(6, 4, &mut r);
        let (c, b) = codewords_of(&m32, &bases, &Conv::zeros(2, 4, 1));
        for i in 0..2 {
            for d in 0..6 {
                let mean = b.channel(d).iter().sum::<f64>() / 9.0;
                assert!((c.at(&[d, i]) - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_weighting_picks_a_position() {
        let mut r = rng(12);
        let m32 = Tensor::uniform(vec![3, 2, 2], -1.0, 1.0, &mut r);
        let bases = random_conv(4, 3, &mut r);
        // A huge bias on a constant-zero weighting cannot localize; use a
        // huge weight on an indicator input channel instead.
        let mut x = m32.clone();
        for p in 0..4 {
            x.data_mut()[p] = if p == 3 { 1.0 } else { 0.0 };
        }
        let mut weighting = Conv::<f64>::zeros(1, 3, 1);
        weighting.weight.data_mut()[0] = 800.0;
        let (c, b) = codewords_of(&x, &bases, &weighting);
        for d in 0..4 {
            assert_eq!(c.at(&[d, 0]), b.channel(d)[3]);
        }
    }

    #[test]
    fn guidance_adds_mean_bases() {
        let mut r = rng(13);
        let m8 = Tensor::uniform(vec![5, 4, 4], -1.0, 1.0, &mut r);
        let bases = Tensor::uniform(vec![6, 2, 2], -1.0, 1.0, &mut r);
        let conv = random_conv(6, 5, &mut r);
        for transfer in [false, true] {
            let mut g = Graph::new();
            let x = g.input(m8.clone());
            let b = g.input(bases.clone());
            let v = conv.bind(&mut g);
            let out = build_guidance(&mut g, x, b, &v, transfer).unwrap();
            let raw = affine(&conv, &m8);
            assert_eq!(g.value(out.raw), &raw);
            let guided = g.value(out.guided);
            if !transfer {
                assert_eq!(guided, &raw);
                continue;
            }
            for c in 0..6 {
                let mean = bases.channel(c).iter().sum::<f64>() / 4.0;
                for p in 0..16 {
                    assert!((guided.channel(c)[p] - raw.channel(c)[p] - mean).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn transfer_with_mismatched_bases_fails() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 2, 2]));
        let b = g.input(Tensor::zeros(vec![3, 1, 1]));
        let v = Conv::zeros(4, 2, 1).bind(&mut g);
        assert!(matches!(build_guidance(&mut g, x, b, &v, true), Err(Error::Config(_))));
    }

    #[test]
    fn assembly_matches_per_pixel_loop() {
        let mut r = rng(14);
        let guided = Tensor::uniform(vec![7, 6, 6], -1.0, 1.0, &mut r);
        let codewords = Tensor::uniform(vec![8, 4], -1.0, 1.0, &mut r);
        let conv = random_conv(4, 7, &mut r);
        let mut g = Graph::new();
        let x = g.input(guided.clone());
        let c = g.input(codewords.clone());
        let v = conv.bind(&mut g);
        let out = assemble(&mut g, x, c, &v).unwrap();
        let w = affine(&conv, &guided);
        let f = g.value(out.upsampled);
        assert_eq!(f.dims(), &[8, 6, 6]);
        for d in 0..8 {
            for p in 0..36 {
                let oracle: f64 = (0..4).map(|i| w.channel(i)[p] * codewords.at(&[d, i])).sum();
                assert!((f.channel(d)[p] - oracle).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn unit_coefficients_broadcast_the_single_codeword() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 3]));
        let c = g.input(Tensor::from_f64(vec![3, 1], &[1.5, -2.0, 0.25]).unwrap());
        let mut conv = Conv::zeros(1, 2, 1);
        conv.bias.data_mut()[0] = 1.0;
        let v = conv.bind(&mut g);
        let out = assemble(&mut g, x, c, &v).unwrap();
        let f = g.value(out.upsampled);
        for (d, want) in [1.5, -2.0, 0.25].into_iter().enumerate() {
            assert!(f.channel(d).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn fusion_ablation_channel_counts() {
        for (set, want) in [(vec![32], 512), (vec![16, 32], 1024), (vec![8, 16, 32], 1536)] {
            let cfg = HgdConfig {
                code_scales: set,
                ..HgdConfig::full_scale()
            };
            assert_eq!(cfg.code_input_channels(), want);
        }
    }
}
