//! Holistically-guided feature pyramid decoding.
//!
//! One set of codewords is generated from all five pyramid levels fused on
//! the P6 grid. Three independent assembly branches rebuild P4, P5 and P6
//! from fusions of each level with its two neighbours; P3 and P7 reuse the
//! P4 and P6 results through nearest upsampling and max-pooling. Every
//! level is merged residually, and the whole decoder can be stacked `k`
//! times with shared or independent parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hgd::{assemble, build_guidance, generate_codewords, permute_outputs};
use crate::params::{join, Conv, ConvVars, Parameters, VarSet, LINEAR_GAIN};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Pyramid level names, finest first.
pub const LEVELS: [&str; 5] = ["P3", "P4", "P5", "P6", "P7"];

/// Five feature maps with equal channel counts, each level half the
/// previous one per axis (odd extents round up).
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid<T: Real = f64> {
    pub levels: [Tensor<T>; 5],
}

impl<T: Real> Pyramid<T> {
    pub fn new(levels: [Tensor<T>; 5]) -> Result<Self> {
        validate_grids(&levels.each_ref().map(|t| t.dims().to_vec()))?;
        Ok(Self { levels })
    }

    /// Random pyramid whose finest level is `(channels, h, w)`.
    pub fn random<R: Rng + ?Sized>(channels: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let dims = level_dims(channels, h, w);
        Self {
            levels: dims.map(|d| Tensor::uniform(d, -1.0, 1.0, rng)),
        }
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn bind_inputs(&self, g: &mut Graph<T>) -> [Var; 5] {
        self.levels.each_ref().map(|t| g.input(t.clone()))
    }

    pub fn from_graph(g: &Graph<T>, vars: [Var; 5]) -> Self {
        Self {
            levels: vars.map(|v| g.value(v).clone()),
        }
    }
}

/// Level dims for a finest level of `(channels, h, w)`.
pub fn level_dims(channels: usize, h: usize, w: usize) -> [Vec<usize>; 5] {
    let mut out: [Vec<usize>; 5] = Default::default();
    let (mut h, mut w) = (h, w);
    for d in &mut out {
        *d = vec![channels, h, w];
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    out
}

fn validate_grids(dims: &[Vec<usize>; 5]) -> Result<()> {
    for d in dims {
        if d.len() != 3 || d.contains(&0) {
            return Err(Error::shape("pyramid", format!("level dims {d:?} are not a non-empty (c, h, w)")));
        }
    }
    for i in 1..5 {
        let (prev, cur) = (&dims[i - 1], &dims[i]);
        if cur[0] != prev[0] {
            return Err(Error::shape(
                "pyramid",
                format!("{} has {} channels but {} has {}", LEVELS[i], cur[0], LEVELS[0], prev[0]),
            ));
        }
        if cur[1] != prev[1].div_ceil(2) || cur[2] != prev[2].div_ceil(2) {
            return Err(Error::shape(
                "pyramid",
                format!(
                    "{} is {}x{} but must halve {} ({}x{})",
                    LEVELS[i], cur[1], cur[2], LEVELS[i - 1], prev[1], prev[2]
                ),
            ));
        }
    }
    Ok(())
}

/// Raw fusion scalars: `a` for the codeword map, `r`, `s`, `t` for the
/// P4, P5 and P6 guidance maps. Effective values pass through ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionCoeffs<T: Real = f64> {
    pub a: Tensor<T>,
    pub r: Tensor<T>,
    pub s: Tensor<T>,
    pub t: Tensor<T>,
}

impl<T: Real> Default for FusionCoeffs<T> {
    /// All ones, so `Σa = 5` and `Σr = Σs = Σt = 3` at initialization.
    fn default() -> Self {
        Self {
            a: Tensor::full(vec![5], T::one()),
            r: Tensor::full(vec![3], T::one()),
            s: Tensor::full(vec![3], T::one()),
            t: Tensor::full(vec![3], T::one()),
        }
    }
}

impl<T: Real> FusionCoeffs<T> {
    pub fn from_slices(a: &[f64], r: &[f64], s: &[f64], t: &[f64]) -> Result<Self> {
        Ok(Self {
            a: Tensor::from_f64(vec![5], a)?,
            r: Tensor::from_f64(vec![3], r)?,
            s: Tensor::from_f64(vec![3], s)?,
            t: Tensor::from_f64(vec![3], t)?,
        })
    }
}

impl<T: Real> Parameters<T> for FusionCoeffs<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "a"), &self.a);
        f(join(prefix, "r"), &self.r);
        f(join(prefix, "s"), &self.s);
        f(join(prefix, "t"), &self.t);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "a"), &mut self.a);
        f(join(prefix, "r"), &mut self.r);
        f(join(prefix, "s"), &mut self.s);
        f(join(prefix, "t"), &mut self.t);
    }
}

/// Element-wise ReLU of every raw coefficient; no renormalization.
pub fn activate_coeffs<T: Real>(raw: &FusionCoeffs<T>) -> FusionCoeffs<T> {
    let relu = |t: &Tensor<T>| t.map(|v| v.max(T::zero()));
    FusionCoeffs {
        a: relu(&raw.a),
        r: relu(&raw.r),
        s: relu(&raw.s),
        t: relu(&raw.t),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub a: Var,
    pub r: Var,
    pub s: Var,
    pub t: Var,
}

impl VarSet for FusionVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        f(join(prefix, "a"), self.a);
        f(join(prefix, "r"), self.r);
        f(join(prefix, "s"), self.s);
        f(join(prefix, "t"), self.t);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpnConfig {
    pub n_codewords: usize,
    pub codeword_dim: usize,
    /// Channels of each per-scale guidance map.
    pub guidance_channels: usize,
    pub k_recurrence: usize,
    pub share_params: bool,
    /// Pyramid channel count, which every level keeps.
    pub output_channels: usize,
    /// Adds the spatial mean of the bases map to each guidance map.
    pub transfer_enabled: bool,
    /// Spatial size of every branch kernel (1 or 3).
    pub branch_kernel: usize,
    /// Rescales activated coefficient groups to their initial sums.
    pub rescale_to_sum: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            n_codewords: 128,
            codeword_dim: 512,
            guidance_channels: 512,
            k_recurrence: 4,
            share_params: true,
            output_channels: 256,
            transfer_enabled: true,
            branch_kernel: 1,
            rescale_to_sum: false,
        }
    }
}

impl FpnConfig {
    /// Narrow decoder for gradient checks: 8 pyramid channels, 4 codewords
    /// of dimension 8.
    pub fn tiny() -> Self {
        Self {
            n_codewords: 4,
            codeword_dim: 8,
            guidance_channels: 8,
            k_recurrence: 2,
            output_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_recurrence == 0 {
            return Err(Error::Config("k_recurrence must be at least 1".into()));
        }
        for (name, v) in [
            ("n_codewords", self.n_codewords),
            ("codeword_dim", self.codeword_dim),
            ("guidance_channels", self.guidance_channels),
            ("output_channels", self.output_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.transfer_enabled && self.guidance_channels != self.codeword_dim {
            return Err(Error::Config(format!(
                "codeword transfer needs guidance_channels ({}) equal to codeword_dim ({})",
                self.guidance_channels, self.codeword_dim
            )));
        }
        if self.branch_kernel % 2 == 0 {
            return Err(Error::Config(format!("branch_kernel must be odd, got {}", self.branch_kernel)));
        }
        Ok(())
    }

    /// Number of independent parameter records.
    pub fn stage_records(&self) -> usize {
        if self.share_params {
            1
        } else {
            self.k_recurrence
        }
    }
}

/// Guidance, assembly and output projection of one target scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBranch<T: Real = f64> {
    pub guidance: Conv<T>,
    pub assembly: Conv<T>,
    /// Maps `[f̃; G]` back to the pyramid channel count.
    pub projection: Conv<T>,
}

impl<T: Real> Parameters<T> for ScaleBranch<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.guidance.visit(&join(prefix, "guidance"), f);
        self.assembly.visit(&join(prefix, "assembly"), f);
        self.projection.visit(&join(prefix, "projection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.guidance.visit_mut(&join(prefix, "guidance"), f);
        self.assembly.visit_mut(&join(prefix, "assembly"), f);
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScaleBranchVars {
    pub guidance: ConvVars,
    pub assembly: ConvVars,
    pub projection: ConvVars,
}

impl VarSet for ScaleBranchVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        self.guidance.visit_vars(&join(prefix, "guidance"), f);
        self.assembly.visit_vars(&join(prefix, "assembly"), f);
        self.projection.visit_vars(&join(prefix, "projection"), f);
    }
}

const SCALE_NAMES: [&str; 3] = ["scale4", "scale5", "scale6"];

/// All learned values of one decoding stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnStageParams<T: Real = f64> {
    pub coeffs: FusionCoeffs<T>,
    pub bases: Conv<T>,
    pub weighting: Conv<T>,
    /// Branches for P4, P5 and P6.
    pub scales: [ScaleBranch<T>; 3],
}

impl<T: Real> FpnStageParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &FpnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.output_channels, cfg.branch_kernel);
        let bases = Conv::init(cfg.codeword_dim, c, k, LINEAR_GAIN, rng);
        let weighting = Conv::init(cfg.n_codewords, c, k, LINEAR_GAIN, rng);
        let scales = [(); 3].map(|_| ScaleBranch {
            guidance: Conv::init(cfg.guidance_channels, c, k, LINEAR_GAIN, rng),
            assembly: Conv::init(cfg.n_codewords, cfg.guidance_channels, k, LINEAR_GAIN, rng),
            projection: Conv::init(c, cfg.codeword_dim + cfg.guidance_channels, k, LINEAR_GAIN, rng),
        });
        Ok(Self {
            coeffs: FusionCoeffs::default(),
            bases,
            weighting,
            scales,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> FpnStageVars {
        FpnStageVars {
            coeffs: FusionVars {
                a: g.param(self.coeffs.a.clone()),
                r: g.param(self.coeffs.r.clone()),
                s: g.param(self.coeffs.s.clone()),
                t: g.param(self.coeffs.t.clone()),
            },
            bases: self.bases.bind(g),
            weighting: self.weighting.bind(g),
            scales: self.scales.each_ref().map(|s| ScaleBranchVars {
                guidance: s.guidance.bind(g),
                assembly: s.assembly.bind(g),
                projection: s.projection.bind(g),
            }),
        }
    }

    /// Zeroes the per-scale output projections, making the stage an identity.
    pub fn zero_projections(&mut self) {
        for s in &mut self.scales {
            s.projection.weight = Tensor::zeros(s.projection.weight.dims().to_vec());
            s.projection.bias = Tensor::zeros(s.projection.bias.dims().to_vec());
        }
    }

    /// Reorders the codeword index in the weighting kernel and every
    /// assembly kernel. `perm[new] = old`.
    pub fn permute_codewords(&mut self, perm: &[usize]) -> Result<()> {
        permute_outputs(&mut self.weighting, perm)?;
        for s in &mut self.scales {
            permute_outputs(&mut s.assembly, perm)?;
        }
        Ok(())
    }
}

impl<T: Real> Parameters<T> for FpnStageParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.coeffs.visit(&join(prefix, "coeffs"), f);
        self.bases.visit(&join(prefix, "bases"), f);
        self.weighting.visit(&join(prefix, "weighting"), f);
        for (s, name) in self.scales.iter().zip(SCALE_NAMES) {
            s.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.coeffs.visit_mut(&join(prefix, "coeffs"), f);
        self.bases.visit_mut(&join(prefix, "bases"), f);
        self.weighting.visit_mut(&join(prefix, "weighting"), f);
        for (s, name) in self.scales.iter_mut().zip(SCALE_NAMES) {
            s.visit_mut(&join(prefix, name), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FpnStageVars {
    pub coeffs: FusionVars,
    pub bases: ConvVars,
    pub weighting: ConvVars,
    pub scales: [ScaleBranchVars; 3],
}

impl VarSet for FpnStageVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        self.coeffs.visit_vars(&join(prefix, "coeffs"), f);
        self.bases.visit_vars(&join(prefix, "bases"), f);
        self.weighting.visit_vars(&join(prefix, "weighting"), f);
        for (s, name) in self.scales.iter().zip(SCALE_NAMES) {
            s.visit_vars(&join(prefix, name), f);
        }
    }
}

/// Parameters of the full recurrent decoder: one record when shared, `k`
/// records otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnParams<T: Real = f64> {
    pub stages: Vec<FpnStageParams<T>>,
}

impl<T: Real> FpnParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &FpnConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stages = (0..cfg.stage_records())
            .map(|_| FpnStageParams::init(cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { stages })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> FpnVars {
        FpnVars {
            stages: self.stages.iter().map(|s| s.bind(g)).collect(),
        }
    }
}

impl<T: Real> Parameters<T> for FpnParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FpnVars {
    pub stages: Vec<FpnStageVars>,
}

impl VarSet for FpnVars {
    fn visit_vars(&self, prefix: &str, f: &mut dyn FnMut(String, Var)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_vars(&join(prefix, &format!("stage{i}")), f);
        }
    }
}

fn grid<T: Real>(g: &Graph<T>, v: Var) -> Result<(usize, usize)> {
    let (_, h, w) = g.value(v).chw()?;
    Ok((h, w))
}

/// Max-pools `x` until it reaches `target`.
fn pool_to<T: Real>(g: &mut Graph<T>, mut x: Var, target: (usize, usize)) -> Result<Var> {
    while grid(g, x)? != target {
        let (h, w) = grid(g, x)?;
        if h <= target.0 && w <= target.1 {
            return Err(Error::shape(
                "fpn",
                format!("cannot max-pool {h}x{w} down to {}x{}", target.0, target.1),
            ));
        }
        x = g.maxpool2x2(x)?;
    }
    Ok(x)
}

fn up_to<T: Real>(g: &mut Graph<T>, x: Var, target: (usize, usize)) -> Result<Var> {
    g.nearest_resize(x, target.0, target.1)
}

fn activated<T: Real>(g: &mut Graph<T>, raw: Var, rescale: bool) -> Result<Var> {
    let act = g.relu(raw)?;
    if rescale {
        let k = g.value(raw).numel() as f64;
        g.rescale_to_sum(act, k, 1e-4)
    } else {
        Ok(act)
    }
}

fn check_pyramid<T: Real>(g: &Graph<T>, p: &[Var; 5]) -> Result<()> {
    validate_grids(&p.map(|v| g.value(v).dims().to_vec()))
}

/// `m_code = a0·↑P7 + a1·P6 + a2·↓P5 + a3·↓P4 + a4·↓P3` on P6's grid.
pub fn fuse_code_map<T: Real>(g: &mut Graph<T>, p: &[Var; 5], a: Var, rescale: bool) -> Result<Var> {
    check_pyramid(g, p)?;
    let target = grid(g, p[3])?;
    let parts = [
        up_to(g, p[4], target)?,
        p[3],
        pool_to(g, p[2], target)?,
        pool_to(g, p[1], target)?,
        pool_to(g, p[0], target)?,
    ];
    let coeffs = activated(g, a, rescale)?;
    g.weighted_sum(coeffs, &parts)
}

/// `(m4, m5, m6)`, each fusing a level with its coarser and finer
/// neighbours: `m_l = c0·↑P(l+1) + c1·P(l) + c2·↓P(l−1)`.
pub fn fuse_scale_maps<T: Real>(
    g: &mut Graph<T>,
    p: &[Var; 5],
    coeffs: &FusionVars,
    rescale: bool,
) -> Result<[Var; 3]> {
    check_pyramid(g, p)?;
    let mut out = [p[0]; 3];
    for (i, raw) in [coeffs.r, coeffs.s, coeffs.t].into_iter().enumerate() {
        let level = i + 1;
        let target = grid(g, p[level])?;
        let parts = [
            up_to(g, p[level + 1], target)?,
            p[level],
            g.maxpool2x2(p[level - 1])?,
        ];
        let c = activated(g, raw, rescale)?;
        out[i] = g.weighted_sum(c, &parts)?;
    }
    Ok(out)
}

/// Intermediates of one decoding stage.
#[derive(Debug, Clone, Copy)]
pub struct FpnStageOutput {
    pub outputs: [Var; 5],
    /// Decoded maps `P̂3..P̂7` before the residual merge.
    pub decoded: [Var; 5],
    /// The single codeword matrix every scale branch assembles from.
    pub codewords: Var,
    /// Spatially normalized weighting maps on the P6 grid.
    pub weights: Var,
    pub code_map: Var,
    pub scale_maps: [Var; 3],
}

pub fn fpn_decode_once<T: Real>(
    g: &mut Graph<T>,
    p: &[Var; 5],
    vars: &FpnStageVars,
    cfg: &FpnConfig,
) -> Result<FpnStageOutput> {
    let code_map = fuse_code_map(g, p, vars.coeffs.a, cfg.rescale_to_sum)?;
    let cw = generate_codewords(g, code_map, &vars.bases, &vars.weighting)?;
    let scale_maps = fuse_scale_maps(g, p, &vars.coeffs, cfg.rescale_to_sum)?;
    let mut mid = [p[0]; 3];
    for (i, (&m, branch)) in scale_maps.iter().zip(&vars.scales).enumerate() {
        let guidance = build_guidance(g, m, cw.bases, &branch.guidance, cfg.transfer_enabled)?;
        let assembly = assemble(g, guidance.guided, cw.codewords, &branch.assembly)?;
        let fused = g.concat_channels(&[assembly.upsampled, guidance.raw])?;
        mid[i] = branch.projection.apply(g, fused)?;
    }
    let p3_grid = grid(g, p[0])?;
    let decoded = [
        up_to(g, mid[0], p3_grid)?,
        mid[0],
        mid[1],
        mid[2],
        g.maxpool2x2(mid[2])?,
    ];
    let mut outputs = [p[0]; 5];
    for l in 0..5 {
        let (pd, dd) = (g.value(p[l]).dims(), g.value(decoded[l]).dims());
        if pd != dd {
            return Err(Error::Config(format!(
                "decoded {} has dims {dd:?} but the input level has {pd:?}",
                LEVELS[l]
            )));
        }
        outputs[l] = g.add(p[l], decoded[l])?;
    }
    Ok(FpnStageOutput {
        outputs,
        decoded,
        codewords: cw.codewords,
        weights: cw.weights,
        code_map,
        scale_maps,
    })
}

/// Applies `k_recurrence` decoding stages in sequence.
pub fn fpn_decode<T: Real>(g: &mut Graph<T>, p: &[Var; 5], vars: &FpnVars, cfg: &FpnConfig) -> Result<[Var; 5]> {
    cfg.validate()?;
    if vars.stages.len() != cfg.stage_records() {
        return Err(Error::Config(format!(
            "{} parameter records bound, config needs {}",
            vars.stages.len(),
            cfg.stage_records()
        )));
    }
    let mut x = *p;
    for stage in 0..cfg.k_recurrence {
        let v = &vars.stages[if cfg.share_params { 0 } else { stage }];
        x = fpn_decode_once(g, &x, v, cfg)?.outputs;
    }
    Ok(x)
}
