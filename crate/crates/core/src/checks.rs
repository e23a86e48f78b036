//! Ready-made gradient checks over the tiny networks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::efficientfcn::{segment_forward, synth_dataset, SegConfig, SegParams};
use crate::error::Result;
use crate::fpn::{fpn_decode, FpnConfig, FpnParams, Pyramid};
use crate::tensor::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use crate::tensor::Tensor;

/// Input extent of the segmentation check.
pub const SEG_CHECK_SIZE: usize = 32;
/// Smallest input whose stride-32 grid has more than one position, so the
/// spatial softmax of the weighting branch is not constant.
pub const SEG_CHECK_SIZE_WIDE: usize = 64;
/// Finest pyramid extent of the pyramid check (down to 1×1 at the coarsest).
pub const FPN_CHECK_SIZE: usize = 16;

/// Cross-entropy of the tiny segmentation network on one synthetic
/// `size`×`size` image.
pub fn seg_gradcheck(size: usize, gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let cfg = SegConfig::tiny(5);
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let params = SegParams::<f64>::init(&cfg, &mut rng)?;
    let sample = synth_dataset(gc.seed, 1, size, cfg.num_classes)?.remove(0);
    gradcheck(
        &params,
        |g, p: &SegParams<f64>| {
            let vars = p.bind(g);
            let x = g.input(sample.image.clone());
            let out = segment_forward(g, x, &vars, &cfg)?;
            Ok((g.cross_entropy(out.logits, &sample.label)?, vars))
        },
        gc,
    )
}

/// Shrinks the per-scale output projections so activations stay O(1)
/// through the recurrence and rounding noise stays below the check floor.
const PROJECTION_SCALE: f64 = 0.1;

/// Random projection of every output level, scaled like a mean, of the
/// tiny pyramid decoder.
/// Fusion scalars start away from the ReLU kink so both sides of each
/// finite difference stay on the same linear piece.
pub fn fpn_gradcheck(cfg: &FpnConfig, gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut params = FpnParams::<f64>::init(cfg, &mut rng)?;
    for stage in &mut params.stages {
        for t in [&mut stage.coeffs.a, &mut stage.coeffs.r, &mut stage.coeffs.s, &mut stage.coeffs.t] {
            *t = Tensor::uniform(t.dims().to_vec(), 0.5, 1.5, &mut rng);
        }
        for branch in &mut stage.scales {
            branch.projection.weight = branch.projection.weight.map(|w| w * PROJECTION_SCALE);
        }
    }
    let pyramid = Pyramid::<f64>::random(cfg.output_channels, FPN_CHECK_SIZE, FPN_CHECK_SIZE, &mut rng);
    let total: usize = pyramid.levels.iter().map(Tensor::numel).sum();
    let bound = 1.0 / total as f64;
    let weights: Vec<Tensor<f64>> = pyramid
        .levels
        .iter()
        .map(|l| Tensor::uniform(l.dims().to_vec(), -bound, bound, &mut rng))
        .collect();
    gradcheck(
        &params,
        |g, p: &FpnParams<f64>| {
            let vars = p.bind(g);
            let inputs = pyramid.bind_inputs(g);
            let out = fpn_decode(g, &inputs, &vars, cfg)?;
            let mut loss = g.dot(out[0], weights[0].clone())?;
            for (o, w) in out.iter().zip(&weights).skip(1) {
                let term = g.dot(*o, w.clone())?;
                loss = g.add(loss, term)?;
            }
            Ok((loss, vars))
        },
        gc,
    )
}
