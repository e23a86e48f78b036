//! Acceptance suite. Every test prints one `PASS`/`FAIL` line with the
//! measured value and the pinned tolerance, then asserts.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hgd::checks::{fpn_gradcheck, seg_gradcheck, SEG_CHECK_SIZE, SEG_CHECK_SIZE_WIDE};
use hgd::cost::{efficientfcn_spec, emit_report, fpn_spec, resnet_spec, FpnVariant, DETECTION_INPUT};
use hgd::efficientfcn::{evaluate, segment_forward, synth_dataset, train, SegConfig, SegParams, TrainConfig};
use hgd::fpn::{fpn_decode, FpnConfig, FpnParams, Pyramid};
use hgd::hgd::{assemble, generate_codewords, HgdConfig};
use hgd::params::{Conv, Parameters};
use hgd::tensor::gradcheck::GradcheckConfig;
use hgd::tensor::ops::softmax_spatial;
use hgd::{Graph, Tensor};

const SOFTMAX_TOL: f64 = 1e-12;
const SOFTMAX_BUDGET: Duration = Duration::from_secs(10);
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
const GRADCHECK_TOL: f64 = 1e-5;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const PERMUTATION_TOL: f64 = 1e-10;
const LEARN_TARGET: f64 = 0.99;
const LEARN_BUDGET: Duration = Duration::from_secs(300);

/// Reference cost figures, GMACs.
const REF_RESNET101: f64 = 44.6;
const REF_RESNET101_DILATED: f64 = 223.6;
const REF_DILATION_RATIO: f64 = 5.01;
const REF_EFFICIENTFCN_256: f64 = 69.6;
const REF_CODEWORD_DELTA: f64 = 2.5;
const REF_FPN_TOTALS: [f64; 5] = [306.3, 397.7, 489.2, 580.7, 672.1];
const COST_REL_TOL: f64 = 0.10;
const RATIO_REL_TOL: f64 = 0.05;
const DELTA_REL_TOL: f64 = 0.20;
const STAGE_REL_TOL: f64 = 0.15;

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn rel(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

fn gmacs(spec: hgd::Result<hgd::cost::ArchSpec>) -> (f64, u64) {
    let r = emit_report(&spec.unwrap()).unwrap();
    (r.gmacs(), r.total_params)
}

#[test]
fn softmax_normalization() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dims = vec![rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let scale = rng.gen_range(0.1..50.0);
        let logits = Tensor::<f64>::uniform(dims, -scale, scale, &mut rng);
        let a = softmax_spatial(&logits).unwrap();
        for c in 0..a.dims()[0] {
            worst = worst.max((a.channel(c).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= SOFTMAX_TOL && elapsed < SOFTMAX_BUDGET;
    assert!(verdict(
        "softmax_normalization",
        pass,
        format!("max |sum-1| {worst:.2e} (tol {SOFTMAX_TOL:.0e}), {elapsed:.2?}")
    ));
}

fn random_conv(co: usize, ci: usize, rng: &mut ChaCha8Rng) -> Conv<f64> {
    Conv {
        weight: Tensor::uniform(vec![co, ci], -1.0, 1.0, rng),
        bias: Tensor::uniform(vec![co], -1.0, 1.0, rng),
    }
}

fn pointwise(conv: &Conv<f64>, x: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (ci, h, w) = x.chw().unwrap();
    (0..conv.c_out())
        .map(|o| {
            (0..h * w)
                .map(|p| conv.bias.data()[o] + (0..ci).map(|i| conv.weight.data()[o * ci + i] * x.channel(i)[p]).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn codeword_and_assembly_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (ci, cd, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (gh, gw, gc) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let m32 = Tensor::uniform(vec![ci, h, w], -2.0, 2.0, &mut rng);
        let guided = Tensor::uniform(vec![gc, gh, gw], -2.0, 2.0, &mut rng);
        let (bases, weighting, assembly) = (
            random_conv(cd, ci, &mut rng),
            random_conv(n, ci, &mut rng),
            random_conv(n, gc, &mut rng),
        );

        let mut g = Graph::new();
        let x = g.input(m32.clone());
        let (bv, wv, av) = (bases.bind(&mut g), weighting.bind(&mut g), assembly.bind(&mut g));
        let branch = generate_codewords(&mut g, x, &bv, &wv).unwrap();
        let y = g.input(guided.clone());
        let asm = assemble(&mut g, y, branch.codewords, &av).unwrap();
        let (fast_c, fast_f) = (g.value(branch.codewords).clone(), g.value(asm.upsampled).clone());

        let b = pointwise(&bases, &m32);
        let a = pointwise(&weighting, &m32);
        let mut oracle_c = vec![vec![0.0; n]; cd];
        for i in 0..n {
            let peak = a[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = a[i].iter().map(|v| (v - peak).exp()).sum();
            for d in 0..cd {
                for p in 0..h * w {
                    oracle_c[d][i] += (a[i][p] - peak).exp() / z * b[d][p];
                }
                worst = worst.max((fast_c.at(&[d, i]) - oracle_c[d][i]).abs());
            }
        }
        let wmap = pointwise(&assembly, &guided);
        for d in 0..cd {
            for p in 0..gh * gw {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += wmap[i][p] * oracle_c[d][i];
                }
                worst = worst.max((fast_f.channel(d)[p] - acc).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= ORACLE_TOL && elapsed < ORACLE_BUDGET;
    assert!(verdict(
        "codeword_and_assembly_oracles",
        pass,
        format!("200 configs, max abs diff {worst:.2e} (tol {ORACLE_TOL:.0e}), {elapsed:.2?}")
    ));
}

#[test]
fn gradient_checks() {
    let start = Instant::now();
    let gc = GradcheckConfig::default();
    let seg = seg_gradcheck(SEG_CHECK_SIZE, &gc).unwrap();
    let wide = seg_gradcheck(SEG_CHECK_SIZE_WIDE, &gc).unwrap();
    let fpn = fpn_gradcheck(&FpnConfig::tiny(), &gc).unwrap();
    let elapsed = start.elapsed();
    for (label, report) in [("seg32", &seg), ("seg64", &wide), ("fpn", &fpn)] {
        for (group, err) in report.by_group() {
            println!("  {label} {group}: {err:.2e}");
        }
    }
    let scalars = ["a", "r", "s", "t"]
        .iter()
        .all(|c| fpn.entries.iter().any(|e| e.name == format!("stage0.coeffs.{c}")));
    let pass = seg.max_rel_error() <= GRADCHECK_TOL
        && wide.max_rel_error() <= GRADCHECK_TOL
        && fpn.max_rel_error() <= GRADCHECK_TOL
        && scalars
        && elapsed < GRADCHECK_BUDGET;
    assert!(verdict(
        "gradient_checks",
        pass,
        format!(
            "seg 32x32 max rel {:.2e}, seg 64x64 max rel {:.2e}, fpn max rel {:.2e} (tol {GRADCHECK_TOL:.0e}), fusion scalars checked: {scalars}, {elapsed:.2?}",
            seg.max_rel_error(),
            wide.max_rel_error(),
            fpn.max_rel_error()
        )
    ));
}

#[test]
fn full_scale_decoder_shape() {
    let cfg = SegConfig::full_scale(60);
    let params = SegParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut g = Graph::new();
    g.set_check_finite(false);
    let vars = params.bind(&mut g);
    let x = g.input(Tensor::uniform(vec![3, 512, 512], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5)));
    let out = segment_forward(&mut g, x, &vars, &cfg).unwrap();
    let dims = g.value(out.decoder.output).dims().to_vec();
    let pass = dims == [2048, 64, 64];
    assert!(verdict("full_scale_decoder_shape", pass, format!("f_hat dims {dims:?}, expected [2048, 64, 64]")));
}

#[test]
fn cost_resnet101_standard() {
    let (v, _) = gmacs(resnet_spec(101, (512, 512), false));
    let e = rel(v, REF_RESNET101);
    assert!(verdict(
        "cost_resnet101_standard",
        e <= COST_REL_TOL,
        format!("{v:.2} G vs {REF_RESNET101} G, rel {e:.3} (tol {COST_REL_TOL})")
    ));
}

#[test]
fn cost_resnet101_dilated() {
    let (v, _) = gmacs(resnet_spec(101, (512, 512), true));
    let e = rel(v, REF_RESNET101_DILATED);
    assert!(verdict(
        "cost_resnet101_dilated",
        e <= COST_REL_TOL,
        format!("{v:.2} G vs {REF_RESNET101_DILATED} G, rel {e:.3} (tol {COST_REL_TOL})")
    ));
}

#[test]
fn cost_dilation_ratio() {
    let (s, _) = gmacs(resnet_spec(101, (512, 512), false));
    let (d, _) = gmacs(resnet_spec(101, (512, 512), true));
    let e = rel(d / s, REF_DILATION_RATIO);
    assert!(verdict(
        "cost_dilation_ratio",
        e <= RATIO_REL_TOL,
        format!("{:.3} vs {REF_DILATION_RATIO}, rel {e:.3} (tol {RATIO_REL_TOL})", d / s)
    ));
}

#[test]
fn cost_dilation_params_equal() {
    let (_, s) = gmacs(resnet_spec(101, (512, 512), false));
    let (_, d) = gmacs(resnet_spec(101, (512, 512), true));
    assert!(verdict("cost_dilation_params_equal", s == d, format!("{s} vs {d} params")));
}

#[test]
fn cost_efficientfcn() {
    let (v, _) = gmacs(efficientfcn_spec(256, 1024, (512, 512)));
    let e = rel(v, REF_EFFICIENTFCN_256);
    assert!(verdict(
        "cost_efficientfcn",
        e <= COST_REL_TOL,
        format!("{v:.2} G vs {REF_EFFICIENTFCN_256} G, rel {e:.3} (tol {COST_REL_TOL})")
    ));
}

#[test]
fn cost_codeword_delta() {
    let (a, _) = gmacs(efficientfcn_spec(256, 1024, (512, 512)));
    let (b, _) = gmacs(efficientfcn_spec(512, 1024, (512, 512)));
    let e = rel(b - a, REF_CODEWORD_DELTA);
    assert!(verdict(
        "cost_codeword_delta",
        e <= DELTA_REL_TOL,
        format!("{:.3} G vs {REF_CODEWORD_DELTA} G, rel {e:.3} (tol {DELTA_REL_TOL})", b - a)
    ));
}

fn fpn_cfg(k: usize) -> FpnConfig {
    FpnConfig {
        k_recurrence: k,
        branch_kernel: 3,
        ..FpnConfig::default()
    }
}

#[test]
fn fpn_recurrence_cost() {
    let totals: Vec<u64> = (1..=5)
        .map(|k| emit_report(&fpn_spec(FpnVariant::HgdFpn, &fpn_cfg(k), DETECTION_INPUT).unwrap()).unwrap().total_macs)
        .collect();
    let steps: Vec<u64> = totals.windows(2).map(|w| w[1] - w[0]).collect();
    let affine = steps.iter().all(|&s| s == steps[0]);
    let stage = steps[0] as f64 / 1e9;
    let ref_steps: Vec<f64> = REF_FPN_TOTALS.windows(2).map(|w| w[1] - w[0]).collect();
    let worst = ref_steps.iter().map(|&r| rel(stage, r)).fold(0.0, f64::max);
    let pass = affine && worst <= STAGE_REL_TOL;
    assert!(verdict(
        "fpn_recurrence_cost",
        pass,
        format!(
            "totals {:?} G, exact affine: {affine}, stage {stage:.2} G vs {ref_steps:.1?} G, worst rel {worst:.3} (tol {STAGE_REL_TOL})",
            totals.iter().map(|t| format!("{:.1}", *t as f64 / 1e9)).collect::<Vec<_>>()
        )
    ));
}

#[test]
fn fpn_shared_params_independent_of_k() {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut first = None;
    for k in 1..=5 {
        let cfg = FpnConfig {
            k_recurrence: k,
            ..FpnConfig::tiny()
        };
        let toy = FpnParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(k as u64))
            .unwrap()
            .param_count();
        let report = emit_report(&fpn_spec(FpnVariant::HgdFpn, &cfg, (64, 64)).unwrap()).unwrap();
        let counted: u64 = report.rows.iter().filter(|r| r.layer.starts_with("hgd")).map(|r| r.params).sum();
        pass &= toy as u64 == counted && *first.get_or_insert(toy) == toy;
        lines.push(format!("k={k}: {toy}/{counted}"));
    }
    assert!(verdict(
        "fpn_shared_params_independent_of_k",
        pass,
        format!("executable/cost params {}", lines.join(", "))
    ));
}

#[test]
fn residual_identity() {
    let cfg = FpnConfig {
        k_recurrence: 3,
        share_params: false,
        ..FpnConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = FpnParams::<f64>::init(&cfg, &mut rng).unwrap();
    for s in &mut params.stages {
        s.zero_projections();
    }
    let pyramid = Pyramid::<f64>::random(cfg.output_channels, 40, 56, &mut rng);
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let inputs = pyramid.bind_inputs(&mut g);
    let out = fpn_decode(&mut g, &inputs, &vars, &cfg).unwrap();
    let out = Pyramid::from_graph(&g, out);
    let pass = out.levels.iter().zip(&pyramid.levels).all(|(a, b)| {
        a.dims() == b.dims() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    assert!(verdict("residual_identity", pass, "zeroed projections, k=3, bitwise comparison of all levels"));
}

fn random_perm(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    while p.iter().enumerate().all(|(i, &v)| i == v) {
        p.shuffle(rng);
    }
    p
}

#[test]
fn codeword_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let cfg = SegConfig::tiny(5);
    let params = SegParams::<f64>::init(&cfg, &mut rng).unwrap();
    let mut permuted = params.clone();
    permuted.hgd.permute_codewords(&random_perm(cfg.hgd.n_codewords, &mut rng)).unwrap();
    let image = Tensor::uniform(vec![3, 64, 64], 0.0, 1.0, &mut rng);
    let f_hat = |p: &SegParams<f64>| {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = g.input(image.clone());
        let out = segment_forward(&mut g, x, &v, &cfg).unwrap();
        g.value(out.decoder.output).clone()
    };
    let seg_diff = f_hat(&params).max_abs_diff(&f_hat(&permuted));

    let fcfg = FpnConfig {
        k_recurrence: 2,
        share_params: false,
        branch_kernel: 3,
        ..FpnConfig::tiny()
    };
    let fparams = FpnParams::<f64>::init(&fcfg, &mut rng).unwrap();
    let mut fpermuted = fparams.clone();
    for s in &mut fpermuted.stages {
        s.permute_codewords(&random_perm(fcfg.n_codewords, &mut rng)).unwrap();
    }
    let pyramid = Pyramid::<f64>::random(fcfg.output_channels, 32, 24, &mut rng);
    let decode = |p: &FpnParams<f64>| {
        let mut g = Graph::new();
        let v = p.bind(&mut g);
        let x = pyramid.bind_inputs(&mut g);
        let out = fpn_decode(&mut g, &x, &v, &fcfg).unwrap();
        Pyramid::from_graph(&g, out)
    };
    let (a, b) = (decode(&fparams), decode(&fpermuted));
    let fpn_diff = a
        .levels
        .iter()
        .zip(&b.levels)
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max);

    let pass = seg_diff <= PERMUTATION_TOL && fpn_diff <= PERMUTATION_TOL;
    assert!(verdict(
        "codeword_permutation_equivariance",
        pass,
        format!("f_hat diff {seg_diff:.2e}, pyramid diff {fpn_diff:.2e} (tol {PERMUTATION_TOL:.0e})")
    ));
}

#[test]
fn learnability() {
    let start = Instant::now();
    let cfg = SegConfig::tiny(5);
    let data = synth_dataset(0, 32, 64, cfg.num_classes).unwrap();
    let tc = TrainConfig {
        base_lr: 0.02,
        ..TrainConfig::default()
    };
    let mut params = SegParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let log = train(&mut params, &cfg, &data, &tc, |_| {}).unwrap();
    let (pix_acc, miou) = evaluate(&params, &cfg, &data).unwrap();
    let elapsed = start.elapsed();
    let pass = pix_acc >= LEARN_TARGET && elapsed < LEARN_BUDGET;
    assert!(verdict(
        "learnability",
        pass,
        format!(
            "{} steps, final loss {:.4}, pixAcc {pix_acc:.4} (target {LEARN_TARGET}), mIoU {miou:.4}, {elapsed:.1?}",
            log.len(),
            log.last().map_or(f64::NAN, |r| r.loss)
        )
    ));
}

#[test]
fn transfer_ablation() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let on = SegConfig::tiny(5);
    let off = SegConfig {
        hgd: HgdConfig {
            transfer_enabled: false,
            ..on.hgd.clone()
        },
        ..on.clone()
    };
    let params = SegParams::<f64>::init(&on, &mut rng).unwrap();
    let image = Tensor::uniform(vec![3, 64, 64], 0.0, 1.0, &mut rng);
    let run = |cfg: &SegConfig| {
        let mut g = Graph::new();
        let v = params.bind(&mut g);
        let x = g.input(image.clone());
        let out = segment_forward(&mut g, x, &v, cfg).unwrap();
        let d = out.decoder;
        let dims: Vec<Vec<usize>> = [d.output, d.guidance.raw, d.guidance.guided, out.logits]
            .iter()
            .map(|&v| g.value(v).dims().to_vec())
            .collect();
        let identical = g.value(d.guidance.raw) == g.value(d.guidance.guided);
        (dims, identical)
    };
    let (dims_on, same_on) = run(&on);
    let (dims_off, same_off) = run(&off);
    let pass = dims_on == dims_off && same_off && !same_on;
    assert!(verdict(
        "transfer_ablation",
        pass,
        format!("shapes unchanged: {}, G_bar == G when disabled: {same_off}", dims_on == dims_off)
    ));
}
