//! Cost model against executable parameter counts and closed-form checks.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hgd::cost::{
    count_layer, emit_report, fpn_spec, hgd_layers, named_spec, resnet_spec, unet_spec, ArchOptions, FpnVariant,
    LayerKind, LayerSpec, ARCHITECTURES,
};
use hgd::fpn::{FpnConfig, FpnParams};
use hgd::hgd::{HgdConfig, HgdParams};
use hgd::params::Parameters;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn decoder_params_match_executable_model() {
    let variants = [
        HgdConfig::tiny(),
        HgdConfig {
            code_scales: vec![32],
            guide_scales: vec![8, 32],
            ..HgdConfig::tiny()
        },
        HgdConfig {
            transfer_enabled: false,
            guidance_channels: 5,
            ..HgdConfig::tiny()
        },
    ];
    let taps = [(6, (8, 8)), (7, (4, 4)), (9, (2, 2))];
    for cfg in variants {
        let exec = HgdParams::<f64>::init(&cfg, [6, 7, 9], &mut rng()).unwrap().param_count();
        let mut layers = Vec::new();
        hgd_layers("hgd", &cfg, taps, &mut layers).unwrap();
        let counted: u64 = layers.iter().map(|l| count_layer(l).unwrap().1).sum();
        assert_eq!(exec as u64, counted, "{cfg:?}");
    }
}

#[test]
fn pyramid_stage_params_match_executable_model() {
    for (kernel, share, k) in [(1, true, 3), (3, true, 2), (1, false, 3), (3, false, 2)] {
        let cfg = FpnConfig {
            branch_kernel: kernel,
            share_params: share,
            k_recurrence: k,
            ..FpnConfig::tiny()
        };
        let exec = FpnParams::<f64>::init(&cfg, &mut rng()).unwrap().param_count() as u64;
        let report = emit_report(&fpn_spec(FpnVariant::HgdFpn, &cfg, (128, 96)).unwrap()).unwrap();
        let counted: u64 = report.rows.iter().filter(|r| r.layer.starts_with("hgd")).map(|r| r.params).sum();
        assert_eq!(exec, counted, "kernel {kernel}, share {share}");
    }
}

#[test]
fn plain_pyramid_is_the_zero_stage_baseline() {
    let cfg = FpnConfig::default();
    let base = emit_report(&fpn_spec(FpnVariant::Fpn, &cfg, (800, 1333)).unwrap()).unwrap();
    let full = emit_report(&fpn_spec(FpnVariant::HgdFpn, &cfg, (800, 1333)).unwrap()).unwrap();
    let (stage_macs, stage_params) = full.subtotal("hgd");
    assert_eq!(base.total_macs + stage_macs, full.total_macs);
    assert_eq!(base.total_params + stage_params, full.total_params);
}

#[test]
fn deconv_variant_adds_only_upsampling_layers() {
    let bilinear = emit_report(&unet_spec(false, (512, 512)).unwrap()).unwrap();
    let deconv = emit_report(&unet_spec(true, (512, 512)).unwrap()).unwrap();
    let (macs, params) = deconv.subtotal("up");
    assert_eq!(bilinear.total_macs + macs, deconv.total_macs);
    assert_eq!(bilinear.total_params + params, deconv.total_params);
    assert_eq!(params, 2 * (4 * 512 * 512 + 512));
}

#[test]
fn csv_lists_every_layer_then_totals() {
    for name in ARCHITECTURES {
        let r = emit_report(&named_spec(name, &ArchOptions::default()).unwrap()).unwrap();
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,macs,params");
        assert_eq!(lines.len(), r.rows.len() + 2);
        let sum: u64 = r.rows.iter().map(|x| x.macs).sum();
        assert_eq!(sum, r.total_macs);
        assert!(r.to_text().contains(&r.name));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_macs_scale_with_area(ci in 1usize..64, co in 1usize..64, k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..40, w in 1usize..40, f in 1usize..4) {
        let kind = LayerKind::Conv { kernel: k, stride: 1, dilation: 1 };
        let one = LayerSpec { name: "a".into(), kind, c_in: ci, c_out: co, out_h: h, out_w: w, shares_weights: false };
        let big = LayerSpec { out_h: h * f, out_w: w * f, ..one.clone() };
        let (m1, p1) = count_layer(&one).unwrap();
        let (m2, p2) = count_layer(&big).unwrap();
        prop_assert_eq!(m2, m1 * (f * f) as u64);
        prop_assert_eq!(p1, p2);
        prop_assert_eq!(p1, (k * k * ci * co + co) as u64);
    }

    #[test]
    fn network_macs_scale_with_input_area(side in 1usize..5) {
        let a = emit_report(&resnet_spec(50, (32 * side, 32 * side), false).unwrap()).unwrap();
        let b = emit_report(&resnet_spec(50, (64 * side, 64 * side), false).unwrap()).unwrap();
        prop_assert_eq!(a.total_params, b.total_params);
        prop_assert_eq!(4 * a.total_macs, b.total_macs);
    }
}
