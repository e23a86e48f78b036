//! Property-based invariants of the decoder building blocks.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hgd::fpn::{activate_coeffs, FusionCoeffs};
use hgd::hgd::{assemble, generate_codewords, permute_outputs};
use hgd::params::Conv;
use hgd::tensor::ops::{rescale_to_sum, softmax_spatial};
use hgd::{Graph, Tensor};

fn random_conv(co: usize, ci: usize, seed: u64) -> Conv<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Conv {
        weight: Tensor::uniform(vec![co, ci], -1.0, 1.0, &mut rng),
        bias: Tensor::uniform(vec![co], -1.0, 1.0, &mut rng),
    }
}

/// `(codewords, bases)` for a pointwise bases/weighting pair.
fn codewords(x: &Tensor<f64>, bases: &Conv<f64>, weighting: &Conv<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let input = g.input(x.clone());
    let (b, a) = (bases.bind(&mut g), weighting.bind(&mut g));
    let out = generate_codewords(&mut g, input, &b, &a).unwrap();
    (g.value(out.codewords).clone(), g.value(out.bases).clone())
}

fn tensor(dims: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
    Tensor::uniform(dims, -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_channels_are_distributions(c in 1usize..6, h in 1usize..10, w in 1usize..10, scale in 0.0f64..80.0, seed: u64) {
        let a = softmax_spatial(&tensor(vec![c, h, w], seed, scale)).unwrap();
        for ch in 0..c {
            let s: f64 = a.channel(ch).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(a.channel(ch).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn codewords_are_convex_combinations(ci in 1usize..6, cd in 1usize..6, n in 1usize..6, h in 1usize..6, w in 1usize..6, seed: u64) {
        let x = tensor(vec![ci, h, w], seed, 3.0);
        let (c, b) = codewords(&x, &random_conv(cd, ci, seed ^ 1), &random_conv(n, ci, seed ^ 2));
        for d in 0..cd {
            let lo = b.channel(d).iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = b.channel(d).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let v = c.at(&[d, i]);
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn weighting_bias_shift_leaves_codewords(ci in 1usize..5, cd in 1usize..5, n in 1usize..5, h in 1usize..6, w in 1usize..6, shift in -20.0f64..20.0, seed: u64) {
        let x = tensor(vec![ci, h, w], seed, 2.0);
        let bases = random_conv(cd, ci, seed ^ 3);
        let weighting = random_conv(n, ci, seed ^ 4);
        let mut shifted = weighting.clone();
        for v in shifted.bias.data_mut() {
            *v += shift;
        }
        let (a, _) = codewords(&x, &bases, &weighting);
        let (b, _) = codewords(&x, &bases, &shifted);
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn joint_codeword_permutation_is_invisible(ci in 1usize..5, cd in 1usize..5, n in 2usize..6, gc in 1usize..5, seed: u64) {
        let x = tensor(vec![ci, 3, 4], seed, 2.0);
        let guided = tensor(vec![gc, 6, 5], seed ^ 5, 2.0);
        let bases = random_conv(cd, ci, seed ^ 6);
        let mut weighting = random_conv(n, ci, seed ^ 7);
        let mut assembly = random_conv(n, gc, seed ^ 8);
        let run = |weighting: &Conv<f64>, assembly: &Conv<f64>| {
            let mut g = Graph::new();
            let input = g.input(x.clone());
            let (b, a) = (bases.bind(&mut g), weighting.bind(&mut g));
            let branch = generate_codewords(&mut g, input, &b, &a).unwrap();
            let y = g.input(guided.clone());
            let asm = assembly.bind(&mut g);
            let out = assemble(&mut g, y, branch.codewords, &asm).unwrap();
            g.value(out.upsampled).clone()
        };
        let before = run(&weighting, &assembly);
        let perm: Vec<usize> = (0..n).rev().collect();
        permute_outputs(&mut weighting, &perm).unwrap();
        permute_outputs(&mut assembly, &perm).unwrap();
        prop_assert!(before.max_abs_diff(&run(&weighting, &assembly)) <= 1e-12);
    }

    #[test]
    fn activated_coefficients_are_non_negative(raw in proptest::collection::vec(-5.0f64..5.0, 14)) {
        let c = FusionCoeffs::<f64>::from_slices(&raw[..5], &raw[5..8], &raw[8..11], &raw[11..]).unwrap();
        let act = activate_coeffs(&c);
        for (t, r) in [(&act.a, &c.a), (&act.r, &c.r), (&act.s, &c.s), (&act.t, &c.t)] {
            for (&v, &x) in t.data().iter().zip(r.data()) {
                prop_assert!(v >= 0.0);
                prop_assert_eq!(v, x.max(0.0));
            }
        }
    }

    #[test]
    fn rescaled_coefficients_hit_their_target(raw in proptest::collection::vec(0.0f64..5.0, 1..8)) {
        let t = Tensor::<f64>::from_f64(vec![raw.len()], &raw).unwrap();
        let target = raw.len() as f64;
        let r = rescale_to_sum(&t, target, 1e-4).unwrap();
        let sum: f64 = raw.iter().sum();
        let expected = target * sum / (sum + 1e-4);
        prop_assert!((r.sum() - expected).abs() <= 1e-9 * target.max(1.0));
        prop_assert!(r.data().iter().all(|&v| v >= 0.0));
    }
}
