//! Property tests for the algebraic invariants of masking, mixing, loss
//! reweighting, the bowl sampler, transforms and session splitting.

use proptest::prelude::*;

use fscil_core::data::synthetic::{generate_synthetic, SyntheticSpec};
use fscil_core::data::{split_sessions, SplitPlan};
use fscil_core::ensemble::{make_cutmix_mask, weight_fn, MixMask, MixParams};
use fscil_core::patchmix::{apply_patchmix, bowl_weights, sample_patches};
use fscil_core::rng;
use fscil_core::ssl::{apply_transform, ViewTransform};
use fscil_core::tensor::{Tape, Tensor};

fn blend(l1: &Tensor<f64>, l2: &Tensor<f64>, mask: &MixMask) -> Vec<f64> {
    let mut tape = Tape::new();
    let a = tape.input(l1, false);
    let b = tape.input(l2, false);
    let m = tape.input(&mask.to_tensor(), false);
    let out = tape.masked_blend(a, b, m).unwrap();
    tape.value(out).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixing_equal_inputs_doubles(seed in 0u64..1000, h in 2usize..7, w in 2usize..7) {
        let mut r = rng::stream(seed, "prop-mask", 0);
        let mask = make_cutmix_mask(h, w, &MixParams::default(), &mut r).unwrap();
        let mut dr = rng::stream(seed, "prop-data", 0);
        let l = Tensor::from_fn(vec![2, 3, h, w], |_| rand::Rng::random_range(&mut dr, -2.0..2.0));
        let out = blend(&l, &l, &mask);
        for (o, v) in out.iter().zip(l.data()) {
            prop_assert_eq!(*o, 2.0 * v);
        }
    }

    #[test]
    fn mixing_is_linear(seed in 0u64..1000, scale in -3.0f64..3.0) {
        let mut r = rng::stream(seed, "prop-mask", 1);
        let mask = make_cutmix_mask(4, 4, &MixParams::default(), &mut r).unwrap();
        let mut dr = rng::stream(seed, "prop-data", 1);
        let mut gen = || Tensor::from_fn(vec![1, 2, 4, 4], |_| rand::Rng::random_range(&mut dr, -2.0..2.0));
        let l1 = gen();
        let l2 = gen();
        let scaled1 = Tensor::new(l1.shape().to_vec(), l1.data().iter().map(|v| v * scale).collect()).unwrap();
        let scaled2 = Tensor::new(l2.shape().to_vec(), l2.data().iter().map(|v| v * scale).collect()).unwrap();
        let direct = blend(&scaled1, &scaled2, &mask);
        let base = blend(&l1, &l2, &mask);
        for (d, b) in direct.iter().zip(&base) {
            prop_assert!((d - b * scale).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_fn_identities(kappa in 0.0f64..=1.0, r in 0.2f64..8.0) {
        prop_assert!((weight_fn(kappa, r) + weight_fn(1.0 - kappa, r) - 2.0).abs() < 1e-12);
        prop_assert!(weight_fn(kappa, r) >= 0.0 && weight_fn(kappa, r) <= 2.0);
    }

    #[test]
    fn weight_fn_is_monotone(k1 in 0.0f64..=1.0, k2 in 0.0f64..=1.0, r in 0.2f64..8.0) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        prop_assert!(weight_fn(lo, r) <= weight_fn(hi, r) + 1e-12);
    }

    #[test]
    fn sampled_masks_are_rectangles(seed in 0u64..2000, h in 2usize..9, w in 2usize..9, alpha in 0.3f64..4.0) {
        let mut r = rng::stream(seed, "prop-mask", 2);
        let mask = make_cutmix_mask(h, w, &MixParams { alpha, r: 3.0 }, &mut r).unwrap();
        prop_assert!(mask.is_valid_rectangle());
        prop_assert!((0.0..=1.0).contains(&mask.kappa_eff()));
    }

    #[test]
    fn bowl_weights_shape(n in 2usize..10, sigma in 0.1f64..2.0) {
        let g = bowl_weights(n, sigma).unwrap();
        let sum: f64 = g.weights().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(g.weights().iter().all(|&w| w >= 0.0));
        // Minimum at the centre cells; exact zero centre for odd n.
        let min = g.weights().iter().cloned().fold(f64::INFINITY, f64::min);
        if n % 2 == 1 {
            prop_assert_eq!(g.weights()[(n / 2) * n + n / 2], 0.0);
        }
        let c0 = (n - 1) / 2;
        prop_assert_eq!(g.weights()[c0 * n + c0], min);
        // Monotone nondecreasing away from the centre along rows/cols.
        for r in 0..n {
            for c in 0..n.saturating_sub(1) {
                let centre = (n as f64 - 1.0) / 2.0;
                if (c as f64) >= centre {
                    prop_assert!(g.weights()[r * n + c + 1] >= g.weights()[r * n + c] - 1e-15);
                }
            }
        }
        // Four-fold symmetry, bitwise.
        for r in 0..n {
            for c in 0..n {
                let w = g.weights()[r * n + c];
                prop_assert_eq!(w, g.weights()[r * n + (n - 1 - c)]);
                prop_assert_eq!(w, g.weights()[(n - 1 - r) * n + c]);
                prop_assert_eq!(w, g.weights()[c * n + (n - 1 - r)]);
            }
        }
    }

    #[test]
    fn patchmix_touches_bounded_pixels(seed in 0u64..1000, n in 2usize..5, k in 1usize..4) {
        // Divisible side: every cell is exactly (side/n)^2 pixels.
        let side = n * 4;
        let target = Tensor::<f64>::zeros(vec![1, side, side]);
        let background = Tensor::from_fn(vec![1, side, side], |_| 1.0);
        let grid = bowl_weights(n, 0.5).unwrap();
        let k = k.min(n * n - 1);
        let mut r = rng::stream(seed, "prop-patch", 0);
        let cells = sample_patches(&grid, 1, k, &mut r).unwrap();
        let out = apply_patchmix(&target, &background, &cells, n).unwrap();
        let changed = out.data().iter().filter(|&&v| v != 0.0).count();
        prop_assert!(changed <= k * (side / n) * (side / n));
        // Odd grids never touch the exact centre cell.
        if n % 2 == 1 {
            let centre = n / 2;
            let base = side / n;
            let y = centre * base + base / 2;
            prop_assert_eq!(out.data()[y * side + y], 0.0);
        }
    }

    #[test]
    fn transforms_permute_values(seed in 0u64..1000, t_idx in 0usize..6) {
        let mut r = rng::stream(seed, "prop-ssl", 0);
        let x = Tensor::from_fn(vec![2, 5, 5], |_| rand::Rng::random_range(&mut r, -1.0f64..1.0));
        let t = ViewTransform::ALL[t_idx];
        let y = apply_transform(&x, t).unwrap();
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        let back = apply_transform(&y, t.inverse()).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_partitions_classes(seed in 0u64..500, base in 2usize..5, way in 1usize..3, sessions in 1usize..3) {
        let classes = base + way * sessions + 1;
        let spec = SyntheticSpec {
            num_classes: classes,
            per_class: 4,
            side: 8,
            channels: 1,
            noise: 0.1,
            max_shift: 1,
        };
        let train = generate_synthetic::<f32>(&spec, seed, "train").unwrap();
        let test = generate_synthetic::<f32>(&spec, seed, "test").unwrap();
        let plan = SplitPlan::with_shuffled_order(base, way, 2, sessions, classes, seed);
        let specs = split_sessions(&train, &test, &plan).unwrap();
        prop_assert_eq!(specs.len(), sessions + 1);
        let mut all: Vec<usize> = specs.iter().flat_map(|s| s.class_ids.clone()).collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), total, "no class appears twice");
        prop_assert_eq!(total, base + way * sessions);
        for s in &specs[1..] {
            prop_assert_eq!(s.support.len(), way * 2);
            // Support samples carry only this session's labels.
            for &l in s.support.labels() {
                prop_assert!(s.class_ids.contains(&l));
            }
        }
        // Query counts are conserved: each class contributes its full test set.
        let total_query: usize = specs.iter().map(|s| s.query.len()).sum();
        prop_assert_eq!(total_query, total * 4);
    }

    #[test]
    fn backward_is_linear_property(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng::stream(seed, "prop-grad", 0);
        let x0 = Tensor::from_fn(vec![6], |_| rand::Rng::random_range(&mut r, -1.0..1.0));
        let grad_of = |ca: f64, cb: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.input(&x0, true);
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum(sq).unwrap();
            let l2 = tape.mean(x).unwrap();
            let s1 = tape.scale(l1, ca).unwrap();
            let s2 = tape.scale(l2, cb).unwrap();
            let loss = tape.add(s1, s2).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let joint = grad_of(a, b);
        let ga = grad_of(1.0, 0.0);
        let gb = grad_of(0.0, 1.0);
        for i in 0..6 {
            prop_assert!((joint[i] - (a * ga[i] + b * gb[i])).abs() < 1e-10);
        }
    }
}
