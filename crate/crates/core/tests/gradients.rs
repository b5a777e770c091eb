//! Finite-difference verification of every differentiable operation at
//! f64, on randomized small instances.

use fscil_core::rng;
use fscil_core::tensor::{grad_check, Tensor};
use rand::Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "grad-suite", 0);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Random values bounded away from zero, for kinked ops.
fn rand_away(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "grad-suite-away", 0);
    Tensor::from_fn(shape, |_| {
        let mag = r.random_range(0.2..1.0);
        if r.random_range(0.0..1.0) < 0.5 {
            -mag
        } else {
            mag
        }
    })
}

#[test]
fn conv2d_gradients() {
    for seed in 0..20 {
        // stride 1 pad 1
        let x = rand_t(vec![2, 2, 5, 5], -1.0, 1.0, 100 + seed);
        let w = rand_t(vec![3, 2, 3, 3], -0.7, 0.7, 200 + seed);
        let b = rand_t(vec![3], -0.3, 0.3, 300 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
                tape.mean(y)
            },
            &[x, w, b],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "conv s1p1 seed {seed}: {err}");

        // stride 2 pad 1 (downsampling path)
        let x = rand_t(vec![2, 3, 6, 6], -1.0, 1.0, 400 + seed);
        let w = rand_t(vec![4, 3, 3, 3], -0.7, 0.7, 500 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], None, 2, 1)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[x, w],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "conv s2p1 seed {seed}: {err}");

        // 1x1 stride-2 skip conv
        let x = rand_t(vec![2, 3, 6, 6], -1.0, 1.0, 600 + seed);
        let w = rand_t(vec![4, 3, 1, 1], -0.7, 0.7, 700 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], None, 2, 0)?;
                tape.mean(y)
            },
            &[x, w],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "conv 1x1 s2 seed {seed}: {err}");
    }
}

#[test]
fn linear_and_matmul_gradients() {
    for seed in 0..20 {
        let x = rand_t(vec![3, 4], -1.0, 1.0, 800 + seed);
        let w = rand_t(vec![5, 4], -1.0, 1.0, 900 + seed);
        let b = rand_t(vec![5], -1.0, 1.0, 1000 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.linear(ids[0], ids[1], Some(ids[2]))?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[x.clone(), w.clone(), b],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "linear seed {seed}: {err}");

        let a = rand_t(vec![3, 4], -1.0, 1.0, 1100 + seed);
        let bm = rand_t(vec![4, 2], -1.0, 1.0, 1200 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1], false)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[a.clone(), bm],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "matmul seed {seed}: {err}");

        let bt = rand_t(vec![2, 4], -1.0, 1.0, 1300 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1], true)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[a, bt],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "matmul_t seed {seed}: {err}");
    }
}

#[test]
fn pointwise_and_pooling_gradients() {
    for seed in 0..20 {
        let x = rand_away(vec![2, 2, 4, 4], 1400 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.relu(ids[0])?;
                tape.mean(y)
            },
            std::slice::from_ref(&x),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "relu seed {seed}: {err}");

        let err = grad_check(
            |tape, ids| {
                let y = tape.max_pool2d(ids[0], 2, 2)?;
                tape.mean(y)
            },
            std::slice::from_ref(&x),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "max_pool seed {seed}: {err}");

        let err = grad_check(
            |tape, ids| {
                let y = tape.global_avg_pool(ids[0])?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            std::slice::from_ref(&x),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "gap seed {seed}: {err}");

        let a = rand_t(vec![6], -1.0, 1.0, 1500 + seed);
        let b = rand_t(vec![6], -1.0, 1.0, 1600 + seed);
        let err = grad_check(
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?;
                let d = tape.sub(s, ids[1])?;
                let m = tape.mul(d, ids[1])?;
                let af = tape.affine(m, 1.7, -0.3)?;
                let sq = tape.mul(af, af)?;
                tape.mean(sq)
            },
            &[a, b],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "elementwise seed {seed}: {err}");
    }
}

#[test]
fn masked_blend_gradients() {
    for seed in 0..20 {
        let l1 = rand_t(vec![2, 3, 4, 4], -1.0, 1.0, 1700 + seed);
        let l2 = rand_t(vec![2, 3, 4, 4], -1.0, 1.0, 1800 + seed);
        let mut r = rng::stream(1900 + seed, "grad-suite", 0);
        let mask = Tensor::from_fn(vec![4, 4], |_| if r.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 });
        let err = grad_check(
            |tape, ids| {
                let m = tape.input(&mask, false);
                let y = tape.masked_blend(ids[0], ids[1], m)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[l1, l2],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "masked_blend seed {seed}: {err}");
    }
}

#[test]
fn normalization_and_loss_gradients() {
    for seed in 0..20 {
        let x = rand_t(vec![3, 5], 0.3, 1.3, 2000 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.l2_normalize(ids[0])?;
                let sq = tape.mul(y, y)?;
                let w = tape.affine(sq, 0.7, 0.1)?;
                tape.mean(w)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "l2_normalize seed {seed}: {err}");

        let logits = rand_t(vec![4, 3], -2.0, 2.0, 2100 + seed);
        let mut r = rng::stream(2200 + seed, "grad-suite", 0);
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
        let err = grad_check(
            |tape, ids| tape.softmax_cross_entropy(ids[0], &targets),
            &[logits],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "softmax_ce seed {seed}: {err}");

        let x = rand_t(vec![2, 4, 4, 4], -1.0, 1.0, 2300 + seed);
        let gamma = rand_t(vec![4], 0.5, 1.5, 2400 + seed);
        let beta = rand_t(vec![4], -0.3, 0.3, 2500 + seed);
        let err = grad_check(
            |tape, ids| {
                let y = tape.group_norm(ids[0], ids[1], ids[2], 2, 1e-5)?;
                let sq = tape.mul(y, y)?;
                tape.mean(sq)
            },
            &[x, gamma, beta],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "group_norm seed {seed}: {err}");
    }
}

#[test]
fn batch_statistics_gradients() {
    for seed in 0..20 {
        let z = rand_t(vec![5, 3], -1.5, 1.5, 2600 + seed);
        let err = grad_check(
            |tape, ids| {
                let v = tape.variance_per_dim(ids[0])?;
                let s = tape.sqrt_shift(v, 1e-4)?;
                tape.mean(s)
            },
            std::slice::from_ref(&z),
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "variance seed {seed}: {err}");

        let err = grad_check(
            |tape, ids| {
                let c = tape.covariance_matrix(ids[0])?;
                let sq = tape.mul(c, c)?;
                tape.mean(sq)
            },
            &[z],
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "covariance seed {seed}: {err}");
    }
}
