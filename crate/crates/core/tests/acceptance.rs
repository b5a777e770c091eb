#![allow(clippy::field_reassign_with_default)]

//! Acceptance suite: one test per release gate, each printing a PASS line
//! (run with `--nocapture` to see them). The heavy directional experiments
//! live at the end; `--test-threads=1` gives the cleanest timing readout.

use std::collections::BTreeSet;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use fscil_core::config::ExperimentConfig;
use fscil_core::data::cifar;
use fscil_core::ensemble::{
    ensemble_loss, make_cutmix_mask, weight_fn, EnsembleNet, MixParams,
    NetConfig,
};
use fscil_core::patchmix::{bowl_weights, sample_patches};
use fscil_core::protocol::{self, performance_drop, MetricRecord};
use fscil_core::rng;
use fscil_core::runner::{self, apply_toggles, Toggle};
use fscil_core::ssl::{self, SslParams, ViewTransform};
use fscil_core::tensor::{grad_check, Tape, Tensor};
use rand::Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;

fn rand_t(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "accept", 0);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Tiny two-branch f64 net for whole-model finite-difference checks.
fn micro_net(seed: u64, classes: &[usize]) -> EnsembleNet<f64> {
    let cfg = NetConfig {
        in_channels: 2,
        branch_channels: 2,
        stages: vec![4],
        group_size: 2,
        cosine_scale: 8.0,
        ensemble: true,
    };
    let mut r = rng::stream(seed, "accept-net", 0);
    EnsembleNet::new(cfg, classes, &mut r).unwrap()
}

/// Central-difference check of a scalar loss over every net parameter.
/// `loss_of(net, true)` must populate gradients; `false` is value-only.
///
/// Components whose difference quotient misses the analytic gradient get
/// re-measured at smaller epsilons: a relu/pool kink inside the stencil
/// shrinks away with epsilon, a wrong VJP does not.
fn net_grad_max_err(
    net: &mut EnsembleNet<f64>,
    loss_of: &dyn Fn(&mut EnsembleNet<f64>, bool) -> f64,
) -> f64 {
    net.params_mut().zero_grads();
    let _ = loss_of(net, true);
    let analytic: Vec<Vec<f64>> =
        net.params().iter().map(|(_, _, p)| p.grad.data().to_vec()).collect();
    let mut max_err = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let r = fscil_core::tensor::ParamRef(pi);
            let mut err = f64::INFINITY;
            for eps in [GRAD_EPS, 1e-6, 1e-7] {
                let orig = net.params().get(r).value.data()[i];
                net.params_mut().get_mut(r).value.data_mut()[i] = orig + eps;
                let plus = loss_of(net, false);
                net.params_mut().get_mut(r).value.data_mut()[i] = orig - eps;
                let minus = loss_of(net, false);
                net.params_mut().get_mut(r).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                err = (a - numeric).abs() / f64::max(1.0, a.abs());
                if err < GRAD_TOL {
                    break;
                }
            }
            max_err = max_err.max(err);
        }
    }
    max_err
}

#[test]
fn c01_gradient_suite() {
    // Per-operation checks at f64 on >= 20 random instances each.
    for seed in 0..20u64 {
        let checks: Vec<(&str, f64)> = vec![
            ("conv2d", {
                let x = rand_t(vec![2, 2, 5, 5], -1.0, 1.0, 10 + seed);
                let w = rand_t(vec![3, 2, 3, 3], -0.7, 0.7, 30 + seed);
                let b = rand_t(vec![3], -0.3, 0.3, 50 + seed);
                grad_check(
                    |t, ids| {
                        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
                        let sq = t.mul(y, y)?;
                        t.mean(sq)
                    },
                    &[x, w, b],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("linear", {
                let x = rand_t(vec![3, 4], -1.0, 1.0, 70 + seed);
                let w = rand_t(vec![2, 4], -1.0, 1.0, 90 + seed);
                let b = rand_t(vec![2], -1.0, 1.0, 110 + seed);
                grad_check(
                    |t, ids| {
                        let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
                        let sq = t.mul(y, y)?;
                        t.mean(sq)
                    },
                    &[x, w, b],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("relu_pool", {
                let mut r = rng::stream(130 + seed, "accept", 0);
                let x = Tensor::from_fn(vec![2, 2, 4, 4], |_| {
                    let m = r.random_range(0.2..1.0);
                    if r.random_range(0.0..1.0) < 0.5 {
                        -m
                    } else {
                        m
                    }
                });
                grad_check(
                    |t, ids| {
                        let a = t.relu(ids[0])?;
                        let p = t.max_pool2d(a, 2, 2)?;
                        let g = t.global_avg_pool(p)?;
                        let sq = t.mul(g, g)?;
                        t.mean(sq)
                    },
                    &[x],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("elementwise", {
                let a = rand_t(vec![6], -1.0, 1.0, 150 + seed);
                let b = rand_t(vec![6], -1.0, 1.0, 170 + seed);
                grad_check(
                    |t, ids| {
                        let s = t.add(ids[0], ids[1])?;
                        let d = t.sub(s, ids[1])?;
                        let m = t.mul(d, ids[1])?;
                        let af = t.affine(m, 1.3, 0.2)?;
                        let sq = t.mul(af, af)?;
                        t.mean(sq)
                    },
                    &[a, b],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("masked_blend", {
                let l1 = rand_t(vec![2, 2, 4, 4], -1.0, 1.0, 190 + seed);
                let l2 = rand_t(vec![2, 2, 4, 4], -1.0, 1.0, 210 + seed);
                let mut r = rng::stream(230 + seed, "accept", 0);
                let mk = Tensor::from_fn(vec![4, 4], |_| {
                    if r.random_range(0.0..1.0) < 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                });
                grad_check(
                    |t, ids| {
                        let m = t.input(&mk, false);
                        let y = t.masked_blend(ids[0], ids[1], m)?;
                        let sq = t.mul(y, y)?;
                        t.mean(sq)
                    },
                    &[l1, l2],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("softmax_ce", {
                let logits = rand_t(vec![4, 3], -2.0, 2.0, 250 + seed);
                let mut r = rng::stream(270 + seed, "accept", 0);
                let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
                grad_check(|t, ids| t.softmax_cross_entropy(ids[0], &targets), &[logits], GRAD_EPS)
                    .unwrap()
            }),
            ("l2_normalize_matmul", {
                let f = rand_t(vec![3, 4], 0.3, 1.2, 290 + seed);
                let w = rand_t(vec![2, 4], 0.3, 1.2, 310 + seed);
                grad_check(
                    |t, ids| {
                        let fy = t.l2_normalize(ids[0])?;
                        let wy = t.l2_normalize(ids[1])?;
                        let cos = t.matmul(fy, wy, true)?;
                        let sq = t.mul(cos, cos)?;
                        t.mean(sq)
                    },
                    &[f, w],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("group_norm", {
                let x = rand_t(vec![2, 4, 3, 3], -1.0, 1.0, 330 + seed);
                let g = rand_t(vec![4], 0.5, 1.5, 350 + seed);
                let b = rand_t(vec![4], -0.3, 0.3, 370 + seed);
                grad_check(
                    |t, ids| {
                        let y = t.group_norm(ids[0], ids[1], ids[2], 2, 1e-5)?;
                        let sq = t.mul(y, y)?;
                        t.mean(sq)
                    },
                    &[x, g, b],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("batch_stats", {
                let z = rand_t(vec![5, 3], -1.5, 1.5, 390 + seed);
                grad_check(
                    |t, ids| {
                        let v = t.variance_per_dim(ids[0])?;
                        let s = t.sqrt_shift(v, 1e-4)?;
                        let c = t.covariance_matrix(ids[0])?;
                        let csq = t.mul(c, c)?;
                        let mv = t.mean(s)?;
                        let mc = t.mean(csq)?;
                        t.add(mv, mc)
                    },
                    &[z],
                    GRAD_EPS,
                )
                .unwrap()
            }),
            ("ssl_loss_wrt_embeddings", {
                let z = rand_t(vec![5, 4], -1.5, 1.5, 410 + seed);
                let zp = rand_t(vec![5, 4], -1.5, 1.5, 430 + seed);
                let params = SslParams::default();
                grad_check(
                    |t, ids| ssl::ssl_loss(t, ids[0], ids[1], &params),
                    &[z, zp],
                    GRAD_EPS,
                )
                .unwrap()
            }),
        ];
        for (name, err) in checks {
            assert!(err < GRAD_TOL, "{name} seed {seed}: relative error {err}");
        }
    }

    // Whole-net checks: the two-branch training loss and the view-based
    // self-supervised loss, differentiated through every parameter.
    for seed in 0..20u64 {
        let mut net = micro_net(500 + seed, &[0, 1, 2]);
        let x1 = rand_t(vec![2, 2, 6, 6], 0.0, 1.0, 520 + seed);
        let x2 = rand_t(vec![2, 2, 6, 6], 0.0, 1.0, 540 + seed);
        let mut mr = rng::stream(560 + seed, "accept", 0);
        let mask = make_cutmix_mask(6, 6, &MixParams::default(), &mut mr).unwrap();
        let kappa = mask.kappa_eff();

        let ens_loss = move |net: &mut EnsembleNet<f64>, with_grad: bool| -> f64 {
            let mut tape = Tape::new();
            let taped = net.register(&mut tape, |_| with_grad);
            let a = tape.input(&x1, false);
            let b = tape.input(&x2, false);
            let m = tape.input(&mask.to_tensor(), false);
            let (l1, l2, _) = net.forward_train(&mut tape, &taped, a, b, m).unwrap();
            let loss = ensemble_loss(&mut tape, l1, l2, &[0, 1], &[2, 0], kappa, 3.0).unwrap();
            if with_grad {
                tape.backward(loss).unwrap();
                net.apply_grads(&tape, &taped).unwrap();
            }
            tape.scalar_value(loss)
        };
        let err = net_grad_max_err(&mut net, &ens_loss);
        assert!(err < GRAD_TOL, "ensemble loss net check seed {seed}: {err}");
    }

    for seed in 0..20u64 {
        let mut net = micro_net(600 + seed, &[0, 1]);
        let x1 = rand_t(vec![3, 2, 6, 6], 0.0, 1.0, 620 + seed);
        let x2 = rand_t(vec![3, 2, 6, 6], 0.0, 1.0, 640 + seed);
        let mut mr = rng::stream(660 + seed, "accept", 0);
        let mask = make_cutmix_mask(6, 6, &MixParams::default(), &mut mr).unwrap();
        let params = SslParams::default();

        // Heads are not on the self-supervision path, so they are left
        // out of the gradient targets.
        let ssl_net_loss = move |net: &mut EnsembleNet<f64>, with_grad: bool| -> f64 {
            let mut tape = Tape::new();
            let taped =
                net.register(&mut tape, |n| with_grad && !EnsembleNet::<f64>::is_head_param(n));
            let (z, zp) = ssl::build_views(
                &mut tape,
                net,
                &taped,
                &x1,
                &x2,
                &mask,
                ViewTransform::Rot90,
                ViewTransform::HFlip,
            )
            .unwrap();
            let loss = ssl::ssl_loss(&mut tape, z, zp, &params).unwrap();
            if with_grad {
                tape.backward(loss).unwrap();
                net.apply_grads(&tape, &taped).unwrap();
            }
            tape.scalar_value(loss)
        };
        let err = net_grad_max_err(&mut net, &ssl_net_loss);
        assert!(err < GRAD_TOL, "ssl loss net check seed {seed}: {err}");
    }
    println!("[PASS] criterion 1: gradient suite < {GRAD_TOL} relative error");
}

#[test]
fn c02_mixing_algebra_suite() {
    // mix(l, l, m) = 2l for 100 random masks.
    let mut mr = rng::stream(9, "accept-c2", 0);
    for i in 0..100 {
        let mask = make_cutmix_mask(5, 7, &MixParams::default(), &mut mr).unwrap();
        let l = rand_t(vec![2, 3, 5, 7], -2.0, 2.0, 700 + i);
        let mut tape = Tape::new();
        let a = tape.input(&l, false);
        let b = tape.input(&l, false);
        let m = tape.input(&mask.to_tensor(), false);
        let out = tape.masked_blend(a, b, m).unwrap();
        for (o, v) in tape.value(out).iter().zip(l.data()) {
            assert_eq!(*o, 2.0 * v, "mask {i}");
        }
    }
    // Reweighting identities on a 1000-point grid.
    for r in [1.0, 2.0, 3.0, 6.0] {
        for i in 0..=1000 {
            let k = i as f64 / 1000.0;
            let s = weight_fn(k, r) + weight_fn(1.0 - k, r);
            assert!((s - 2.0).abs() < 1e-12, "r={r} k={k}: sum {s}");
        }
    }
    assert_eq!(weight_fn(0.5, 1.0), 1.0);
    assert_eq!(weight_fn(0.5, 3.0), 1.0);
    println!("[PASS] criterion 2: mixing and reweighting algebra");
}

#[test]
fn c03_bowl_sampler_suite() {
    // n = 3 weights: centre 0, edges 1/12, corners 1/6 to 1e-12.
    let grid = bowl_weights(3, 0.5).unwrap();
    let expect = [
        1.0 / 6.0,
        1.0 / 12.0,
        1.0 / 6.0,
        1.0 / 12.0,
        0.0,
        1.0 / 12.0,
        1.0 / 6.0,
        1.0 / 12.0,
        1.0 / 6.0,
    ];
    for (w, e) in grid.weights().iter().zip(expect) {
        assert!((w - e).abs() < 1e-12, "{w} vs {e}");
    }

    // 1e5 single-cell draws: centre never sampled; chi-squared GOF at
    // p > 0.01 over the 8 positive cells.
    let mut r = rng::stream(12, "accept-c3", 0);
    let mut counts = [0usize; 9];
    const DRAWS: usize = 100_000;
    for _ in 0..DRAWS {
        let cells = sample_patches(&grid, 1, 1, &mut r).unwrap();
        counts[cells[0]] += 1;
    }
    assert_eq!(counts[4], 0, "centre cell was sampled");
    let mut stat = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let e = grid.weights()[i] * DRAWS as f64;
        if e > 0.0 {
            stat += (c as f64 - e).powi(2) / e;
        }
    }
    let critical = ChiSquared::new(7.0).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "chi-squared {stat:.3} >= {critical:.3} (p <= 0.01)");

    // Empirical corner frequency ~ 1/6 within +-0.01.
    let corner_freq = counts[0] as f64 / DRAWS as f64;
    assert!((corner_freq - 1.0 / 6.0).abs() < 0.01, "corner frequency {corner_freq}");
    println!("[PASS] criterion 3: bowl sampler (chi-squared {stat:.2} < {critical:.2})");
}

#[test]
fn c04_ssl_identity_suite() {
    // Identical transforms give bitwise-identical views.
    let net = micro_net(77, &[0, 1]);
    let x1 = rand_t(vec![3, 2, 6, 6], 0.0, 1.0, 800);
    let x2 = rand_t(vec![3, 2, 6, 6], 0.0, 1.0, 801);
    let mut mr = rng::stream(802, "accept-c4", 0);
    let mask = make_cutmix_mask(6, 6, &MixParams::default(), &mut mr).unwrap();
    for t in ViewTransform::ALL {
        let mut tape = Tape::new();
        let taped = net.register(&mut tape, |_| false);
        let (z, zp) = ssl::build_views(&mut tape, &net, &taped, &x1, &x2, &mask, t, t).unwrap();
        assert_eq!(tape.value(z), tape.value(zp), "views differ under {t:?}");
        let inv = ssl::invariance_term(&mut tape, z, zp).unwrap();
        assert_eq!(tape.scalar_value(inv), 0.0, "invariance not bitwise zero under {t:?}");
    }

    // Unit-std uncorrelated equal views score (near) zero.
    let z_data = vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0];
    let mut tape = Tape::<f64>::new();
    let z = tape.input(&Tensor::new(vec![4, 2], z_data.clone()).unwrap(), false);
    let zp = tape.input(&Tensor::new(vec![4, 2], z_data).unwrap(), false);
    let loss = ssl::ssl_loss(&mut tape, z, zp, &SslParams::default()).unwrap();
    assert!(tape.scalar_value(loss).abs() < 1e-3, "ideal views score {}", tape.scalar_value(loss));

    // Covariance of a duplicated dimension equals the squared sample
    // variance: column [0, 2] has v = 2, so the term is 4.
    let dup = tape.input(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap(), false);
    let c = ssl::covariance_term(&mut tape, dup).unwrap();
    assert!((tape.scalar_value(c) - 4.0).abs() < 1e-12);
    println!("[PASS] criterion 4: self-supervision identities");
}

/// Fast protocol config: 2-way 2-shot sessions as the gate demands;
/// structure checks need determinism, not accuracy.
fn protocol_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 2024;
    cfg.split.shot = 2;
    cfg.train.base_epochs = 6;
    cfg.train.incremental_epochs = 3;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn c05_protocol_suite() {
    let cfg = protocol_cfg();
    let data = runner::prepare_data(&cfg).unwrap();
    let mut state = protocol::run_base_session(&data.specs[0], &cfg).unwrap();
    assert_eq!(state.seen_classes.len(), 6);
    assert_eq!(state.buffer.capacity(), 30);
    assert_eq!(state.buffer.occupancy(), 30);

    let fingerprint = state.net.backbone_fingerprint();
    protocol::run_incremental_session(&mut state, &data.specs[1], &cfg).unwrap();
    assert_eq!(state.seen_classes.len(), 8);
    assert_eq!(state.buffer.capacity(), 40);
    // Few-shot classes contribute min(m, shot) = 2 exemplars each.
    assert_eq!(state.buffer.occupancy(), 34);
    assert_eq!(state.net.backbone_fingerprint(), fingerprint, "backbone changed in session 1");

    protocol::run_incremental_session(&mut state, &data.specs[2], &cfg).unwrap();
    assert_eq!(state.seen_classes.len(), 10);
    assert_eq!(state.buffer.capacity(), 50);
    assert_eq!(state.buffer.occupancy(), 38);
    assert_eq!(state.net.backbone_fingerprint(), fingerprint, "backbone changed in session 2");

    // A full run with a fixed master seed reproduces the CSV bitwise.
    let a = runner::run_experiment(&cfg, None).unwrap();
    let b = runner::run_experiment(&cfg, None).unwrap();
    assert_eq!(a.csv, b.csv, "repeated runs disagree");
    assert_eq!(a.csv.lines().count(), 4);
    println!("[PASS] criterion 5: protocol structure, frozen backbone, bitwise repetition");
}

/// The desk-scale benchmark: the default config with the task (data +
/// split) pinned so seeds vary only the training randomness.
fn benchmark_cfg(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.dataset.seed = Some(1);
    cfg.split.seed = Some(1);
    cfg.validate().unwrap();
    cfg
}

#[test]
fn c06_directional_ablation() {
    let seeds = [101u64, 102, 103, 104, 105];
    let cells: [&[(Toggle, bool)]; 3] = [
        &[(Toggle::Ensemble, false), (Toggle::Ssl, false), (Toggle::Augmentation, false)],
        &[(Toggle::Ensemble, true), (Toggle::Ssl, false), (Toggle::Augmentation, false)],
        &[(Toggle::Ensemble, true), (Toggle::Ssl, true), (Toggle::Augmentation, true)],
    ];
    let mut mean_top1 = [0.0f64; 3];
    let mut mean_pd = [0.0f64; 3];
    for &seed in &seeds {
        for (i, assignment) in cells.iter().enumerate() {
            let cfg = apply_toggles(&benchmark_cfg(seed), assignment);
            let out = runner::run_experiment(&cfg, None).unwrap();
            mean_top1[i] += out.state.history.last().unwrap().top1 / seeds.len() as f64;
            mean_pd[i] += performance_drop(&out.state.history).unwrap() / seeds.len() as f64;
        }
    }
    let [baseline, ens_only, full] = mean_top1;
    println!(
        "ablation means over {} seeds: baseline {:.4} (pd {:.2}), ens {:.4} (pd {:.2}), full {:.4} (pd {:.2})",
        seeds.len(),
        baseline,
        mean_pd[0],
        ens_only,
        mean_pd[1],
        full,
        mean_pd[2]
    );
    assert!(
        full + 1e-12 >= ens_only,
        "full method ({full:.4}) below ensemble-only ({ens_only:.4})"
    );
    assert!(
        ens_only >= baseline + 0.02,
        "ensemble-only ({ens_only:.4}) does not beat baseline ({baseline:.4}) by 2 points"
    );
    assert!(
        mean_pd[2] <= mean_pd[0] + 1e-12,
        "full method PD ({:.2}) above baseline PD ({:.2})",
        mean_pd[2],
        mean_pd[0]
    );
    println!("[PASS] criterion 6: directional ablation ordering");
}

#[test]
fn c07_overfitting_probe() {
    // Few-shot: 10-way 5-shot from scratch; full: the complete train set.
    // Gap = train accuracy - test accuracy after the base session.
    let gap_of = |ensemble: bool, few_shot: bool| -> f64 {
        let mut cfg = benchmark_cfg(301);
        cfg.mix.enabled = ensemble;
        cfg.ssl.sessions = fscil_core::config::SslSessions::None;
        cfg.patchmix.mode = fscil_core::patchmix::SamplingMode::Off;
        cfg.split.base_classes = 10;
        cfg.split.sessions = 0;
        cfg.validate().unwrap();
        let data = runner::prepare_data(&cfg).unwrap();
        let mut spec = data.specs[0].clone();
        if few_shot {
            // 5 support samples per class, drawn deterministically.
            let mut indices = Vec::new();
            for c in 0..10 {
                indices.extend(spec.support.indices_of_class(c).into_iter().take(5));
            }
            spec.support = spec.support.subset(&indices);
        }
        let state = protocol::run_base_session(&spec, &cfg).unwrap();
        let (train_acc, test_acc) =
            protocol::overfit_gap_probe(&state.net, &spec.support, &spec.query).unwrap();
        println!(
            "probe ens={ensemble} few_shot={few_shot}: train {train_acc:.4} test {test_acc:.4}"
        );
        train_acc - test_acc
    };

    let base_full = gap_of(false, false);
    let base_few = gap_of(false, true);
    let ens_full = gap_of(true, false);
    let ens_few = gap_of(true, true);
    println!(
        "gaps: baseline full {base_full:.4} few {base_few:.4}; ensemble full {ens_full:.4} few {ens_few:.4}"
    );
    assert!(
        base_few >= base_full + 0.15,
        "baseline few-shot gap {base_few:.4} not 15 points above full {base_full:.4}"
    );
    assert!(
        ens_few >= ens_full + 0.15,
        "ensemble few-shot gap {ens_few:.4} not 15 points above full {ens_full:.4}"
    );
    assert!(
        ens_few < base_few,
        "ensemble few-shot gap {ens_few:.4} not below baseline {base_few:.4}"
    );
    println!("[PASS] criterion 7: overfitting gap probe");
}

#[test]
fn c08_performance_drop_arithmetic() {
    let table1 = [81.28, 74.29, 70.07, 66.51, 63.80, 61.40, 57.99, 57.04, 56.53];
    let table2 = [76.60, 71.57, 66.89, 62.63, 60.22, 57.48, 55.22, 53.16, 50.89];
    let as_history = |accs: &[f64]| -> Vec<MetricRecord> {
        accs.iter()
            .enumerate()
            .map(|(i, &a)| MetricRecord::from_splits(i, a / 100.0, a / 100.0, None))
            .collect()
    };
    let pd1 = performance_drop(&as_history(&table1)).unwrap();
    let pd2 = performance_drop(&as_history(&table2)).unwrap();
    assert!((pd1 - 24.75).abs() < 1e-9, "pd1 {pd1}");
    assert!((pd2 - 25.71).abs() < 1e-9, "pd2 {pd2}");
    println!("[PASS] criterion 8: published-session PD arithmetic ({pd1:.2}, {pd2:.2})");
}

#[test]
fn c09_inference_parity() {
    let cfg = ExperimentConfig::default();
    let mut r = rng::stream(55, "accept-c9", 0);
    let classes: Vec<usize> = (0..cfg.dataset.classes).collect();
    let net = EnsembleNet::<f32>::new(cfg.net_config(), &classes, &mut r).unwrap();

    // Static parameter accounting.
    let total = net.param_count();
    let extra = net.branch_specific_param_count();
    let share = extra as f64 / total as f64;
    assert!(share < 0.05, "branch-specific share {share:.4} >= 5%");

    // Wall-clock parity over >= 10 repetitions.
    let report = runner::bench_inference(&net, cfg.dataset.side, 32, 20).unwrap();
    println!(
        "inference: two-branch {:.3} ms, single {:.3} ms, ratio {:.4}, extra params {:.2}%",
        report.ensemble_ms,
        report.single_ms,
        report.ratio,
        share * 100.0
    );
    assert!(report.ratio < 1.15, "two-branch/single ratio {:.4} >= 1.15", report.ratio);
    println!("[PASS] criterion 9: inference cost parity");
}

#[test]
fn c10_cifar_loader() {
    // Three-record fixture with varied pixels, coarse byte zero so the
    // round trip is bitwise over the whole file.
    let mut fixture = Vec::new();
    for rec in 0..3u32 {
        fixture.push(0u8);
        fixture.push((rec * 7 + 1) as u8);
        for i in 0..3072u32 {
            fixture.push(((i * 31 + rec * 131) % 256) as u8);
        }
    }
    let set = cifar::parse_records::<f32>(&fixture).unwrap();
    assert_eq!(set.len(), 3);
    let re = cifar::encode_records(&set).unwrap();
    assert_eq!(re, fixture, "round trip not bitwise");

    // Truncation mid-record reports the offset of the broken record.
    let cut = &fixture[..cifar::RECORD_BYTES * 2 + 17];
    let err = cifar::parse_records::<f32>(cut).unwrap_err().to_string();
    let offset = (cifar::RECORD_BYTES * 2).to_string();
    assert!(err.contains(&offset), "error `{err}` lacks offset {offset}");
    println!("[PASS] criterion 10: CIFAR-100 loader");
}

#[test]
fn ssl_and_patchmix_off_reduce_to_pure_mixing_loss() {
    // Config degeneracy: gamma = 0 plus PatchMix off matches an
    // SSL-disabled run bitwise, epoch by epoch.
    let mut a = protocol_cfg();
    a.ssl.gamma = 0.0;
    a.patchmix.mode = fscil_core::patchmix::SamplingMode::Off;
    let mut b = protocol_cfg();
    b.ssl.sessions = fscil_core::config::SslSessions::None;
    b.patchmix.mode = fscil_core::patchmix::SamplingMode::Off;
    let data = runner::prepare_data(&a).unwrap();
    let sa = protocol::run_base_session(&data.specs[0], &a).unwrap();
    let sb = protocol::run_base_session(&data.specs[0], &b).unwrap();
    assert_eq!(sa.loss_traces, sb.loss_traces);
}

#[test]
fn evaluation_is_cumulative_and_conserved() {
    let cfg = protocol_cfg();
    let data = runner::prepare_data(&cfg).unwrap();
    let total_queries: usize = data.specs.iter().map(|s| s.query.len()).sum();
    assert_eq!(total_queries, 10 * cfg.dataset.test_per_class);
    let classes: BTreeSet<usize> = data.specs.iter().flat_map(|s| s.class_ids.clone()).collect();
    assert_eq!(classes.len(), 10);
}
