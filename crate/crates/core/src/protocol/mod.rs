//! The incremental-learning engine: base training, few-shot session
//! fine-tuning with replay, classifier expansion and cumulative evaluation.

pub mod exemplar;
pub mod metrics;

pub use exemplar::{select_exemplars, ReplayBuffer};
pub use metrics::{history_to_csv, performance_drop, MetricRecord};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::data::{LabeledImageSet, SessionSpec};
use crate::ensemble::{ensemble_loss, make_cutmix_mask, EnsembleNet};
use crate::error::{Error, Result};
use crate::patchmix::Augmenter;
use crate::rng::{self, purpose};
use crate::ssl::{self, ViewScope, ViewTransform};
use crate::tensor::{LrSchedule, Scalar, SgdState, Tape, Tensor};

const EVAL_BATCH: usize = 64;
const EXPAND_DRAWS: usize = 2;

/// Everything carried across sessions: the model, the replay buffer, the
/// class registry and the metric history.
pub struct SessionState<T> {
    pub net: EnsembleNet<T>,
    pub buffer: ReplayBuffer<T>,
    pub seen_classes: Vec<usize>,
    pub base_classes: Vec<usize>,
    pub history: Vec<MetricRecord>,
    /// Query sets of completed sessions, in order; evaluation is cumulative
    /// over this list.
    pub queries: Vec<LabeledImageSet<T>>,
    /// Per-session, per-epoch mean training loss.
    pub loss_traces: Vec<Vec<f64>>,
}

enum TrainRegime {
    Full,
    HeadsOnly,
    HeadsAndSlowBackbone { backbone_lr: f64 },
}

fn row_lookup<T: Scalar>(net: &EnsembleNet<T>, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            net.classes().iter().position(|&c| c == l).ok_or(Error::InvalidLabel {
                label: l,
                classes: net.classes().len(),
            })
        })
        .collect()
}

fn gather_augmented<T: Scalar>(
    pool: &LabeledImageSet<T>,
    indices: &[usize],
    bank: &[Tensor<T>],
    augmenter: &mut Augmenter,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    let side = pool.side();
    let ch = pool.channels();
    let mut data = Vec::with_capacity(indices.len() * ch * side * side);
    for &i in indices {
        let img = pool.image(i);
        let aug = augmenter.maybe_augment(&img, bank, rng)?;
        data.extend_from_slice(aug.data());
    }
    Tensor::new(vec![indices.len(), ch, side, side], data)
}

/// Train the net on a sample pool for `epochs` epochs. Returns the
/// per-epoch mean loss. All randomness comes from streams derived off
/// `(cfg.seed, session)`, so component toggles never perturb each other.
#[allow(clippy::too_many_arguments)]
fn train_on_pool<T: Scalar>(
    net: &mut EnsembleNet<T>,
    pool: &LabeledImageSet<T>,
    bank: &[Tensor<T>],
    cfg: &ExperimentConfig,
    session: usize,
    epochs: usize,
    schedule: &LrSchedule,
    regime: TrainRegime,
) -> Result<Vec<f64>> {
    let mut sampling_rng = rng::stream(cfg.seed, purpose::SAMPLING, session as u64);
    let mut mask_rng = rng::stream(cfg.seed, purpose::MASK, session as u64);
    let mut patch_rng = rng::stream(cfg.seed, purpose::PATCHMIX, session as u64);
    let mut ssl_rng = rng::stream(cfg.seed, purpose::SSL_TRANSFORM, session as u64);
    let mut augmenter = Augmenter::new(cfg.patchmix)?;

    let ensemble = net.is_ensemble();
    let ssl_active = cfg.ssl_active(session);
    let ssl_params = cfg.ssl_params();
    let mix = cfg.mix_params();
    let side = pool.side();

    let trainable: Box<dyn Fn(&str) -> bool> = match regime {
        TrainRegime::Full | TrainRegime::HeadsAndSlowBackbone { .. } => Box::new(|_| true),
        TrainRegime::HeadsOnly => Box::new(EnsembleNet::<T>::is_head_param),
    };
    let mut head_opt = SgdState::new(net.params(), cfg.sgd_config(), EnsembleNet::<T>::is_head_param)?;
    let mut body_opt = match regime {
        TrainRegime::HeadsOnly => None,
        _ => Some(SgdState::new(net.params(), cfg.sgd_config(), |n| {
            !EnsembleNet::<T>::is_head_param(n)
        })?),
    };
    let body_lr = |lr: f64| match regime {
        TrainRegime::Full => lr,
        TrainRegime::HeadsAndSlowBackbone { backbone_lr } => backbone_lr,
        TrainRegime::HeadsOnly => 0.0,
    };

    let n = pool.len();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = schedule.lr_at(epoch, epochs);
        let mut order1: Vec<usize> = (0..n).collect();
        order1.shuffle(&mut sampling_rng);
        let order2: Vec<usize> = if ensemble {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut sampling_rng);
            o
        } else {
            order1.clone()
        };

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + cfg.optim.batch_size).min(n);
            if end - start < 2 {
                break; // a lone sample cannot feed the batch statistics
            }
            let idx1 = &order1[start..end];
            let idx2 = &order2[start..end];
            start = end;

            let x1 = gather_augmented(pool, idx1, bank, &mut augmenter, &mut patch_rng)?;
            let rows1 = row_lookup(net, &idx1.iter().map(|&i| pool.label(i)).collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let taped = net.register(&mut tape, &trainable);
            let loss = if ensemble {
                let x2 = gather_augmented(pool, idx2, bank, &mut augmenter, &mut patch_rng)?;
                let rows2 =
                    row_lookup(net, &idx2.iter().map(|&i| pool.label(i)).collect::<Vec<_>>())?;
                let mask = make_cutmix_mask(side, side, &mix, &mut mask_rng)?;
                let x1n = tape.input(&x1, false);
                let x2n = tape.input(&x2, false);
                let mn = tape.input(&mask.to_tensor(), false);
                let (logits1, logits2, _) = net.forward_train(&mut tape, &taped, x1n, x2n, mn)?;
                let ens =
                    ensemble_loss(&mut tape, logits1, logits2, &rows1, &rows2, mask.kappa_eff(), mix.r)?;
                if ssl_active {
                    let (z, zp) = match cfg.ssl.scope {
                        ViewScope::Batch => {
                            let t = ViewTransform::sample(&mut ssl_rng);
                            let tp = ViewTransform::sample(&mut ssl_rng);
                            ssl::build_views(&mut tape, net, &taped, &x1, &x2, &mask, t, tp)?
                        }
                        ViewScope::Image => {
                            let ts: Vec<_> =
                                (0..idx1.len()).map(|_| ViewTransform::sample(&mut ssl_rng)).collect();
                            let tps: Vec<_> =
                                (0..idx1.len()).map(|_| ViewTransform::sample(&mut ssl_rng)).collect();
                            ssl::build_views_per_image(
                                &mut tape, net, &taped, &x1, &x2, &mask, &ts, &tps,
                            )?
                        }
                    };
                    let s = ssl::ssl_loss(&mut tape, z, zp, &ssl_params)?;
                    let scaled = tape.scale(s, ssl_params.gamma)?;
                    tape.add(ens, scaled)?
                } else {
                    ens
                }
            } else {
                let x1n = tape.input(&x1, false);
                let (logits, _) = net.forward_single_train(&mut tape, &taped, x1n)?;
                let ce = tape.softmax_cross_entropy(logits, &rows1)?;
                if ssl_active {
                    let (t, tp) = (ViewTransform::sample(&mut ssl_rng), ViewTransform::sample(&mut ssl_rng));
                    let (z, zp) = ssl::build_views_single(&mut tape, net, &taped, &x1, t, tp)?;
                    let s = ssl::ssl_loss(&mut tape, z, zp, &ssl_params)?;
                    let scaled = tape.scale(s, ssl_params.gamma)?;
                    tape.add(ce, scaled)?
                } else {
                    ce
                }
            };

            tape.backward(loss)?;
            net.apply_grads(&tape, &taped)?;
            head_opt.step(net.params_mut(), lr)?;
            if let Some(opt) = body_opt.as_mut() {
                opt.step(net.params_mut(), body_lr(lr))?;
            }
            net.renormalize_heads();
            epoch_loss += tape.scalar_value(loss).as_f64();
            batches += 1;
        }
        trace.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    Ok(trace)
}

fn features_as_rows<T: Scalar>(net: &EnsembleNet<T>, batch: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let feats = net.features(batch)?;
    let dim = net.feature_dim();
    Ok((0..batch.shape()[0])
        .map(|i| feats.data()[i * dim..(i + 1) * dim].iter().map(|v| v.as_f64()).collect())
        .collect())
}

fn pick_exemplars_for_class<T: Scalar>(
    net: &EnsembleNet<T>,
    set: &LabeledImageSet<T>,
    class: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor<T>>> {
    let indices = set.indices_of_class(class);
    if indices.is_empty() {
        return Err(Error::arg(format!("no samples available for class {class}")));
    }
    let features = features_as_rows(net, &set.batch(&indices))?;
    let picked = select_exemplars(&features, m, rng)?;
    Ok(picked.into_iter().map(|p| set.image(indices[p])).collect())
}

/// Initialise head rows for new classes from the frozen net: the
/// L2-normalised mean feature of `n_init` randomly drawn support samples
/// per class (first sample's normalised feature if the mean degenerates
/// to zero).
pub fn expand_classifier<T: Scalar>(
    net: &mut EnsembleNet<T>,
    new_classes: &[usize],
    support: &LabeledImageSet<T>,
    n_init: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for &class in new_classes {
        if net.classes().contains(&class) {
            return Err(Error::arg(format!("class {class} already present in classifier")));
        }
        let mut indices = support.indices_of_class(class);
        if indices.len() < n_init {
            return Err(Error::arg(format!(
                "class {class}: {} support samples, need {} for head init",
                indices.len(),
                n_init
            )));
        }
        let mut drawn = Vec::with_capacity(n_init);
        for _ in 0..n_init {
            drawn.push(indices.remove(rng.random_range(0..indices.len())));
        }
        let feats = features_as_rows(net, &support.batch(&drawn))?;
        let dim = net.feature_dim();
        let mut mean = vec![0.0f64; dim];
        for f in &feats {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v / n_init as f64;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        let row: Vec<f64> = if norm > 1e-12 {
            mean.iter().map(|v| v / norm).collect()
        } else {
            let first = &feats[0];
            let n0 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n0 <= 1e-12 {
                return Err(Error::arg(format!("class {class}: degenerate zero features")));
            }
            first.iter().map(|v| v / n0).collect()
        };
        let row_t: Vec<T> = row.iter().map(|&v| T::from_f64(v)).collect();
        net.add_class_row(class, &row_t)?;
    }
    Ok(())
}

/// Top-1 accuracy of the net over a labelled set, evaluated in fixed-size
/// batches.
pub fn accuracy<T: Scalar>(net: &EnsembleNet<T>, set: &LabeledImageSet<T>) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::arg("accuracy: empty evaluation set"));
    }
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let preds = net.predict_labels(&set.batch(chunk))?;
        for (&i, &p) in chunk.iter().zip(&preds) {
            if p == set.label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Evaluate on the union of all completed sessions' queries: cumulative
/// top-1, base/new class accuracy, harmonic mean and mean accuracy.
pub fn evaluate<T: Scalar>(
    net: &EnsembleNet<T>,
    queries: &[LabeledImageSet<T>],
    base_classes: &[usize],
    session: usize,
) -> Result<MetricRecord> {
    let known: BTreeSet<usize> = net.classes().iter().copied().collect();
    let base: BTreeSet<usize> = base_classes.iter().copied().collect();
    let mut total = 0usize;
    let mut correct = 0usize;
    let mut base_total = 0usize;
    let mut base_correct = 0usize;
    let mut new_total = 0usize;
    let mut new_correct = 0usize;
    for set in queries {
        if let Some(&bad) = set.labels().iter().find(|l| !known.contains(l)) {
            return Err(Error::InvalidLabel { label: bad, classes: known.len() });
        }
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(EVAL_BATCH) {
            let preds = net.predict_labels(&set.batch(chunk))?;
            for (&i, &p) in chunk.iter().zip(&preds) {
                let label = set.label(i);
                let ok = p == label;
                total += 1;
                correct += ok as usize;
                if base.contains(&label) {
                    base_total += 1;
                    base_correct += ok as usize;
                } else {
                    new_total += 1;
                    new_correct += ok as usize;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::arg("evaluate: no query samples"));
    }
    let top1 = correct as f64 / total as f64;
    let base_acc = if base_total > 0 { base_correct as f64 / base_total as f64 } else { 0.0 };
    let new_acc = (new_total > 0).then(|| new_correct as f64 / new_total as f64);
    Ok(MetricRecord::from_splits(session, top1, base_acc, new_acc))
}

/// Train the base session: full-network training on the base classes with
/// the mixed-branch objective (plus self-supervision and PatchMix when
/// enabled), then fill the replay buffer and record the first metrics row.
pub fn run_base_session<T: Scalar>(
    spec: &SessionSpec<T>,
    cfg: &ExperimentConfig,
) -> Result<SessionState<T>> {
    if spec.index != 0 {
        return Err(Error::arg(format!("base session expects index 0, got {}", spec.index)));
    }
    if spec.support.is_empty() || spec.class_ids.is_empty() {
        return Err(Error::arg("base session: empty support set"));
    }
    let mut init_rng = rng::stream(cfg.seed, purpose::INIT, 0);
    let mut net = EnsembleNet::new(cfg.net_config(), &spec.class_ids, &mut init_rng)?;

    // The base session draws augmentation backgrounds from its own pool.
    let bank = spec.support.to_image_vec();
    let trace = train_on_pool(
        &mut net,
        &spec.support,
        &bank,
        cfg,
        0,
        cfg.train.base_epochs,
        &cfg.lr_schedule(),
        TrainRegime::Full,
    )?;

    let mut buffer = ReplayBuffer::new(cfg.replay_per_class);
    let mut ex_rng = rng::stream(cfg.seed, purpose::EXEMPLAR, 0);
    for &class in &spec.class_ids {
        let exemplars =
            pick_exemplars_for_class(&net, &spec.support, class, cfg.replay_per_class, &mut ex_rng)?;
        buffer.add_class(class, exemplars)?;
    }

    let queries = vec![spec.query.clone()];
    let record = evaluate(&net, &queries, &spec.class_ids, 0)?;
    Ok(SessionState {
        net,
        buffer,
        seen_classes: spec.class_ids.clone(),
        base_classes: spec.class_ids.clone(),
        history: vec![record],
        queries,
        loss_traces: vec![trace],
    })
}

/// Run one few-shot incremental session: expand the classifier with
/// prototype rows, fine-tune on support plus replay (backbone frozen, or
/// at a reduced learning rate when configured), update the buffer with the
/// new classes and evaluate cumulatively.
pub fn run_incremental_session<T: Scalar>(
    state: &mut SessionState<T>,
    spec: &SessionSpec<T>,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let session = state.history.len();
    if spec.index != session {
        return Err(Error::arg(format!(
            "session index {} does not follow {} completed sessions",
            spec.index, session
        )));
    }
    if let Some(overlap) = spec.class_ids.iter().find(|c| state.seen_classes.contains(c)) {
        return Err(Error::arg(format!("class {overlap} overlaps an earlier session")));
    }

    let mut expand_rng = rng::stream(cfg.seed, purpose::EXPAND, session as u64);
    let n_init = EXPAND_DRAWS.min(cfg.split.shot);
    expand_classifier(&mut state.net, &spec.class_ids, &spec.support, n_init, &mut expand_rng)?;

    // Training pool: oversampled support plus every stored exemplar.
    let mut sets: Vec<&LabeledImageSet<T>> = Vec::new();
    for _ in 0..cfg.train.support_oversample {
        sets.push(&spec.support);
    }
    let buffer_set = buffer_as_set(&state.buffer, spec.support.num_classes().max(
        state.seen_classes.iter().chain(spec.class_ids.iter()).max().map_or(0, |&m| m + 1),
    ))?;
    sets.push(&buffer_set);
    let pool = LabeledImageSet::concat(&sets)?;

    let bank = state.buffer.images_of(|c| state.base_classes.contains(&c));
    let regime = if cfg.train.backbone_lr > 0.0 {
        TrainRegime::HeadsAndSlowBackbone { backbone_lr: cfg.train.backbone_lr }
    } else {
        TrainRegime::HeadsOnly
    };
    let trace = train_on_pool(
        &mut state.net,
        &pool,
        &bank,
        cfg,
        session,
        cfg.train.incremental_epochs,
        &LrSchedule::constant(cfg.train.incremental_lr),
        regime,
    )?;
    state.loss_traces.push(trace);

    let mut ex_rng = rng::stream(cfg.seed, purpose::EXEMPLAR, session as u64);
    for &class in &spec.class_ids {
        let m = cfg.replay_per_class.min(spec.support.indices_of_class(class).len());
        let exemplars = pick_exemplars_for_class(&state.net, &spec.support, class, m, &mut ex_rng)?;
        state.buffer.add_class(class, exemplars)?;
    }
    state.seen_classes.extend_from_slice(&spec.class_ids);
    state.queries.push(spec.query.clone());
    let record = evaluate(&state.net, &state.queries, &state.base_classes, session)?;
    state.history.push(record);
    Ok(())
}

fn buffer_as_set<T: Scalar>(buffer: &ReplayBuffer<T>, num_classes: usize) -> Result<LabeledImageSet<T>> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dims: Option<Vec<usize>> = None;
    for (class, img) in buffer.iter() {
        if dims.is_none() {
            dims = Some(img.shape().to_vec());
        }
        data.extend_from_slice(img.data());
        labels.push(class);
    }
    let dims = dims.ok_or_else(|| Error::arg("replay buffer is empty"))?;
    let n = labels.len();
    LabeledImageSet::new(
        Tensor::new(vec![n, dims[0], dims[1], dims[2]], data)?,
        labels,
        num_classes,
    )
}

/// Train/test accuracy pair for the overfitting-gap experiment. The probe
/// only reports; it never asserts an ordering.
pub fn overfit_gap_probe<T: Scalar>(
    net: &EnsembleNet<T>,
    train: &LabeledImageSet<T>,
    test: &LabeledImageSet<T>,
) -> Result<(f64, f64)> {
    Ok((accuracy(net, train)?, accuracy(net, test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::data::{split_sessions, SplitPlan};

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.classes = 5;
        cfg.dataset.train_per_class = 8;
        cfg.dataset.test_per_class = 4;
        cfg.dataset.side = 8;
        cfg.split.base_classes = 3;
        cfg.split.way = 1;
        cfg.split.shot = 2;
        cfg.split.sessions = 2;
        cfg.backbone.branch_channels = 4;
        cfg.backbone.stages = vec![8];
        cfg.backbone.group_size = 4;
        cfg.optim.batch_size = 8;
        cfg.train.base_epochs = 2;
        cfg.train.incremental_epochs = 1;
        cfg.patchmix.n = 2;
        cfg.patchmix.k_min = 1;
        cfg.patchmix.k_max = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_run(cfg: &ExperimentConfig) -> (SessionState<f32>, Vec<crate::data::SessionSpec<f32>>) {
        let spec = cfg.synthetic_spec();
        let train = generate_synthetic::<f32>(&spec, cfg.seed, "train").unwrap();
        let test_spec = SyntheticSpec { per_class: cfg.dataset.test_per_class, ..spec };
        let test = generate_synthetic::<f32>(&test_spec, cfg.seed, "test").unwrap();
        let plan = SplitPlan::with_shuffled_order(
            cfg.split.base_classes,
            cfg.split.way,
            cfg.split.shot,
            cfg.split.sessions,
            cfg.dataset.classes,
            cfg.seed,
        );
        let specs = split_sessions(&train, &test, &plan).unwrap();
        let state = run_base_session(&specs[0], cfg).unwrap();
        (state, specs)
    }

    #[test]
    fn base_session_fills_buffer_and_metrics() {
        let cfg = tiny_cfg();
        let (state, _) = tiny_run(&cfg);
        assert_eq!(state.buffer.num_classes(), 3);
        assert_eq!(state.buffer.occupancy(), 15); // 3 classes x 5 exemplars
        assert_eq!(state.history.len(), 1);
        assert!(state.history[0].new_acc.is_none());
        assert!(state.history[0].harmonic_mean.is_none());
        assert_eq!(state.loss_traces[0].len(), 2);
    }

    #[test]
    fn incremental_session_grows_registry_and_freezes_backbone() {
        let cfg = tiny_cfg();
        let (mut state, specs) = tiny_run(&cfg);
        let before = state.net.backbone_fingerprint();
        run_incremental_session(&mut state, &specs[1], &cfg).unwrap();
        assert_eq!(state.net.backbone_fingerprint(), before, "backbone must stay frozen");
        assert_eq!(state.seen_classes.len(), 4);
        assert_eq!(state.history.len(), 2);
        assert!(state.history[1].new_acc.is_some());
        // Second application of the same session must fail (overlap).
        let mut again = specs[1].clone();
        again.index = 2;
        assert!(run_incremental_session(&mut state, &again, &cfg).is_err());
    }

    #[test]
    fn zero_epoch_session_is_the_prototype_classifier() {
        let mut cfg = tiny_cfg();
        cfg.train.incremental_epochs = 0;
        let (mut state, specs) = tiny_run(&cfg);
        // Expansion-only: after the session the head row for the new class
        // is exactly the prototype computed at expansion time.
        let head_before = state.net.params().scalar_count();
        run_incremental_session(&mut state, &specs[1], &cfg).unwrap();
        assert!(state.net.params().scalar_count() > head_before);
        assert!(state.loss_traces[1].is_empty());
    }

    #[test]
    fn unseen_query_label_is_an_error() {
        let cfg = tiny_cfg();
        let (state, specs) = tiny_run(&cfg);
        // Session 1 queries contain a class the net has not seen yet.
        let err = evaluate(&state.net, &[specs[1].query.clone()], &state.base_classes, 1);
        assert!(err.is_err());
    }

    #[test]
    fn full_metric_sweep_when_everything_is_correct() {
        // all-queries-correct implies every metric is 1 by construction of
        // MetricRecord; checked at the record level.
        let rec = MetricRecord::from_splits(2, 1.0, 1.0, Some(1.0));
        assert_eq!(rec.top1, 1.0);
        assert_eq!(rec.harmonic_mean, Some(1.0));
        assert_eq!(rec.mean_acc, Some(1.0));
    }

    #[test]
    fn expand_classifier_prototype_for_identical_features() {
        let cfg = tiny_cfg();
        let (mut state, specs) = tiny_run(&cfg);
        // Duplicate one support image so both draws see the same feature f:
        // the new row must be f / |f|.
        let new_class = specs[1].class_ids[0];
        let idx = specs[1].support.indices_of_class(new_class);
        let one = specs[1].support.subset(&[idx[0], idx[0]]);
        let feat = state.net.features(&one.batch(&[0])).unwrap();
        let mut expand_rng = rng::stream(cfg.seed, purpose::EXPAND, 9);
        expand_classifier(&mut state.net, &[new_class], &one, 2, &mut expand_rng).unwrap();
        let dim = state.net.feature_dim();
        let row_idx = state.net.classes().iter().position(|&c| c == new_class).unwrap();
        let head = state.net.params().iter().find(|(_, n, _)| *n == "head1.w").unwrap().2;
        let row = &head.value.data()[row_idx * dim..(row_idx + 1) * dim];
        let norm: f32 = feat.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, &f) in row.iter().zip(feat.data()) {
            assert!((a - f / norm).abs() < 1e-5);
        }
    }
}
