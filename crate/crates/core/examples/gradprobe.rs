//! Scratch probe: per-parameter gradient norms after one training batch.

use fscil_core::config::ExperimentConfig;
use fscil_core::ensemble::{ensemble_loss, make_cutmix_mask, EnsembleNet};
use fscil_core::rng;
use fscil_core::runner;
use fscil_core::tensor::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::from_file(std::path::Path::new(&args[1])).unwrap();
    if args.get(2).map(|s| s.as_str()) == Some("single") {
        cfg.mix.enabled = false;
    }
    cfg.validate().unwrap();
    let data = runner::prepare_data(&cfg).unwrap();
    let spec = &data.specs[0];
    let mut init = rng::stream(cfg.seed, "init", 0);
    let mut net = EnsembleNet::<f32>::new(cfg.net_config(), &spec.class_ids, &mut init).unwrap();

    let idx: Vec<usize> = (0..cfg.optim.batch_size.min(spec.support.len())).collect();
    let x = spec.support.batch(&idx);
    let rows: Vec<usize> = idx
        .iter()
        .map(|&i| spec.class_ids.iter().position(|&c| c == spec.support.label(i)).unwrap())
        .collect();

    let mut tape = Tape::new();
    let taped = net.register(&mut tape, |_| true);
    let loss = if cfg.mix.enabled {
        let mut mask_rng = rng::stream(cfg.seed, "mask", 0);
        let mask = make_cutmix_mask(cfg.dataset.side, cfg.dataset.side, &cfg.mix_params(), &mut mask_rng).unwrap();
        let a = tape.input(&x, false);
        let b = tape.input(&x, false);
        let m = tape.input(&mask.to_tensor(), false);
        let (l1, l2, pooled) = net.forward_train(&mut tape, &taped, a, b, m).unwrap();
        let p = tape.value(pooled);
        let pn: f32 = p.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("pooled norm over batch: {:.3} (len {})", pn, p.len());
        ensemble_loss(&mut tape, l1, l2, &rows, &rows, mask.kappa_eff(), cfg.mix.r).unwrap()
    } else {
        let a = tape.input(&x, false);
        let (logits, pooled) = net.forward_single_train(&mut tape, &taped, a).unwrap();
        let p = tape.value(pooled);
        let pn: f32 = p.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("pooled norm over batch: {:.3}", pn);
        let lv = tape.value(logits);
        println!("logits row 0: {:?}", &lv[..spec.class_ids.len().min(6)]);
        tape.softmax_cross_entropy(logits, &rows).unwrap()
    };
    println!("loss {:.4}", tape.scalar_value(loss));
    tape.backward(loss).unwrap();
    net.apply_grads(&tape, &taped).unwrap();
    for (_, name, p) in net.params().iter() {
        let gn: f32 = p.grad.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        let wn: f32 = p.value.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("{name:20}  |w| {wn:9.4}  |g| {gn:9.6}");
    }
}
