//! Scratch harness for tuning: prints the base-session loss trace plus
//! train/test accuracy for a config file.
//!
//! Usage: pilot <config> [ens|single]

use fscil_core::config::ExperimentConfig;
use fscil_core::protocol::{self, accuracy};
use fscil_core::runner;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = ExperimentConfig::from_file(std::path::Path::new(&args[1])).unwrap();
    if args.get(2).map(|s| s.as_str()) == Some("single") {
        cfg.mix.enabled = false;
    }
    cfg.validate().unwrap();
    let data = runner::prepare_data(&cfg).unwrap();
    let t0 = std::time::Instant::now();
    let state = protocol::run_base_session(&data.specs[0], &cfg).unwrap();
    let train_acc = accuracy(&state.net, &data.specs[0].support).unwrap();
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    for (e, l) in state.loss_traces[0].iter().enumerate() {
        if e % 3 == 0 || e + 1 == state.loss_traces[0].len() {
            println!("epoch {e:3}  loss {l:.4}");
        }
    }
    println!(
        "train_acc {:.4}  test_top1 {:.4}",
        train_acc, state.history[0].top1
    );
}
