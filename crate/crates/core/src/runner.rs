//! Experiment orchestration: dataset assembly, full multi-session runs,
//! ablation grids and the inference-cost benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{DatasetKind, ExperimentConfig, SslSessions};
use crate::data::synthetic::SyntheticSpec;
use crate::data::{self, split::split_sessions_from_file, LabeledImageSet, SessionSpec, SplitPlan};
use crate::ensemble::{checkpoint, EnsembleNet};
use crate::error::{Error, Result};
use crate::patchmix::SamplingMode;
use crate::protocol::{
    self, history_to_csv, performance_drop, MetricRecord, SessionState,
};
use crate::tensor::Tensor;

/// Train/test pair plus the session plan derived from a config.
pub struct PreparedData {
    pub train: LabeledImageSet<f32>,
    pub test: LabeledImageSet<f32>,
    pub specs: Vec<SessionSpec<f32>>,
}

/// Load (or generate) the dataset named by the config and split it into
/// sessions.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let spec = cfg.synthetic_spec();
            let data_seed = cfg.dataset.seed.unwrap_or(cfg.seed);
            let train = data::generate_synthetic::<f32>(&spec, data_seed, "train")?;
            let test_spec = SyntheticSpec { per_class: cfg.dataset.test_per_class, ..spec };
            let test = data::generate_synthetic::<f32>(&test_spec, data_seed, "test")?;
            (train, test)
        }
        DatasetKind::Cifar100 => {
            let dir = cfg.dataset.path.as_ref().expect("validated");
            let train = data::cifar::load_cifar100_binary::<f32>(&dir.join("train.bin"))?;
            let test = data::cifar::load_cifar100_binary::<f32>(&dir.join("test.bin"))?;
            (train, test)
        }
        DatasetKind::RawTensor => {
            let dir = cfg.dataset.path.as_ref().expect("validated");
            let train = data::rawtensor::load_raw_tensor_dir::<f32>(&dir.join("train"))?;
            let test = data::rawtensor::load_raw_tensor_dir::<f32>(&dir.join("test"))?;
            (train, test)
        }
    };
    let specs = match &cfg.split.file {
        Some(path) => split_sessions_from_file(&train, &test, path)?,
        None => {
            let split_seed = cfg.split.seed.unwrap_or(cfg.seed);
            let plan = SplitPlan::with_shuffled_order(
                cfg.split.base_classes,
                cfg.split.way,
                cfg.split.shot,
                cfg.split.sessions,
                train.num_classes(),
                split_seed,
            );
            data::split_sessions(&train, &test, &plan)?
        }
    };
    Ok(PreparedData { train, test, specs })
}

/// Results of a full multi-session run.
pub struct RunOutput {
    pub state: SessionState<f32>,
    pub csv: String,
}

fn write_if(out_dir: Option<&Path>, name: &str, content: &[u8]) -> Result<()> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), content)?;
    }
    Ok(())
}

/// Execute base plus all incremental sessions. When `out_dir` is given the
/// run directory receives a manifest, a metrics CSV updated after every
/// session (partial results survive later failures) and per-session
/// checkpoints.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    let manifest = format!(
        "# resolved configuration\n{}# build\nversion = {}\n",
        cfg.emit(),
        env!("CARGO_PKG_VERSION"),
    );
    write_if(out_dir, "manifest.txt", manifest.as_bytes())?;

    let data = prepare_data(cfg)?;
    let mut state = protocol::run_base_session(&data.specs[0], cfg)?;
    let mut csv = history_to_csv(&state.history);
    write_if(out_dir, "metrics.csv", csv.as_bytes())?;
    if let Some(dir) = out_dir {
        checkpoint::save(&state.net, &dir.join("session_00.ckpt"))?;
    }
    for spec in &data.specs[1..] {
        protocol::run_incremental_session(&mut state, spec, cfg)?;
        csv = history_to_csv(&state.history);
        write_if(out_dir, "metrics.csv", csv.as_bytes())?;
        if let Some(dir) = out_dir {
            checkpoint::save(&state.net, &dir.join(format!("session_{:02}.ckpt", spec.index)))?;
        }
    }
    Ok(RunOutput { state, csv })
}

/// The three ablation toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Ensemble,
    Ssl,
    Augmentation,
}

impl Toggle {
    pub fn parse(s: &str) -> Result<Toggle> {
        match s {
            "ens" => Ok(Toggle::Ensemble),
            "ssl" => Ok(Toggle::Ssl),
            "da" => Ok(Toggle::Augmentation),
            other => Err(Error::arg(format!("unknown toggle `{other}` (ens|ssl|da)"))),
        }
    }

    pub fn short(&self) -> &'static str {
        match self {
            Toggle::Ensemble => "ens",
            Toggle::Ssl => "ssl",
            Toggle::Augmentation => "da",
        }
    }
}

/// Apply an on/off assignment of the toggles to a config.
pub fn apply_toggles(cfg: &ExperimentConfig, assignment: &[(Toggle, bool)]) -> ExperimentConfig {
    let mut out = cfg.clone();
    for &(toggle, on) in assignment {
        match toggle {
            Toggle::Ensemble => out.mix.enabled = on,
            Toggle::Ssl => {
                out.ssl.sessions = if on { SslSessions::Base } else { SslSessions::None }
            }
            Toggle::Augmentation => {
                out.patchmix.mode = if on { SamplingMode::Spatial } else { SamplingMode::Off }
            }
        }
    }
    out
}

/// One row of an ablation table.
pub struct AblationCell {
    pub name: String,
    pub assignment: Vec<(Toggle, bool)>,
    pub final_top1: f64,
    pub pd: f64,
    pub history: Vec<MetricRecord>,
}

pub fn cell_name(assignment: &[(Toggle, bool)]) -> String {
    if assignment.iter().all(|&(_, on)| !on) {
        return "baseline".to_string();
    }
    let parts: Vec<&str> =
        assignment.iter().filter(|&&(_, on)| on).map(|(t, _)| t.short()).collect();
    parts.join("+")
}

/// Enumerate the grid over the given toggles: either the full `2^n`
/// combinations or the five-row subset
/// (none, ens, ens+ssl, ens+da, ens+ssl+da).
pub fn grid_assignments(toggles: &[Toggle], standard_rows: bool) -> Vec<Vec<(Toggle, bool)>> {
    if standard_rows {
        let rows: [&[Toggle]; 5] = [
            &[],
            &[Toggle::Ensemble],
            &[Toggle::Ensemble, Toggle::Ssl],
            &[Toggle::Ensemble, Toggle::Augmentation],
            &[Toggle::Ensemble, Toggle::Ssl, Toggle::Augmentation],
        ];
        return rows
            .iter()
            .map(|on| {
                [Toggle::Ensemble, Toggle::Ssl, Toggle::Augmentation]
                    .iter()
                    .map(|&t| (t, on.contains(&t)))
                    .collect()
            })
            .collect();
    }
    let n = toggles.len();
    (0..1usize << n)
        .map(|bits| toggles.iter().enumerate().map(|(i, &t)| (t, bits >> i & 1 == 1)).collect())
        .collect()
}

/// Run every grid cell (sequentially; each cell derives its own streams
/// from the same master seed, so the cells are order-independent).
pub fn run_ablation(
    cfg: &ExperimentConfig,
    toggles: &[Toggle],
    standard_rows: bool,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for assignment in grid_assignments(toggles, standard_rows) {
        let name = cell_name(&assignment);
        let cell_cfg = apply_toggles(cfg, &assignment);
        let cell_dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("cell_{name}")));
        let out = run_experiment(&cell_cfg, cell_dir.as_deref())?;
        let pd = if out.state.history.len() >= 2 {
            performance_drop(&out.state.history)?
        } else {
            0.0
        };
        cells.push(AblationCell {
            name,
            assignment,
            final_top1: out.state.history.last().expect("nonempty history").top1,
            pd,
            history: out.state.history.clone(),
        });
    }
    if let Some(dir) = out_dir {
        let mut table = String::from("cell,final_top1,pd\n");
        for c in &cells {
            table.push_str(&format!("{},{:.6},{:.6}\n", c.name, c.final_top1, c.pd));
        }
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.csv"), table)?;
    }
    Ok(cells)
}

/// Wall-clock and parameter comparison between two-branch and
/// single-branch inference on the same trunk.
pub struct BenchReport {
    pub ensemble_ms: f64,
    pub single_ms: f64,
    pub ratio: f64,
    pub total_params: usize,
    pub branch_specific_params: usize,
    pub repeats: usize,
    pub batch: usize,
}

impl BenchReport {
    pub fn render(&self) -> String {
        format!(
            "two-branch inference: {:.3} ms/batch\nsingle-branch inference: {:.3} ms/batch\n\
             time ratio: {:.4}\ntotal parameters: {}\nbranch-specific parameters: {} ({:.2}%)\n\
             batch {} over {} repetitions\n",
            self.ensemble_ms,
            self.single_ms,
            self.ratio,
            self.total_params,
            self.branch_specific_params,
            100.0 * self.branch_specific_params as f64 / self.total_params as f64,
            self.batch,
            self.repeats,
        )
    }
}

/// Time `repeats` two-branch and single-branch batch inferences on random
/// inputs of the config's image geometry.
pub fn bench_inference(
    net: &EnsembleNet<f32>,
    side: usize,
    batch: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::arg("bench: repeats must be >= 1"));
    }
    let channels = net.config().in_channels;
    let mut rng = crate::rng::stream(17, "bench-input", 0);
    let x = Tensor::from_fn(vec![batch, channels, side, side], |_| {
        rand::Rng::random_range(&mut rng, 0.0f32..1.0)
    });
    // Warm up both paths once.
    net.predict_probs(&x)?;
    net.predict_single_probs(&x)?;
    let mut ens_total = 0.0;
    let mut single_total = 0.0;
    for _ in 0..repeats {
        let t0 = Instant::now();
        net.predict_probs(&x)?;
        ens_total += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        net.predict_single_probs(&x)?;
        single_total += t1.elapsed().as_secs_f64();
    }
    let ensemble_ms = ens_total / repeats as f64 * 1e3;
    let single_ms = single_total / repeats as f64 * 1e3;
    Ok(BenchReport {
        ensemble_ms,
        single_ms,
        ratio: ensemble_ms / single_ms,
        total_params: net.param_count(),
        branch_specific_params: net.branch_specific_param_count(),
        repeats,
        batch,
    })
}
