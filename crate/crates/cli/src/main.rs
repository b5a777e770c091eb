//! `fscil` — run few-shot class-incremental experiments from a config
//! file: full runs, ablation grids, the inference-cost benchmark, split
//! materialisation and CSV report merging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fscil_core::config::ExperimentConfig;
use fscil_core::data::split::emit_split_file;
use fscil_core::ensemble::checkpoint;
use fscil_core::error::Error;
use fscil_core::protocol::metrics;
use fscil_core::runner::{self, Toggle};

/// Output root for relative run directories.
const OUT_ROOT_ENV: &str = "FSCIL_OUT_ROOT";

#[derive(Parser)]
#[command(name = "fscil", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force a component on or off, e.g. `--toggle ssl=off`. Repeatable.
    #[arg(long = "toggle", value_name = "NAME=on|off")]
    toggles: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the base session and every incremental session.
    Run(ConfigArgs),
    /// Run an ablation grid over the listed components.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Components to vary (ens, ssl, da). Repeatable; defaults to all.
        #[arg(long = "vary", value_name = "NAME")]
        vary: Vec<String>,
        /// Use the five-row grid (baseline, ens, ens+ssl, ens+da,
        /// ens+ssl+da) instead of the full cartesian grid.
        #[arg(long)]
        standard_rows: bool,
    },
    /// Compare two-branch and single-branch inference cost on a checkpoint.
    BenchInference {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model checkpoint to benchmark.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Timing repetitions per variant.
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Inference batch size.
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Materialise the session split (class ids and support indices).
    Split {
        #[command(flatten)]
        config: ConfigArgs,
        /// Where to write the split file.
        #[arg(long = "to", value_name = "FILE")]
        to: PathBuf,
    },
    /// Merge run metrics CSVs into one comparison table.
    Report {
        /// Metrics CSV files (or run directories containing metrics.csv).
        inputs: Vec<PathBuf>,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    let assignments = parse_toggles(&args.toggles)?;
    if !assignments.is_empty() {
        cfg = runner::apply_toggles(&cfg, &assignments);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_toggles(raw: &[String]) -> Result<Vec<(Toggle, bool)>, Error> {
    raw.iter()
        .map(|spec| {
            let (name, state) = spec.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("toggle `{spec}` must look like ens=off"))
            })?;
            let on = match state {
                "on" => true,
                "off" => false,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "toggle state `{other}` must be on or off"
                    )))
                }
            };
            Ok((Toggle::parse(name)?, on))
        })
        .collect()
}

/// Resolve the run directory: explicit path, else config `out_dir`,
/// relative paths anchored at `FSCIL_OUT_ROOT` when set.
fn resolve_out_dir(cfg: &ExperimentConfig) -> Option<PathBuf> {
    let dir = cfg.out_dir.clone()?;
    if dir.is_absolute() {
        return Some(dir);
    }
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) => Some(Path::new(&root).join(dir)),
        None => Some(dir),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let out_dir = resolve_out_dir(&cfg);
            let out = runner::run_experiment(&cfg, out_dir.as_deref())?;
            print!("{}", out.csv);
            if let Some(dir) = &out_dir {
                eprintln!("run artifacts in {}", dir.display());
            }
            Ok(())
        }
        Command::Ablate { config, vary, standard_rows } => {
            let cfg = load_config(&config)?;
            let out_dir = resolve_out_dir(&cfg);
            let toggles: Vec<Toggle> = if vary.is_empty() {
                vec![Toggle::Ensemble, Toggle::Ssl, Toggle::Augmentation]
            } else {
                vary.iter().map(|v| Toggle::parse(v)).collect::<Result<_, _>>()?
            };
            let cells = runner::run_ablation(&cfg, &toggles, standard_rows, out_dir.as_deref())?;
            println!("cell,final_top1,pd");
            for c in &cells {
                println!("{},{:.6},{:.6}", c.name, c.final_top1, c.pd);
            }
            Ok(())
        }
        Command::BenchInference { config, checkpoint: ckpt_path, repeats, batch } => {
            let cfg = load_config(&config)?;
            if !ckpt_path.exists() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint {} does not exist",
                    ckpt_path.display()
                )));
            }
            let net = checkpoint::load::<f32>(&ckpt_path)?;
            let report = runner::bench_inference(&net, cfg.dataset.side, batch, repeats)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Split { config, to } => {
            let cfg = load_config(&config)?;
            let data = runner::prepare_data(&cfg)?;
            std::fs::write(&to, emit_split_file(&data.specs, &data.train))?;
            eprintln!("split written to {}", to.display());
            Ok(())
        }
        Command::Report { inputs, out } => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument("report: no input CSVs".into()));
            }
            let mut table = String::from("run,sessions,final_top1,pd\n");
            for input in &inputs {
                let path =
                    if input.is_dir() { input.join("metrics.csv") } else { input.clone() };
                let text = std::fs::read_to_string(&path)?;
                let history = metrics::csv_to_history(&text)?;
                if history.is_empty() {
                    return Err(Error::Format(format!("{}: empty history", path.display())));
                }
                let name = input
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| input.display().to_string());
                let pd = if history.len() >= 2 {
                    format!("{:.6}", metrics::performance_drop(&history)?)
                } else {
                    String::new()
                };
                table.push_str(&format!(
                    "{},{},{:.6},{}\n",
                    name,
                    history.len(),
                    history.last().unwrap().top1,
                    pd
                ));
            }
            match out {
                Some(path) => std::fs::write(path, table)?,
                None => print!("{table}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
