//! Experiment configuration: flat `key = value` text with dotted
//! namespaces. Unknown keys are errors, every numeric field is
//! range-checked, and `parse(emit(c)) == c`.

use std::path::{Path, PathBuf};

use crate::data::synthetic::SyntheticSpec;
use crate::ensemble::{MixParams, NetConfig};
use crate::error::{Error, Result};
use crate::patchmix::{PatchMixConfig, SamplingMode};
use crate::ssl::{SslParams, ViewScope};
use crate::tensor::{LrSchedule, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar100,
    RawTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    /// Seed for synthetic generation; the master seed when absent.
    pub seed: Option<u64>,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub side: usize,
    pub channels: usize,
    pub noise: f64,
    pub max_shift: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub base_classes: usize,
    pub way: usize,
    pub shot: usize,
    pub sessions: usize,
    /// Seed for the class order and few-shot sample draws; the master seed
    /// when absent. Pinning it keeps the task fixed while training seeds
    /// vary.
    pub seed: Option<u64>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub branch_channels: usize,
    pub stages: Vec<usize>,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_frac: f64,
    pub milestones: Vec<f64>,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub r: f64,
    pub cosine_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslSessions {
    Base,
    All,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    pub std_target: f64,
    pub eps: f64,
    pub scope: ViewScope,
    pub sessions: SslSessions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub incremental_epochs: usize,
    pub incremental_lr: f64,
    pub backbone_lr: f64,
    pub support_oversample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub backbone: BackboneConfig,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub mix: MixConfig,
    pub patchmix: PatchMixConfig,
    pub ssl: SslConfig,
    pub replay_per_class: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            out_dir: None,
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                path: None,
                seed: None,
                classes: 10,
                train_per_class: 20,
                test_per_class: 20,
                side: 16,
                channels: 3,
                noise: 0.6,
                max_shift: 3,
            },
            split: SplitConfig { base_classes: 6, way: 2, shot: 5, sessions: 2, seed: None, file: None },
            backbone: BackboneConfig { branch_channels: 12, stages: vec![24, 48], group_size: 8 },
            optim: OptimConfig {
                lr: 0.005,
                momentum: 0.9,
                weight_decay: 0.0005,
                nesterov: true,
                batch_size: 16,
            },
            schedule: ScheduleConfig { warmup_frac: 0.05, milestones: vec![0.6, 0.8], decay: 0.1 },
            mix: MixConfig { enabled: true, alpha: 1.0, r: 3.0, cosine_scale: 16.0 },
            patchmix: PatchMixConfig::default(),
            ssl: SslConfig {
                gamma: 0.2,
                lambda: 25.0,
                mu: 25.0,
                nu: 1.0,
                std_target: 1.0,
                eps: 1e-4,
                scope: ViewScope::Batch,
                sessions: SslSessions::Base,
            },
            replay_per_class: 5,
            train: TrainConfig {
                base_epochs: 120,
                incremental_epochs: 20,
                incremental_lr: 0.005,
                backbone_lr: 0.0,
                support_oversample: 1,
            },
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("key `{key}`: bad value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        other => Err(Error::Config(format!("key `{key}`: expected true/false, got `{other}`"))),
    }
}

fn parse_list<V: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad list item `{tok}`")))
        })
        .collect()
}

fn fmt_list<V: std::fmt::Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
            cfg.set_key(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Apply one key override (same grammar as the file format).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "out_dir" => {
                self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "dataset.kind" => {
                self.dataset.kind = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar100" => DatasetKind::Cifar100,
                    "raw" => DatasetKind::RawTensor,
                    other => {
                        return Err(Error::Config(format!(
                            "key `{key}`: unknown dataset kind `{other}` (synthetic|cifar100|raw)"
                        )))
                    }
                }
            }
            "dataset.path" => self.dataset.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "dataset.seed" => self.dataset.seed = Some(parse_num(key, value)?),
            "dataset.classes" => self.dataset.classes = parse_num(key, value)?,
            "dataset.train_per_class" => self.dataset.train_per_class = parse_num(key, value)?,
            "dataset.test_per_class" => self.dataset.test_per_class = parse_num(key, value)?,
            "dataset.side" => self.dataset.side = parse_num(key, value)?,
            "dataset.channels" => self.dataset.channels = parse_num(key, value)?,
            "dataset.noise" => self.dataset.noise = parse_num(key, value)?,
            "dataset.max_shift" => self.dataset.max_shift = parse_num(key, value)?,
            "split.base_classes" => self.split.base_classes = parse_num(key, value)?,
            "split.way" => self.split.way = parse_num(key, value)?,
            "split.shot" => self.split.shot = parse_num(key, value)?,
            "split.sessions" => self.split.sessions = parse_num(key, value)?,
            "split.seed" => self.split.seed = Some(parse_num(key, value)?),
            "split.file" => self.split.file = (!value.is_empty()).then(|| PathBuf::from(value)),
            "backbone.branch_channels" => self.backbone.branch_channels = parse_num(key, value)?,
            "backbone.stages" => self.backbone.stages = parse_list(key, value)?,
            "backbone.group_size" => self.backbone.group_size = parse_num(key, value)?,
            "optim.lr" => self.optim.lr = parse_num(key, value)?,
            "optim.momentum" => self.optim.momentum = parse_num(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, value)?,
            "optim.nesterov" => self.optim.nesterov = parse_bool(key, value)?,
            "optim.batch_size" => self.optim.batch_size = parse_num(key, value)?,
            "schedule.warmup_frac" => self.schedule.warmup_frac = parse_num(key, value)?,
            "schedule.milestones" => self.schedule.milestones = parse_list(key, value)?,
            "schedule.decay" => self.schedule.decay = parse_num(key, value)?,
            "mix.enabled" => self.mix.enabled = parse_bool(key, value)?,
            "mix.alpha" => self.mix.alpha = parse_num(key, value)?,
            "mix.r" => self.mix.r = parse_num(key, value)?,
            "mix.cosine_scale" => self.mix.cosine_scale = parse_num(key, value)?,
            "patchmix.mode" => {
                self.patchmix.mode = match value {
                    "spatial" => SamplingMode::Spatial,
                    "uniform" => SamplingMode::Uniform,
                    "off" => SamplingMode::Off,
                    other => {
                        return Err(Error::Config(format!(
                            "key `{key}`: unknown mode `{other}` (spatial|uniform|off)"
                        )))
                    }
                }
            }
            "patchmix.n" => self.patchmix.n = parse_num(key, value)?,
            "patchmix.k_min" => self.patchmix.k_min = parse_num(key, value)?,
            "patchmix.k_max" => self.patchmix.k_max = parse_num(key, value)?,
            "patchmix.apply_prob" => self.patchmix.apply_prob = parse_num(key, value)?,
            "patchmix.sigma" => self.patchmix.sigma = parse_num(key, value)?,
            "ssl.gamma" => self.ssl.gamma = parse_num(key, value)?,
            "ssl.lambda" => self.ssl.lambda = parse_num(key, value)?,
            "ssl.mu" => self.ssl.mu = parse_num(key, value)?,
            "ssl.nu" => self.ssl.nu = parse_num(key, value)?,
            "ssl.std_target" => self.ssl.std_target = parse_num(key, value)?,
            "ssl.eps" => self.ssl.eps = parse_num(key, value)?,
            "ssl.scope" => {
                self.ssl.scope = match value {
                    "batch" => ViewScope::Batch,
                    "image" => ViewScope::Image,
                    other => {
                        return Err(Error::Config(format!(
                            "key `{key}`: unknown scope `{other}` (batch|image)"
                        )))
                    }
                }
            }
            "ssl.sessions" => {
                self.ssl.sessions = match value {
                    "base" => SslSessions::Base,
                    "all" => SslSessions::All,
                    "none" => SslSessions::None,
                    other => {
                        return Err(Error::Config(format!(
                            "key `{key}`: unknown value `{other}` (base|all|none)"
                        )))
                    }
                }
            }
            "replay.per_class" => self.replay_per_class = parse_num(key, value)?,
            "train.base_epochs" => self.train.base_epochs = parse_num(key, value)?,
            "train.incremental_epochs" => self.train.incremental_epochs = parse_num(key, value)?,
            "train.incremental_lr" => self.train.incremental_lr = parse_num(key, value)?,
            "train.backbone_lr" => self.train.backbone_lr = parse_num(key, value)?,
            "train.support_oversample" => self.train.support_oversample = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(Error::Config("dataset.classes must be >= 2".into()));
        }
        if d.kind == DatasetKind::Synthetic {
            if d.train_per_class == 0 || d.test_per_class == 0 {
                return Err(Error::Config("dataset per-class counts must be >= 1".into()));
            }
            if d.side < 4 || d.channels == 0 {
                return Err(Error::Config("dataset.side must be >= 4 and channels >= 1".into()));
            }
            if !(0.0..=1.0).contains(&d.noise) {
                return Err(Error::Config(format!("dataset.noise {} must be in [0, 1]", d.noise)));
            }
        } else if d.path.is_none() {
            return Err(Error::Config("dataset.path required for file-backed datasets".into()));
        }
        let s = &self.split;
        if s.base_classes == 0 || s.way == 0 || s.shot == 0 {
            return Err(Error::Config("split.base_classes, split.way and split.shot must be >= 1".into()));
        }
        if s.base_classes + s.way * s.sessions > d.classes && s.file.is_none() {
            return Err(Error::Config(format!(
                "split.base_classes + split.way * split.sessions = {} exceeds dataset.classes = {}",
                s.base_classes + s.way * s.sessions,
                d.classes
            )));
        }
        self.net_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sgd_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.optim.batch_size < 2 {
            return Err(Error::Config("optim.batch_size must be >= 2".into()));
        }
        let sc = &self.schedule;
        if !(0.0..1.0).contains(&sc.warmup_frac) {
            return Err(Error::Config(format!("schedule.warmup_frac {} must be in [0, 1)", sc.warmup_frac)));
        }
        if !(0.0 < sc.decay && sc.decay <= 1.0) {
            return Err(Error::Config(format!("schedule.decay {} must be in (0, 1]", sc.decay)));
        }
        for &m in &sc.milestones {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("schedule.milestones entry {m} must be in (0, 1)")));
            }
        }
        self.mix_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.patchmix.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.ssl_params().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.replay_per_class == 0 {
            return Err(Error::Config("replay.per_class must be >= 1".into()));
        }
        let t = &self.train;
        if t.incremental_lr < 0.0 || t.backbone_lr < 0.0 {
            return Err(Error::Config("train learning rates must be nonnegative".into()));
        }
        if t.support_oversample == 0 {
            return Err(Error::Config("train.support_oversample must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical emission; parsing the output reproduces the config.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("seed", self.seed.to_string());
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        let d = &self.dataset;
        kv(
            "dataset.kind",
            match d.kind {
                DatasetKind::Synthetic => "synthetic",
                DatasetKind::Cifar100 => "cifar100",
                DatasetKind::RawTensor => "raw",
            }
            .into(),
        );
        if let Some(p) = &d.path {
            kv("dataset.path", p.display().to_string());
        }
        if let Some(seed) = d.seed {
            kv("dataset.seed", seed.to_string());
        }
        kv("dataset.classes", d.classes.to_string());
        kv("dataset.train_per_class", d.train_per_class.to_string());
        kv("dataset.test_per_class", d.test_per_class.to_string());
        kv("dataset.side", d.side.to_string());
        kv("dataset.channels", d.channels.to_string());
        kv("dataset.noise", d.noise.to_string());
        kv("dataset.max_shift", d.max_shift.to_string());
        let s = &self.split;
        kv("split.base_classes", s.base_classes.to_string());
        kv("split.way", s.way.to_string());
        kv("split.shot", s.shot.to_string());
        kv("split.sessions", s.sessions.to_string());
        if let Some(seed) = s.seed {
            kv("split.seed", seed.to_string());
        }
        if let Some(p) = &s.file {
            kv("split.file", p.display().to_string());
        }
        kv("backbone.branch_channels", self.backbone.branch_channels.to_string());
        kv("backbone.stages", fmt_list(&self.backbone.stages));
        kv("backbone.group_size", self.backbone.group_size.to_string());
        kv("optim.lr", self.optim.lr.to_string());
        kv("optim.momentum", self.optim.momentum.to_string());
        kv("optim.weight_decay", self.optim.weight_decay.to_string());
        kv("optim.nesterov", self.optim.nesterov.to_string());
        kv("optim.batch_size", self.optim.batch_size.to_string());
        kv("schedule.warmup_frac", self.schedule.warmup_frac.to_string());
        kv("schedule.milestones", fmt_list(&self.schedule.milestones));
        kv("schedule.decay", self.schedule.decay.to_string());
        kv("mix.enabled", self.mix.enabled.to_string());
        kv("mix.alpha", self.mix.alpha.to_string());
        kv("mix.r", self.mix.r.to_string());
        kv("mix.cosine_scale", self.mix.cosine_scale.to_string());
        kv(
            "patchmix.mode",
            match self.patchmix.mode {
                SamplingMode::Spatial => "spatial",
                SamplingMode::Uniform => "uniform",
                SamplingMode::Off => "off",
            }
            .into(),
        );
        kv("patchmix.n", self.patchmix.n.to_string());
        kv("patchmix.k_min", self.patchmix.k_min.to_string());
        kv("patchmix.k_max", self.patchmix.k_max.to_string());
        kv("patchmix.apply_prob", self.patchmix.apply_prob.to_string());
        kv("patchmix.sigma", self.patchmix.sigma.to_string());
        kv("ssl.gamma", self.ssl.gamma.to_string());
        kv("ssl.lambda", self.ssl.lambda.to_string());
        kv("ssl.mu", self.ssl.mu.to_string());
        kv("ssl.nu", self.ssl.nu.to_string());
        kv("ssl.std_target", self.ssl.std_target.to_string());
        kv("ssl.eps", self.ssl.eps.to_string());
        kv(
            "ssl.scope",
            match self.ssl.scope {
                ViewScope::Batch => "batch",
                ViewScope::Image => "image",
            }
            .into(),
        );
        kv(
            "ssl.sessions",
            match self.ssl.sessions {
                SslSessions::Base => "base",
                SslSessions::All => "all",
                SslSessions::None => "none",
            }
            .into(),
        );
        kv("replay.per_class", self.replay_per_class.to_string());
        kv("train.base_epochs", self.train.base_epochs.to_string());
        kv("train.incremental_epochs", self.train.incremental_epochs.to_string());
        kv("train.incremental_lr", self.train.incremental_lr.to_string());
        kv("train.backbone_lr", self.train.backbone_lr.to_string());
        kv("train.support_oversample", self.train.support_oversample.to_string());
        out
    }

    // ── Typed views used by the training engine ─────────────────────

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            in_channels: self.dataset.channels,
            branch_channels: self.backbone.branch_channels,
            stages: self.backbone.stages.clone(),
            group_size: self.backbone.group_size,
            cosine_scale: self.mix.cosine_scale,
            ensemble: self.mix.enabled,
        }
    }

    pub fn mix_params(&self) -> MixParams {
        MixParams { alpha: self.mix.alpha, r: self.mix.r }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.optim.lr,
            momentum: self.optim.momentum,
            weight_decay: self.optim.weight_decay,
            nesterov: self.optim.nesterov,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.optim.lr,
            warmup_frac: self.schedule.warmup_frac,
            milestones: self.schedule.milestones.clone(),
            decay: self.schedule.decay,
        }
    }

    pub fn ssl_params(&self) -> SslParams {
        SslParams {
            lambda_w: self.ssl.lambda,
            mu_w: self.ssl.mu,
            nu_w: self.ssl.nu,
            gamma: self.ssl.gamma,
            eps: self.ssl.eps,
            std_target: self.ssl.std_target,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.dataset.classes,
            per_class: self.dataset.train_per_class,
            side: self.dataset.side,
            channels: self.dataset.channels,
            noise: self.dataset.noise,
            max_shift: self.dataset.max_shift,
        }
    }

    /// Is self-supervision active in the given session?
    pub fn ssl_active(&self, session: usize) -> bool {
        self.ssl.gamma > 0.0
            && match self.ssl.sessions {
                SslSessions::Base => session == 0,
                SslSessions::All => true,
                SslSessions::None => false,
            }
    }
}
