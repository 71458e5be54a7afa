//! Flat `key = value` run configuration.
//!
//! Keys are dotted (`optim.lr`), `#` starts a comment, blank lines are
//! ignored. `task.kind` is applied first and selects the task defaults;
//! every other key overrides them in file order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cen_core::net::{Arch, FusionKind, FusionStrategy, LossConfig, ModelConfig, Sharing, Stage, TaskLoss};
use cen_core::synthdata::{TaskKind, TaskSpec};
use cen_core::train::TrainConfig;
use cen_core::NormMode;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RandomFraction {
    Fixed(f64),
    /// Average replaced fraction of the exchange run with the same
    /// settings and seed.
    Matched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskSpec,
    /// Dataset modalities fed to the model; `None` means all.
    pub select: Option<Vec<usize>>,
    pub depth: usize,
    pub width: usize,
    pub norm: NormMode,
    pub sharing: Sharing,
    pub kind: FusionKind,
    pub stage: Stage,
    pub random_fraction: RandomFraction,
    pub attention_reduction: usize,
    pub align_weight: f64,
    pub theta: f64,
    pub exchange_enabled: bool,
    pub compare_abs: bool,
    pub all_channel: bool,
    pub lambda: f64,
    pub task_loss: TaskLoss,
    pub stream_weight: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub halve_every: usize,
    pub epochs: usize,
    pub record_every: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub checkpoint: bool,
}

/// Every recognised key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "task.kind",
    "task.modalities",
    "task.size",
    "task.regions",
    "task.noise",
    "task.train",
    "task.val",
    "task.seed",
    "model.select",
    "model.depth",
    "model.width",
    "model.norm",
    "model.sharing",
    "fusion.kind",
    "fusion.stage",
    "fusion.random_fraction",
    "fusion.attention_reduction",
    "fusion.align_weight",
    "exchange.theta",
    "exchange.enabled",
    "exchange.compare_abs",
    "exchange.all_channel",
    "loss.lambda",
    "loss.task",
    "loss.stream_weight",
    "optim.lr",
    "optim.momentum",
    "optim.weight_decay",
    "optim.batch_size",
    "optim.halve_every",
    "train.epochs",
    "train.record_every",
    "train.eval_every",
    "train.eval_batch",
    "seeds",
    "output.dir",
    "output.checkpoint",
    "data.cache_dir",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::Segmentation)
    }
}

impl RunConfig {
    /// Defaults for a task: segmentation uses batch norm, lambda 5e-3 and
    /// theta 2e-2; translation uses instance norm, lambda 1e-3 and theta
    /// 1e-2.
    pub fn for_task(kind: TaskKind) -> Self {
        let seg = kind == TaskKind::Segmentation;
        Self {
            task: if seg { TaskSpec::segmentation(0) } else { TaskSpec::translation(4, 0) },
            select: None,
            depth: if seg { 4 } else { 3 },
            width: if seg { 32 } else { 24 },
            norm: if seg { NormMode::Batch } else { NormMode::Instance },
            sharing: Sharing::SharedConvPrivateNorm,
            kind: FusionKind::Cen,
            stage: Stage::Late,
            random_fraction: RandomFraction::Matched,
            attention_reduction: 16,
            align_weight: 0.1,
            theta: if seg { 2e-2 } else { 1e-2 },
            exchange_enabled: true,
            compare_abs: true,
            all_channel: false,
            lambda: if seg { 5e-3 } else { 1e-3 },
            task_loss: if seg { TaskLoss::CrossEntropy } else { TaskLoss::Mse },
            stream_weight: 0.0,
            lr: if seg { 0.1 } else { 0.05 },
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 6,
            halve_every: 3,
            epochs: if seg { 8 } else { 10 },
            record_every: 10,
            eval_every: 1,
            eval_batch: 32,
            seeds: vec![1],
            out_dir: None,
            cache_dir: None,
            checkpoint: true,
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Apply `task.kind` defaults, then every pair in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let kind = match pairs.iter().rev().find(|(k, _)| k == "task.kind") {
            Some((k, v)) => parse::<TaskKind>(k, v)?,
            None => TaskKind::Segmentation,
        };
        let mut cfg = Self::for_task(kind);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "task.kind" => self.task.kind = parse(key, v)?,
            "task.modalities" => self.task.modalities = parse(key, v)?,
            "task.size" => self.task.size = parse(key, v)?,
            "task.regions" => self.task.regions = parse(key, v)?,
            "task.noise" => self.task.noise = parse(key, v)?,
            "task.train" => self.task.train = parse(key, v)?,
            "task.val" => self.task.val = parse(key, v)?,
            "task.seed" => self.task.seed = parse(key, v)?,
            "model.select" => {
                self.select = match v {
                    "all" | "" => None,
                    _ => Some(parse_list(key, v)?),
                }
            }
            "model.depth" => self.depth = parse(key, v)?,
            "model.width" => self.width = parse(key, v)?,
            "model.norm" => {
                self.norm = match v {
                    "batch" => NormMode::Batch,
                    "instance" => NormMode::Instance,
                    _ => return Err(CliError::key(key, "expected 'batch' or 'instance'")),
                }
            }
            "model.sharing" => self.sharing = parse(key, v)?,
            "fusion.kind" => self.kind = parse(key, v)?,
            "fusion.stage" => self.stage = parse(key, v)?,
            "fusion.random_fraction" => {
                self.random_fraction = match v {
                    "matched" => RandomFraction::Matched,
                    _ => RandomFraction::Fixed(parse(key, v)?),
                }
            }
            "fusion.attention_reduction" => self.attention_reduction = parse(key, v)?,
            "fusion.align_weight" => self.align_weight = parse(key, v)?,
            "exchange.theta" => self.theta = parse(key, v)?,
            "exchange.enabled" => self.exchange_enabled = parse(key, v)?,
            "exchange.compare_abs" => self.compare_abs = parse(key, v)?,
            "exchange.all_channel" => self.all_channel = parse(key, v)?,
            "loss.lambda" => self.lambda = parse(key, v)?,
            "loss.task" => self.task_loss = parse(key, v)?,
            "loss.stream_weight" => self.stream_weight = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.momentum" => self.momentum = parse(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse(key, v)?,
            "optim.batch_size" => self.batch_size = parse(key, v)?,
            "optim.halve_every" => self.halve_every = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.record_every" => self.record_every = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "train.eval_batch" => self.eval_batch = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "output.dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "output.checkpoint" => self.checkpoint = parse(key, v)?,
            "data.cache_dir" => self.cache_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(CliError::key(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let list = |v: &[u64]| v.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        Some(match key {
            "task.kind" => self.task.kind.to_string(),
            "task.modalities" => self.task.modalities.to_string(),
            "task.size" => self.task.size.to_string(),
            "task.regions" => self.task.regions.to_string(),
            "task.noise" => self.task.noise.to_string(),
            "task.train" => self.task.train.to_string(),
            "task.val" => self.task.val.to_string(),
            "task.seed" => self.task.seed.to_string(),
            "model.select" => match &self.select {
                None => "all".into(),
                Some(s) => s.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            },
            "model.depth" => self.depth.to_string(),
            "model.width" => self.width.to_string(),
            "model.norm" => match self.norm {
                NormMode::Batch => "batch".into(),
                NormMode::Instance => "instance".into(),
            },
            "model.sharing" => self.sharing.to_string(),
            "fusion.kind" => self.kind.to_string(),
            "fusion.stage" => self.stage.to_string(),
            "fusion.random_fraction" => match self.random_fraction {
                RandomFraction::Matched => "matched".into(),
                RandomFraction::Fixed(f) => f.to_string(),
            },
            "fusion.attention_reduction" => self.attention_reduction.to_string(),
            "fusion.align_weight" => self.align_weight.to_string(),
            "exchange.theta" => self.theta.to_string(),
            "exchange.enabled" => self.exchange_enabled.to_string(),
            "exchange.compare_abs" => self.compare_abs.to_string(),
            "exchange.all_channel" => self.all_channel.to_string(),
            "loss.lambda" => self.lambda.to_string(),
            "loss.task" => self.task_loss.to_string(),
            "loss.stream_weight" => self.stream_weight.to_string(),
            "optim.lr" => self.lr.to_string(),
            "optim.momentum" => self.momentum.to_string(),
            "optim.weight_decay" => self.weight_decay.to_string(),
            "optim.batch_size" => self.batch_size.to_string(),
            "optim.halve_every" => self.halve_every.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.record_every" => self.record_every.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "train.eval_batch" => self.eval_batch.to_string(),
            "seeds" => list(&self.seeds),
            "output.dir" => self.out_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "output.checkpoint" => self.checkpoint.to_string(),
            "data.cache_dir" => self.cache_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Settings that determine a training run for a given seed (everything
    /// except seeds and output locations).
    pub fn identity(&self) -> String {
        KEYS.iter()
            .filter(|k| !matches!(**k, "seeds" | "output.dir" | "output.checkpoint" | "data.cache_dir"))
            .map(|k| format!("{k}={}", self.get(k).unwrap_or_default()))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(CliError::key("loss.lambda", "must be >= 0"));
        }
        if !(self.theta > 0.0) {
            return Err(CliError::key("exchange.theta", "must be > 0"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::key("seeds", "must not be empty"));
        }
        if self.depth == 0 || self.width == 0 {
            return Err(CliError::key("model.depth", "depth and width must be >= 1"));
        }
        if let RandomFraction::Fixed(f) = self.random_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(CliError::key("fusion.random_fraction", "must be in [0, 1] or 'matched'"));
            }
        }
        self.task.validate().map_err(|e| CliError::key("task", e.to_string()))?;
        let select = self.selected();
        if let Some(bad) = select.iter().find(|&&m| m >= self.task.modalities) {
            return Err(CliError::key("model.select", format!("modality {bad} not in task")));
        }
        if select.is_empty() {
            return Err(CliError::key("model.select", "must not be empty"));
        }
        if self.kind == FusionKind::Unimodal && select.len() != 1 {
            return Err(CliError::key("model.select", "unimodal runs take exactly one modality"));
        }
        let dense = self.task.kind == TaskKind::Translation;
        if dense == (self.task_loss == TaskLoss::CrossEntropy) {
            return Err(CliError::key("loss.task", format!("{} does not fit {}", self.task_loss, self.task.kind)));
        }
        for (key, v) in [
            ("optim.batch_size", self.batch_size),
            ("train.eval_batch", self.eval_batch),
            ("fusion.attention_reduction", self.attention_reduction),
        ] {
            if v == 0 {
                return Err(CliError::key(key, "must be >= 1"));
            }
        }
        if !(self.lr > 0.0) {
            return Err(CliError::key("optim.lr", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CliError::key("optim.momentum", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn selected(&self) -> Vec<usize> {
        self.select.clone().unwrap_or_else(|| (0..self.task.modalities).collect())
    }

    pub fn task_spec(&self, seed: u64) -> TaskSpec {
        let mut spec = self.task.clone();
        spec.seed = self.task.seed.wrapping_add(seed);
        spec
    }

    pub fn model_config(&self, seed: u64, random_fraction: f64) -> ModelConfig {
        let select = self.selected();
        let channels = self.task.channels();
        let cin = select
            .iter()
            .map(|&m| channels[m])
            .fold(1, cen_core::exchange::lcm);
        let outputs = self.task.outputs();
        let mut arch = match self.task.kind {
            TaskKind::Segmentation => Arch::segmentation(cin, outputs, self.depth, self.width),
            TaskKind::Translation => Arch::translation(cin, outputs, self.depth, self.width),
        };
        arch.norm = self.norm;
        let mut strategy = FusionStrategy::new(self.kind).with_stage(self.stage);
        strategy.random_fraction = random_fraction;
        strategy.attention_reduction = self.attention_reduction;
        strategy.align_weight = self.align_weight;
        let mut cfg = ModelConfig::new(select.len(), arch);
        cfg.sharing = self.sharing;
        cfg.strategy = strategy;
        cfg.theta = self.theta;
        cfg.compare_abs = self.compare_abs;
        cfg.all_channel = self.all_channel;
        cfg.exchange_enabled = self.exchange_enabled;
        cfg.seed = seed;
        cfg
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let loss = LossConfig {
            task: self.task_loss,
            lambda: self.lambda,
            stream_weight: self.stream_weight,
        };
        let mut tc = TrainConfig::new(loss, self.selected());
        tc.epochs = self.epochs;
        tc.batch_size = self.batch_size;
        tc.lr = self.lr;
        tc.momentum = self.momentum;
        tc.weight_decay = self.weight_decay;
        tc.halve_every = self.halve_every;
        tc.record_every = self.record_every;
        tc.eval_every = self.eval_every;
        tc.eval_batch = self.eval_batch;
        tc.shuffle_seed = seed;
        tc
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| CliError::key(key, format!("cannot parse '{v}': {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Split `key = value` lines, dropping comments and blank lines.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::Syntax {
            line: i + 1,
            msg: format!("expected 'key = value', got '{line}'"),
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_task_kind() {
        let seg = RunConfig::parse_str("").unwrap();
        assert_eq!((seg.lambda, seg.theta, seg.norm), (5e-3, 2e-2, NormMode::Batch));
        let tr = RunConfig::parse_str("optim.lr = 0.2\ntask.kind = toy_translation").unwrap();
        assert_eq!((tr.lambda, tr.theta, tr.norm), (1e-3, 1e-2, NormMode::Instance));
        assert_eq!(tr.lr, 0.2);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seeds = vec![3, 4];
        cfg.select = Some(vec![1]);
        cfg.kind = FusionKind::Unimodal;
        cfg.random_fraction = RandomFraction::Fixed(0.25);
        cfg.out_dir = Some("runs/x".into());
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse_str("loss.lambda = -1").unwrap_err().to_string();
        assert!(err.contains("loss.lambda"), "{err}");
        let err = RunConfig::parse_str("optim.lrr = 1").unwrap_err().to_string();
        assert!(err.contains("optim.lrr"), "{err}");
        let err = RunConfig::parse_str("exchange.theta = abc").unwrap_err().to_string();
        assert!(err.contains("exchange.theta"), "{err}");
        assert!(RunConfig::parse_str("seeds = ").is_err());
        assert!(RunConfig::parse_str("just words").is_err());
        assert!(RunConfig::parse_str("fusion.kind = unimodal").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse_str("# header\n\nseeds = 1, 2,3 # three\n").unwrap();
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let mut c = cfg.clone();
            let v = cfg.get(key).unwrap();
            c.set(key, &v).unwrap();
            assert_eq!(c, cfg, "{key}");
        }
    }

    #[test]
    fn unimodal_input_width_follows_selection() {
        let mut cfg = RunConfig::default();
        cfg.select = Some(vec![1]);
        cfg.kind = FusionKind::Unimodal;
        assert_eq!(cfg.model_config(0, 0.0).arch.in_channels, 1);
        cfg.select = None;
        cfg.kind = FusionKind::Cen;
        assert_eq!(cfg.model_config(0, 0.0).arch.in_channels, 3);
    }
}
