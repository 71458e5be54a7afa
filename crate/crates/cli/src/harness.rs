//! Training runs over seeds, comparison grids, sensitivity sweeps and
//! modality scaling.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use cen_core::net::{CenModel, FusionKind, ParamCounts};
use cen_core::synthdata::{generate, load_or_generate, Dataset};
use cen_core::train::{train, OutputMetrics, TrainResult};

use crate::config::{RandomFraction, RunConfig};
use crate::error::{CliError, Result};
use crate::output;
use rayon::prelude::*;

/// One trained seed.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: TrainResult,
    pub model: CenModel,
    pub counts: ParamCounts,
    /// Total parameters of the single-stream network with the same
    /// architecture.
    pub unimodal_total: usize,
    pub random_fraction: f64,
    /// Replaced channels over exchangeable channels, averaged over steps.
    pub avg_replaced_fraction: f64,
    /// Sparsity-masked scaling factors at or below theta after training.
    pub final_below: usize,
    pub masked_total: usize,
}

impl SeedOutcome {
    pub fn final_below_fraction(&self) -> f64 {
        self.final_below as f64 / self.masked_total.max(1) as f64
    }

    pub fn metric(&self, output: &str) -> Option<&OutputMetrics> {
        self.result.final_output(output)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config: RunConfig,
    pub seeds: Vec<SeedOutcome>,
}

impl RunReport {
    /// Mean and sample standard deviation of a final-epoch field across
    /// seeds.
    pub fn stat(&self, output: &str, field: impl Fn(&OutputMetrics) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|s| s.metric(output).map(&field))
            .collect();
        mean_std(&values)
    }

    pub fn headline(&self) -> (f64, f64) {
        self.stat("ensemble", OutputMetrics::headline)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Average replaced fractions of reference exchange runs, keyed by the
/// reference config identity and seed.
#[derive(Default)]
pub struct FractionCache {
    inner: Mutex<HashMap<(String, u64), f64>>,
}

impl FractionCache {
    fn get(&self, key: &(String, u64)) -> Option<f64> {
        self.inner.lock().expect("fraction cache").get(key).copied()
    }

    fn put(&self, key: (String, u64), value: f64) {
        self.inner.lock().expect("fraction cache").insert(key, value);
    }
}

fn dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let spec = cfg.task_spec(seed);
    Ok(match &cfg.cache_dir {
        Some(dir) => load_or_generate(dir, &spec)?,
        None => generate(&spec)?,
    })
}

/// The exchange run whose replaced fraction a matched random-exchange run
/// copies.
pub fn reference_config(cfg: &RunConfig) -> RunConfig {
    let mut r = cfg.clone();
    r.kind = FusionKind::Cen;
    r.random_fraction = RandomFraction::Matched;
    r
}

/// Train one seed, resolving a matched random fraction through `cache`.
pub fn run_seed(cfg: &RunConfig, seed: u64, cache: &FractionCache) -> Result<SeedOutcome> {
    let fraction = match (cfg.kind, cfg.random_fraction) {
        (FusionKind::RandomExchange, RandomFraction::Matched) => {
            let reference = reference_config(cfg);
            let key = (reference.identity(), seed);
            match cache.get(&key) {
                Some(f) => f,
                None => {
                    let f = run_seed(&reference, seed, cache)?.avg_replaced_fraction;
                    cache.put(key, f);
                    f
                }
            }
        }
        (_, RandomFraction::Fixed(f)) => f,
        (_, RandomFraction::Matched) => 0.0,
    };
    let data = dataset(cfg, seed)?;
    let mut model = CenModel::build(cfg.model_config(seed, fraction))?;
    let result = train(&mut model, &data.train, &data.val, &cfg.train_config(seed))?;

    let mut uni_cfg = cfg.model_config(seed, 0.0);
    uni_cfg.modalities = 1;
    uni_cfg.strategy.kind = FusionKind::Unimodal;
    uni_cfg.sharing = cen_core::Sharing::SharedConvPrivateNorm;
    let unimodal_total = CenModel::build(uni_cfg)?.param_counts().total;

    let exchangeable: usize = model
        .plans
        .iter()
        .map(|p| p.subparts.iter().map(|r| r.len()).sum::<usize>())
        .sum();
    let replaced: usize = result.exchange.iter().map(|r| r.channels.len()).sum();
    let avg_replaced_fraction = if result.steps == 0 || exchangeable == 0 {
        0.0
    } else {
        replaced as f64 / (result.steps as f64 * exchangeable as f64)
    };
    let (mut final_below, mut masked_total) = (0, 0);
    for (l, slots) in model.norms.iter().enumerate() {
        for state in slots {
            for (g, &m) in state.gammas(&model.params).iter().zip(&state.sparsity_mask) {
                if m {
                    masked_total += 1;
                    final_below += model.plans[l].below_threshold(*g) as usize;
                }
            }
        }
    }
    if cfg.kind == FusionKind::Cen {
        cache.put((cfg.identity(), seed), avg_replaced_fraction);
    }
    Ok(SeedOutcome {
        seed,
        counts: model.param_counts(),
        result,
        model,
        unimodal_total,
        random_fraction: fraction,
        avg_replaced_fraction,
        final_below,
        masked_total,
    })
}

/// Train every seed of `cfg` and write outputs when `output.dir` is set.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    run_cached(cfg, &FractionCache::default())
}

pub fn run_cached(cfg: &RunConfig, cache: &FractionCache) -> Result<RunReport> {
    cfg.validate()?;
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, cache))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        config: cfg.clone(),
        seeds,
    };
    if let Some(dir) = &cfg.out_dir {
        output::write_run(dir, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            if k == "task.kind" || k == "seeds" || k.starts_with("task.") {
                return Err(CliError::Invalid(format!(
                    "variant '{}' overrides '{k}'; grid variants share task and seeds",
                    self.name
                )));
            }
            cfg.set(k, v)?;
        }
        cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(&self.name));
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sharing / regularization / exchange ablations plus the random-exchange
/// and discard rows.
pub fn table1_variants() -> Vec<Variant> {
    vec![
        Variant::new("cen", &[]),
        Variant::new(
            "unshared_noreg_noexchange",
            &[("model.sharing", "unshared"), ("loss.lambda", "0"), ("exchange.enabled", "false")],
        ),
        Variant::new("shared_noreg_noexchange", &[("loss.lambda", "0"), ("exchange.enabled", "false")]),
        Variant::new("shared_half_noexchange", &[("exchange.enabled", "false")]),
        Variant::new("shared_all_exchange", &[("exchange.all_channel", "true")]),
        Variant::new("fully_shared_half_exchange", &[("model.sharing", "fully_shared")]),
        Variant::new(
            "random_exchange",
            &[("fusion.kind", "random_exchange"), ("fusion.random_fraction", "matched")],
        ),
        Variant::new("discard", &[("fusion.kind", "discard")]),
    ]
}

/// Unimodal rows, exchange, and aggregation / alignment baselines at every
/// fusion stage.
pub fn table2_variants() -> Vec<Variant> {
    let mut v = vec![
        Variant::new("unimodal_m0", &[("fusion.kind", "unimodal"), ("model.select", "0"), ("loss.lambda", "0")]),
        Variant::new("unimodal_m1", &[("fusion.kind", "unimodal"), ("model.select", "1"), ("loss.lambda", "0")]),
        Variant::new("cen", &[]),
    ];
    for kind in ["concat", "align", "attention"] {
        for stage in ["early", "middle", "late", "all"] {
            let var = Variant::new(
                &format!("{kind}_{stage}"),
                &[("fusion.kind", kind), ("fusion.stage", stage), ("model.sharing", "unshared"), ("loss.lambda", "0")],
            );
            v.push(var);
        }
    }
    v.push(Variant::new(
        "average_late",
        &[("fusion.kind", "average"), ("model.sharing", "unshared"), ("loss.lambda", "0")],
    ));
    v
}

pub fn preset(name: &str) -> Result<Vec<Variant>> {
    match name {
        "table1" => Ok(table1_variants()),
        "table2" => Ok(table2_variants()),
        _ => Err(CliError::Invalid(format!("unknown grid preset '{name}' (expected table1 or table2)"))),
    }
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub rows: Vec<(Variant, RunReport)>,
}

/// Run every variant over the base config's seeds and write `grid.csv`.
pub fn grid(base: &RunConfig, variants: &[Variant]) -> Result<GridReport> {
    if variants.is_empty() {
        return Err(CliError::Invalid("empty grid".into()));
    }
    base.validate()?;
    let configs = variants
        .iter()
        .map(|v| v.apply(base))
        .collect::<Result<Vec<_>>>()?;
    let cache = FractionCache::default();
    // Matched random-exchange rows reuse the fractions of the exchange rows.
    let matched = |c: &RunConfig| c.kind == FusionKind::RandomExchange && c.random_fraction == RandomFraction::Matched;
    let mut reports: Vec<Option<RunReport>> = vec![None; configs.len()];
    for phase in [false, true] {
        let done = configs
            .par_iter()
            .enumerate()
            .filter(|(_, c)| matched(c) == phase)
            .map(|(i, c)| run_cached(c, &cache).map(|r| (i, r)))
            .collect::<Result<Vec<_>>>()?;
        for (i, r) in done {
            reports[i] = Some(r);
        }
    }
    let rows: Vec<(Variant, RunReport)> = variants
        .iter()
        .cloned()
        .zip(reports.into_iter().map(|r| r.expect("every variant ran")))
        .collect();
    let report = GridReport { rows };
    if let Some(dir) = &base.out_dir {
        output::write_grid(dir, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Theta,
}

impl std::str::FromStr for SweepParam {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "theta" => Ok(SweepParam::Theta),
            _ => Err(CliError::Invalid(format!("sweep parameter must be lambda or theta, got '{s}'"))),
        }
    }
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda => "loss.lambda",
            SweepParam::Theta => "exchange.theta",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<(f64, RunReport)>,
}

pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(CliError::Invalid("sweep needs at least one value".into()));
    }
    let cache = FractionCache::default();
    let points = values
        .par_iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.set(param.key(), &v.to_string())?;
            cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("{}_{v:e}", param.key())));
            run_cached(&cfg, &cache).map(|r| (v, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SweepReport { param, points };
    if let Some(dir) = &base.out_dir {
        output::write_sweep(dir, &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct ScaleReport {
    pub points: Vec<(usize, RunReport)>,
}

/// Train with the first `m` task modalities for each `m` in `counts`.
pub fn modality_scaling(base: &RunConfig, counts: &[usize]) -> Result<ScaleReport> {
    if counts.is_empty() {
        return Err(CliError::Invalid("no modality counts given".into()));
    }
    let cap = match base.task.kind {
        cen_core::synthdata::TaskKind::Segmentation => 2,
        cen_core::synthdata::TaskKind::Translation => cen_core::synthdata::MAX_TRANSLATION_MODALITIES,
    };
    if let Some(bad) = counts.iter().find(|&&m| m == 0 || m > cap) {
        return Err(CliError::Invalid(format!(
            "{} modalities requested; the {} generator supports 1..={cap}",
            bad, base.task.kind
        )));
    }
    let points = counts
        .par_iter()
        .map(|&m| {
            let mut cfg = base.clone();
            cfg.task.modalities = m;
            cfg.select = None;
            cfg.out_dir = base.out_dir.as_ref().map(|d| d.join(format!("m{m}")));
            run(&cfg).map(|r| (m, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = ScaleReport { points };
    if let Some(dir) = &base.out_dir {
        output::write_scale(dir, &report)?;
    }
    Ok(report)
}

/// Recompute a finished run's model from its directory.
pub fn load_run(dir: &Path, seed: u64) -> Result<(RunConfig, CenModel)> {
    let cfg = RunConfig::load(dir.join("config.txt"))?;
    let mut model = CenModel::build(cfg.model_config(seed, 0.0))?;
    let entries = cen_core::checkpoint::load(dir.join(format!("seed-{seed}")).join("model.ckpt"))?;
    model.load_state(&entries)?;
    Ok((cfg, model))
}
