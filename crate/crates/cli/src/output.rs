//! CSV and text outputs of runs, grids, sweeps and scaling studies.

use std::fs;
use std::io::Write;
use std::path::Path;

use std::collections::BTreeMap;

use cen_core::theorem::{GammaKey, GammaTrace, Proportion};
use cen_core::train::OutputMetrics;

use crate::error::{CliError, Result};
use crate::harness::{mean_std, GridReport, RunReport, ScaleReport, SeedOutcome, SweepReport};

pub const METRIC_COLUMNS: &[&str] = &["loss", "mean_iou", "pixel_acc", "mean_acc", "mae", "mse"];

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn metric_values(m: &OutputMetrics) -> [f64; 6] {
    [m.loss, m.mean_iou, m.pixel_acc, m.mean_acc, m.mae, m.mse]
}

pub fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), report.config.to_text())?;
    for s in &report.seeds {
        write_seed(&dir.join(format!("seed-{}", s.seed)), s, report.config.checkpoint)?;
    }
    write_summary(&dir.join("summary.csv"), report)
}

fn write_seed(dir: &Path, s: &SeedOutcome, checkpoint: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut header = vec!["seed", "epoch", "lr", "train_loss", "output"];
    header.extend_from_slice(METRIC_COLUMNS);
    w.write_record(&header)?;
    for e in &s.result.epochs {
        for m in &e.metrics {
            let mut row = vec![
                s.seed.to_string(),
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                m.output.clone(),
            ];
            row.extend(metric_values(m).iter().map(|&v| cell(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("exchange.csv"))?;
    w.write_record(["step", "layer", "modality", "replaced_count", "channel_indices"])?;
    for r in &s.result.exchange {
        let idx = r.channels.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.step.to_string(),
            r.layer.to_string(),
            r.modality.to_string(),
            r.channels.len().to_string(),
            idx,
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("gammas.csv"))?;
    w.write_record(["step", "layer", "modality", "channel", "gamma"])?;
    let trace = &s.result.trace;
    for (t, step) in trace.steps.iter().enumerate() {
        for (key, series) in trace.keys.iter().zip(&trace.series) {
            w.write_record([
                step.to_string(),
                key.layer.to_string(),
                key.modality.to_string(),
                key.channel.to_string(),
                series[t].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let c = &s.counts;
    let overhead = (c.total as f64 / s.unimodal_total as f64 - 1.0) * 100.0;
    let mut f = fs::File::create(dir.join("params.txt"))?;
    writeln!(f, "total = {}", c.total)?;
    writeln!(f, "conv = {}", c.conv)?;
    writeln!(f, "norm = {}", c.norm)?;
    writeln!(f, "head = {}", c.head)?;
    writeln!(f, "ensemble = {}", c.ensemble)?;
    writeln!(f, "fusion = {}", c.fusion)?;
    writeln!(f, "unimodal_total = {}", s.unimodal_total)?;
    writeln!(f, "overhead_percent = {overhead:.4}")?;
    writeln!(f, "random_fraction = {}", s.random_fraction)?;
    writeln!(f, "avg_replaced_fraction = {}", s.avg_replaced_fraction)?;
    writeln!(f, "final_below_theta = {} / {}", s.final_below, s.masked_total)?;

    if checkpoint {
        cen_core::checkpoint::save(dir.join("model.ckpt"), &s.model.state_entries())?;
    }
    Ok(())
}

fn outputs_of(report: &RunReport) -> Vec<String> {
    report
        .seeds
        .first()
        .map(|s| s.result.final_metrics().iter().map(|m| m.output.clone()).collect())
        .unwrap_or_default()
}

fn write_summary(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["output", "metric", "mean", "std", "n"])?;
    for output in outputs_of(report) {
        for (i, name) in METRIC_COLUMNS.iter().enumerate() {
            let values: Vec<f64> = report
                .seeds
                .iter()
                .filter_map(|s| s.metric(&output).map(|m| metric_values(m)[i]))
                .filter(|v| !v.is_nan())
                .collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            w.write_record([output.clone(), name.to_string(), mean.to_string(), std.to_string(), values.len().to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn headline_name(report: &RunReport) -> &'static str {
    match report.config.task.kind {
        cen_core::synthdata::TaskKind::Segmentation => "mean_iou",
        cen_core::synthdata::TaskKind::Translation => "mae",
    }
}

pub fn write_grid(dir: &Path, grid: &GridReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
    w.write_record([
        "variant",
        "strategy",
        "stage",
        "sharing",
        "lambda_mode",
        "exchange",
        "metric",
        "ensemble_mean",
        "ensemble_std",
        "stream_means",
        "total_params",
        "fusion_params",
        "avg_replaced_fraction",
        "seeds",
    ])?;
    for (variant, r) in &grid.rows {
        let c = &r.config;
        let lambda_mode = if c.lambda == 0.0 {
            "none"
        } else if c.all_channel {
            "all"
        } else {
            "half"
        };
        let (mean, std) = r.headline();
        let streams = (0..c.selected().len())
            .map(|m| format!("{:.4}", r.stat(&format!("m{m}"), OutputMetrics::headline).0))
            .collect::<Vec<_>>()
            .join(";");
        let first = r.seeds.first();
        let (frac, _) = mean_std(&r.seeds.iter().map(|s| s.avg_replaced_fraction).collect::<Vec<_>>());
        w.write_record([
            variant.name.clone(),
            c.kind.to_string(),
            if c.kind.staged() { c.stage.to_string() } else { String::new() },
            c.sharing.to_string(),
            lambda_mode.to_string(),
            c.exchange_enabled.to_string(),
            headline_name(r).to_string(),
            mean.to_string(),
            std.to_string(),
            streams,
            first.map_or(0, |s| s.counts.total).to_string(),
            first.map_or(0, |s| s.counts.fusion).to_string(),
            frac.to_string(),
            r.seeds.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(dir: &Path, sweep: &SweepReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
    w.write_record(["param", "value", "metric", "mean", "std", "below_theta_proportion", "seeds"])?;
    for (v, r) in &sweep.points {
        let (mean, std) = r.headline();
        let (below, _) = mean_std(&r.seeds.iter().map(SeedOutcome::final_below_fraction).collect::<Vec<_>>());
        w.write_record([
            sweep.param.key().to_string(),
            v.to_string(),
            headline_name(r).to_string(),
            mean.to_string(),
            std.to_string(),
            below.to_string(),
            r.seeds.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scale(dir: &Path, scale: &ScaleReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("scale.csv"))?;
    w.write_record(["modalities", "seed", "metric", "value"])?;
    for (m, r) in &scale.points {
        let name = headline_name(r);
        for s in &r.seeds {
            if let Some(e) = s.metric("ensemble") {
                w.write_record([m.to_string(), s.seed.to_string(), name.to_string(), e.headline().to_string()])?;
            }
        }
        let (mean, std) = r.headline();
        w.write_record([m.to_string(), "mean".into(), name.to_string(), mean.to_string()])?;
        w.write_record([m.to_string(), "std".into(), name.to_string(), std.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuild a scaling-factor trace from a run's `gammas.csv`.
pub fn read_gamma_trace(path: &Path) -> Result<GammaTrace> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut trace = GammaTrace::default();
    let mut index: BTreeMap<GammaKey, usize> = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        let field = |i: usize| -> Result<&str> {
            row.get(i)
                .ok_or_else(|| CliError::Invalid(format!("{}: short row {row:?}", path.display())))
        };
        let num = |i: usize| -> Result<u64> {
            field(i)?
                .parse()
                .map_err(|_| CliError::Invalid(format!("{}: bad integer in {row:?}", path.display())))
        };
        let step = num(0)?;
        let key = GammaKey {
            layer: num(1)? as usize,
            modality: num(2)? as usize,
            channel: num(3)? as usize,
        };
        let gamma: f64 = field(4)?
            .parse()
            .map_err(|_| CliError::Invalid(format!("{}: bad gamma in {row:?}", path.display())))?;
        if trace.steps.last() != Some(&step) {
            trace.steps.push(step);
        }
        let k = *index.entry(key).or_insert_with(|| {
            trace.keys.push(key);
            trace.series.push(Vec::new());
            trace.keys.len() - 1
        });
        trace.series[k].push(gamma);
    }
    if trace.series.iter().any(|s| s.len() != trace.steps.len()) {
        return Err(CliError::Invalid(format!("{}: ragged gamma trace", path.display())));
    }
    if trace.steps.len() >= 2 {
        trace.record_every = (trace.steps[1] - trace.steps[0]) as usize;
    }
    Ok(trace)
}

pub fn write_proportions(path: &Path, layers: &[(usize, Vec<Proportion>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = layers
        .iter()
        .find_map(|(_, rows)| rows.first())
        .map_or(0, |p| p.shares.len());
    let mut header = vec!["layer".to_string(), "channel".to_string()];
    header.extend((0..m).map(|i| format!("share_m{i}")));
    header.push("degenerate".into());
    w.write_record(&header)?;
    for (layer, rows) in layers {
        for p in rows {
            let mut rec = vec![layer.to_string(), p.channel.to_string()];
            rec.extend(p.shares.iter().map(|&v| cell(v)));
            rec.push(p.degenerate.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AttractionRow {
    pub lambda: f64,
    pub grad_magnitude: f64,
    pub samples: usize,
    pub theory: f64,
    pub empirical: f64,
}

pub fn write_attraction(path: &Path, rows: &[AttractionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["lambda", "grad_magnitude", "samples", "theory", "empirical", "abs_diff"])?;
    for r in rows {
        w.write_record([
            r.lambda.to_string(),
            r.grad_magnitude.to_string(),
            r.samples.to_string(),
            r.theory.to_string(),
            r.empirical.to_string(),
            (r.theory - r.empirical).abs().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
