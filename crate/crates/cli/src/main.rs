use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cen_cli::config::parse_pairs;
use cen_cli::harness::{self, SweepParam, Variant};
use cen_cli::output::{self, AttractionRow};
use cen_cli::{CliError, Result, RunConfig};
use cen_core::theorem::{
    attraction_probability_empirical, attraction_probability_theory, gamma_proportion_report, AttractionQuery,
    DEFAULT_THETA_LOW,
};

#[derive(Parser)]
#[command(name = "cen", about = "Train and analyse channel-exchanging multimodal networks on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over its seeds.
    Run(ConfigArgs),
    /// Train a set of variants of a base configuration.
    Grid {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `table1` (ablations) or `table2` (fusion baselines).
        #[arg(long, default_value = "table1")]
        preset: String,
        /// Keep only these variant names (comma separated).
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Sweep lambda or theta.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Train with 1..M modalities.
    Scale {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        counts: Vec<usize>,
    },
    /// Compare the attraction probability of a zero scaling factor with a
    /// Monte Carlo estimate.
    Theorem {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,1,2")]
        lambdas: Vec<f64>,
        #[arg(long = "grads", value_delimiter = ',', default_value = "1")]
        grad_magnitudes: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scaling-factor proportions and recovery of a finished run.
    Report {
        /// Run directory written by `cen run`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_THETA_LOW)]
        theta_low: f64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut pairs = match &args.config {
        Some(path) => parse_pairs(&std::fs::read_to_string(path)?)?,
        None => Vec::new(),
    };
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("--set expects KEY=VALUE, got '{s}'")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(out) = &args.out {
        pairs.push(("output.dir".into(), out.display().to_string()));
    }
    RunConfig::from_pairs(&pairs)
}

fn print_run(name: &str, report: &harness::RunReport) {
    let (mean, std) = report.headline();
    let metric = match report.config.task.kind {
        cen_core::synthdata::TaskKind::Segmentation => "mIoU",
        cen_core::synthdata::TaskKind::Translation => "MAE",
    };
    println!(
        "{name:<28} ensemble {metric} {mean:.4} +- {std:.4} (n={})",
        report.seeds.len()
    );
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let report = harness::run(&cfg)?;
            print_run("run", &report);
            for s in &report.seeds {
                println!(
                    "  seed {}: params {} (unimodal {}), replaced fraction {:.4}, below theta {}/{}",
                    s.seed, s.counts.total, s.unimodal_total, s.avg_replaced_fraction, s.final_below, s.masked_total
                );
            }
        }
        Command::Grid { cfg, preset, only } => {
            let base = load_config(&cfg)?;
            let mut variants: Vec<Variant> = harness::preset(&preset)?;
            if !only.is_empty() {
                if let Some(bad) = only.iter().find(|n| !variants.iter().any(|v| &v.name == *n)) {
                    return Err(CliError::Invalid(format!("no variant '{bad}' in preset '{preset}'")));
                }
                variants.retain(|v| only.contains(&v.name));
            }
            let report = harness::grid(&base, &variants)?;
            for (v, r) in &report.rows {
                print_run(&v.name, r);
            }
        }
        Command::Sweep { cfg, param, values } => {
            let base = load_config(&cfg)?;
            let report = harness::sweep(&base, param, &values)?;
            for (v, r) in &report.points {
                print_run(&format!("{} = {v}", param.key()), r);
            }
        }
        Command::Scale { cfg, counts } => {
            let base = load_config(&cfg)?;
            let report = harness::modality_scaling(&base, &counts)?;
            for (m, r) in &report.points {
                print_run(&format!("M = {m}"), r);
            }
        }
        Command::Theorem {
            lambdas,
            grad_magnitudes,
            samples,
            seed,
            out,
        } => {
            let mut rows = Vec::new();
            for &lambda in &lambdas {
                for &grad_magnitude in &grad_magnitudes {
                    let q = AttractionQuery {
                        lambda,
                        grad_magnitude,
                        samples,
                    };
                    let row = AttractionRow {
                        lambda,
                        grad_magnitude,
                        samples,
                        theory: attraction_probability_theory(&q)?,
                        empirical: attraction_probability_empirical(&q, seed)?,
                    };
                    println!(
                        "lambda {lambda:<8} |g| {grad_magnitude:<8} theory {:.4} empirical {:.4}",
                        row.theory, row.empirical
                    );
                    rows.push(row);
                }
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                output::write_attraction(&dir.join("attraction.csv"), &rows)?;
            }
        }
        Command::Report { run, seed, theta_low } => {
            let (cfg, model) = harness::load_run(&run, seed)?;
            let seed_dir = run.join(format!("seed-{seed}"));
            if model.modalities() >= 2 {
                let mut all = Vec::new();
                for layer in 0..model.depth() {
                    let rows = gamma_proportion_report(&model, layer)?;
                    let dominant = rows
                        .iter()
                        .filter(|p| !p.degenerate && p.shares.iter().any(|&s| s > 0.9))
                        .count();
                    println!("layer {layer}: {dominant}/{} channels dominated by one modality", rows.len());
                    all.push((layer, rows));
                }
                output::write_proportions(&seed_dir.join("proportions.csv"), &all)?;
            }
            let trace = output::read_gamma_trace(&seed_dir.join("gammas.csv"))?;
            match trace.recovery(theta_low, cfg.theta) {
                Some(r) => println!(
                    "recovery: {}/{} channels that fell below {theta_low} later exceeded {} ({:.2}%)",
                    r.recovered,
                    r.reached,
                    cfg.theta,
                    100.0 * r.rate()
                ),
                None => println!("recovery: no channel fell below {theta_low}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
