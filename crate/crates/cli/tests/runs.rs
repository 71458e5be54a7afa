use std::fs;
use std::path::Path;
use std::process::Command;

use cen_cli::harness::{self, Variant};
use cen_cli::RunConfig;

fn tiny(dir: &Path) -> RunConfig {
    let text = format!(
        "task.size = 16\ntask.train = 12\ntask.val = 6\ntrain.epochs = 2\ntrain.record_every = 1\nseeds = 1, 2\noutput.dir = {}\n",
        dir.display()
    );
    RunConfig::parse_str(&text).unwrap()
}

fn scratch(name: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("cen-cli-test-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let (a, b) = (scratch("repro-a"), scratch("repro-b"));
    harness::run(&tiny(&a)).unwrap();
    harness::run(&tiny(&b)).unwrap();
    for seed in [1, 2] {
        for file in ["metrics.csv", "exchange.csv", "gammas.csv", "model.ckpt"] {
            let rel = format!("seed-{seed}/{file}");
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel}");
        }
    }
    let first = fs::read_to_string(a.join("seed-1/metrics.csv")).unwrap();
    let second = fs::read_to_string(a.join("seed-2/metrics.csv")).unwrap();
    assert_ne!(first.lines().nth(1), second.lines().nth(1));
}

#[test]
fn outputs_have_documented_columns() {
    let dir = scratch("schema");
    let report = harness::run(&tiny(&dir)).unwrap();
    assert_eq!(
        header(&dir.join("seed-1/metrics.csv")),
        "seed,epoch,lr,train_loss,output,loss,mean_iou,pixel_acc,mean_acc,mae,mse"
    );
    assert_eq!(
        header(&dir.join("seed-1/exchange.csv")),
        "step,layer,modality,replaced_count,channel_indices"
    );
    assert_eq!(header(&dir.join("seed-1/gammas.csv")), "step,layer,modality,channel,gamma");
    assert_eq!(header(&dir.join("summary.csv")), "output,metric,mean,std,n");
    let params = fs::read_to_string(dir.join("seed-1/params.txt")).unwrap();
    assert!(params.contains(&format!("total = {}", report.seeds[0].counts.total)));

    let (cfg, model) = harness::load_run(&dir, 1).unwrap();
    assert_eq!(cfg.identity(), report.config.identity());
    assert_eq!(model.state_entries(), report.seeds[0].model.state_entries());
    let trace = cen_cli::output::read_gamma_trace(&dir.join("seed-1/gammas.csv")).unwrap();
    assert_eq!(trace.steps, report.seeds[0].result.trace.steps);
    assert_eq!(trace.series, report.seeds[0].result.trace.series);
}

#[test]
fn grid_writes_one_row_per_variant() {
    let dir = scratch("grid");
    let mut base = tiny(&dir);
    base.seeds = vec![1];
    base.record_every = 0;
    let variants = vec![
        Variant::new("cen", &[]),
        Variant::new("random", &[("fusion.kind", "random_exchange")]),
        Variant::new("concat", &[("fusion.kind", "concat"), ("model.sharing", "unshared")]),
    ];
    let grid = harness::grid(&base, &variants).unwrap();
    let cen_fraction = grid.rows[0].1.seeds[0].avg_replaced_fraction;
    assert_eq!(grid.rows[1].1.seeds[0].random_fraction, cen_fraction);
    let text = fs::read_to_string(dir.join("grid.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(dir.join("concat/seed-1/metrics.csv").exists());
    assert!(harness::grid(&base, &[]).is_err());
    assert!(Variant::new("bad", &[("task.size", "8")]).apply(&base).is_err());
}

#[test]
fn cli_reports_errors_with_nonzero_exit() {
    let bin = env!("CARGO_BIN_EXE_cen");
    let out = Command::new(bin).args(["run", "--set", "no.such.key=1"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));

    let dir = scratch("theorem");
    let out = Command::new(bin)
        .args(["theorem", "--lambdas", "1", "--samples", "5000", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        header(&dir.join("attraction.csv")),
        "lambda,grad_magnitude,samples,theory,empirical,abs_diff"
    );
}
