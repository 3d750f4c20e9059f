use std::path::Path;
use std::process::{Command, Output};

use dope_core::data::Dataset;
use dope_core::estimator::EstimateReport;
use dope_harness::config::ExperimentConfig;
use dope_harness::plot::parse_svg;
use dope_harness::results::{
    aggregate_coverage, aggregate_rmse, read_csv, rows_from_csv, rows_to_csv, summarize, ResultRow,
};
use dope_harness::run_experiment;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn dope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dope")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = dope(&["experiment", "--config", "definitely-missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("definitely-missing.json"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(dope(&["generate", "--dgp", "pk", "--bogus"]).status.code(), Some(1));
    assert_eq!(dope(&["--help"]).status.code(), Some(0));
}

#[test]
fn generate_writes_a_parseable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("d.json");
    let out = dope(&["generate", "--dgp", "pk", "--rho", "0", "--seed", "7", "--out", path(&file)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ds = Dataset::from_json(&std::fs::read_to_string(&file).unwrap()).unwrap();
    assert_eq!(ds.len(), 64);
    assert!(ds.samples.iter().all(|o| o.k() == 24 && !o.has_oracle()));
    assert_eq!(dope(&["generate", "--dgp", "pk", "--rho", "2", "--out", path(&file)]).status.code(), Some(1));
}

#[test]
fn train_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.json");
    let ckpt = dir.path().join("s.json");
    let report = dir.path().join("r.json");
    assert!(dope(&["generate", "--dgp", "pk", "--n", "24", "--seed", "3", "--out", path(&data)]).status.success());
    let out = dope(&["train", "--data", path(&data), "--epochs", "2", "--out", path(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for method in ["plugin", "dope", "dope_structured"] {
        let out = dope(&[
            "estimate", "--data", path(&data), "--checkpoint", path(&ckpt), "--method", method, "--functional",
            "tat", "--epochs", "2", "--out", path(&report),
        ]);
        assert!(out.status.success(), "{method}: {}", String::from_utf8_lossy(&out.stderr));
        let r: EstimateReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r.method, method);
        assert_eq!(r.pseudo_outcomes.len(), 24);
        assert!(r.ci.0 <= r.theta_hat && r.theta_hat <= r.ci.1);
    }
    let out = dope(&["estimate", "--data", path(&data), "--method", "plugin"]);
    assert_eq!(out.status.code(), Some(1));
    let out = dope(&["estimate", "--data", path(&data), "--method", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"
        // two rho values, one repeat, plug-in only
        {
          "dgp": "pk",
          "functionals": [{"kind": "auc"}],
          "sweep": {"variable": "rho", "values": [0.0, 1.0]},
          "methods": ["plugin"],
          "repeats": 1,
          "splits": {"train": 16, "val": 8, "test": 8},
          "truth_pool": 200,
          "train": {"epochs": 1}
        }"#,
    )
    .unwrap();
    cfg.output.csv = Some(dir.join("rows.csv"));
    cfg.output.plot = Some(dir.join("rmse.svg"));
    cfg.output.cache_dir = Some(dir.join("cache"));
    cfg
}

#[test]
fn one_repeat_gives_one_row_per_sweep_value_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let rows = run_experiment(&cfg).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| !r.is_error()));
    let first = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    run_experiment(&cfg).unwrap();
    let second = std::fs::read_to_string(dir.path().join("rows.csv")).unwrap();
    let strip = |text: &str| -> Vec<ResultRow> {
        rows_from_csv(text)
            .unwrap()
            .into_iter()
            .map(|r| ResultRow { wall_time_s: 0.0, ..r })
            .collect()
    };
    assert_eq!(strip(&first), strip(&second));
    assert!(dir.path().join("cache/truth_cache.json").exists());
}

#[test]
fn experiment_subcommand_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(
        &cfg_path,
        r#"// delta sweep with both estimators
{
  "dgp": "pk",
  "functionals": [{"kind": "auc"}],
  "sweep": {"variable": "delta", "values": [0.0, 0.25, 0.5]},
  "methods": ["plugin", "dope"],
  "repeats": 2,
  "splits": {"train": 16, "val": 8, "test": 8},
  "truth_pool": 200,
  "train": {"epochs": 1}
}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = dope(&["experiment", "--config", path(&cfg_path), "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&out_dir.join("results.csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2 * 2);
    let series = parse_svg(&std::fs::read_to_string(out_dir.join("rmse.svg")).unwrap()).unwrap();
    assert_eq!(series.len(), 2);
    // plotted values equal the aggregates of the CSV they came from
    for cell in summarize(&rows) {
        let label = format!("{} ({})", cell.method, cell.functional);
        let s = series.iter().find(|s| s.label == label).unwrap();
        let p = s.points.iter().find(|p| (p.0 - cell.sweep_value).abs() < 1e-9).unwrap();
        assert!((p.1 - cell.rmse.unwrap() * 100.0).abs() < 1e-6);
    }
}

#[test]
fn csv_round_trip() {
    let rows = vec![
        ResultRow::estimate("dope", "tat", 0.25, 3, 0.41, 0.02, (0.37, 0.45), 0.4, 1.5),
        ResultRow::failure("plugin", "auc", 1.0, 0, "training diverged, \"nan\""),
    ];
    let back = rows_from_csv(&rows_to_csv(&rows).unwrap()).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], rows[0]);
    assert_eq!(back[1].error, rows[1].error);
    assert!(back[1].theta_hat.is_nan());
}

#[test]
fn rmse_of_gaussian_errors() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let sigma = 0.3;
    let noise = Normal::new(0.0, sigma).unwrap();
    let rows: Vec<ResultRow> = (0..10_000)
        .map(|i| {
            let t = 1.0 + noise.sample(&mut rng);
            ResultRow::estimate("dope", "auc", 0.0, i, t, 0.1, (t - 0.2, t + 0.2), 1.0, 0.0)
        })
        .collect();
    let refs: Vec<&ResultRow> = rows.iter().collect();
    let (rmse, _) = aggregate_rmse(&refs, 1.0).unwrap();
    assert!((rmse / sigma - 1.0).abs() < 0.02, "{rmse}");

    let exact: Vec<ResultRow> = (0..4)
        .map(|i| {
            let t = if i % 2 == 0 { 1.5 } else { 0.5 };
            ResultRow::estimate("dope", "auc", 0.0, i, t, 0.1, (t - 0.6, t - 0.4), 1.0, 0.0)
        })
        .collect();
    let refs: Vec<&ResultRow> = exact.iter().collect();
    assert!((aggregate_rmse(&refs, 1.0).unwrap().0 - 0.5).abs() < 1e-15);
    assert_eq!(aggregate_coverage(&refs), Some(0.5));
}
