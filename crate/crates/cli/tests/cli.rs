use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn comoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comoe"))
        .args(args)
        .output()
        .expect("spawn comoe")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Data rows of a CSV with a `# ...` header comment, as string fields.
fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# comoe-"));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(comoe(&[]).status.code(), Some(1));
    assert_eq!(comoe(&["frobnicate"]).status.code(), Some(1));
    let o = comoe(&["train", "--out", "/tmp/never-written"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"));
    assert_eq!(comoe(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = comoe(&["train", "--config", "/nonexistent/cfg.toml", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/cfg.toml"));
}

#[test]
fn validate_bound_builtin_rows_respect_the_bound() {
    let o = comoe(&["validate-bound", "--scenarios", "builtin", "--N", "1,4,16,64", "--num-mc", "2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, rows) = csv_rows(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(header, ["scenario_id", "N", "delta_I", "estimate", "slack", "stderr"]);
    assert_eq!(rows.len(), 53 * 4);
    for r in &rows {
        let slack: f64 = r[4].parse().unwrap();
        let se: f64 = r[5].parse().unwrap();
        assert!(slack >= -3.0 * se - 1e-9, "{r:?}");
    }
}

#[test]
fn validate_bound_reads_scenario_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    fs::write(
        &path,
        "[[scenario]]\nname = \"diag\"\npos = [[0.5, 0.0], [0.0, 0.5]]\nneg = [[0.25, 0.25], [0.25, 0.25]]\n",
    )
    .unwrap();
    let out = dir.path().join("bound.csv");
    let o = comoe(&[
        "validate-bound",
        "--scenarios",
        path.to_str().unwrap(),
        "--N",
        "1,2",
        "--method",
        "exact",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, rows) = csv_rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(rows.len(), 2);
    // Slack is ln(1 + m/N) here with m = 2.
    let slack: f64 = rows[0][4].parse().unwrap();
    assert!((slack - 3f64.ln()).abs() < 1e-12, "{slack}");
}

#[test]
fn validate_bound_rejects_bad_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[[scenario]]\nname = \"x\"\npos = [[0.5, 0.5]]\nneg = [[0.2, 0.2]]\n").unwrap();
    let o = comoe(&["validate-bound", "--scenarios", path.to_str().unwrap(), "--N", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exceeded_tolerance_exits_with_two() {
    // A negative multiplier demands slack above 50 standard errors, which
    // noisy Monte-Carlo cells cannot show.
    let o = comoe(&["validate-bound", "--N", "4", "--method", "mc", "--num-mc", "200", "--sigmas=-50"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("violation"));
}

fn small_run(dir: &Path, lambda: &str) {
    let o = comoe(&[
        "train",
        "--config",
        "default",
        "--lambda",
        lambda,
        "--samples-per-task",
        "200",
        "--epochs",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn train_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    small_run(&run, "0");
    for f in ["config.toml", "metrics.csv", "params.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(cfg.contains("lambda = 0.0"), "{cfg}");
    let (header, rows) = csv_rows(&fs::read_to_string(run.join("metrics.csv")).unwrap());
    assert_eq!(header[0], "kind");
    assert!(rows.iter().any(|r| r[0] == "step"));
    assert!(rows.iter().any(|r| r[0] == "eval" && r[7] == "all"));

    let o = comoe(&["report", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let names = ["workload.csv", "similarity.csv", "projection.csv", "divergence.csv"];
    let first: Vec<String> = names.iter().map(|n| fs::read_to_string(run.join(n)).unwrap()).collect();

    // Workload frequencies sum to one per (layer, task).
    let (_, rows) = csv_rows(&first[0]);
    let mut sums = std::collections::BTreeMap::new();
    for r in &rows {
        *sums.entry((r[0].clone(), r[1].clone())).or_insert(0.0) += r[4].parse::<f64>().unwrap();
    }
    assert!(sums.values().all(|s: &f64| (s - 1.0).abs() < 1e-9), "{sums:?}");

    // Re-running is byte-identical.
    let again = dir.path().join("again");
    let o = comoe(&["report", run.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for (n, text) in names.iter().zip(&first) {
        assert_eq!(&fs::read_to_string(again.join(n)).unwrap(), text, "{n}");
    }
}

#[test]
fn report_on_empty_directory_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let o = comoe(&["report", dir.path().to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("config.toml"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = comoe(&[
        "sweep-lambda",
        "--config",
        "default",
        "--samples-per-task",
        "100",
        "--epochs",
        "1",
        "--lambdas",
        "0,0.1",
        "--seeds",
        "0,1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, rows) = csv_rows(&fs::read_to_string(dir.path().join("sweep.csv")).unwrap());
    assert_eq!(rows.len(), 4);
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("lambda,median_accuracy"));
}
