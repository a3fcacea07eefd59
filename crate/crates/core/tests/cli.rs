use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exacfs::harness::metrics::{read_csv, HEADER};

fn exacfs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exacfs"))
        .args(args)
        .env("EXACFS_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn smoke() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn run_into(out: &Path, seed: Option<&str>) -> Output {
    let cfg = smoke();
    let mut args = vec![
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    exacfs(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_metrics_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(dir.path(), None);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(text.starts_with(HEADER));
    assert!(text
        .trim_end()
        .lines()
        .last()
        .unwrap()
        .starts_with("avg_incremental_accuracy,"));
    let parsed = read_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(parsed.log.rows.len(), 3);
    assert!(parsed.log.rows.iter().all(|r| r.wall_ms == 0));
    for t in 0..3 {
        assert!(dir
            .path()
            .join(format!("significance_task{t}.csv"))
            .exists());
        assert!(dir.path().join(format!("model_task{t}.bin")).exists());
    }
    assert!(dir.path().join("exemplars.csv").exists());
    assert!(stdout(&o).contains(&parsed.average_text));
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = exacfs(&[
        "run",
        "--config",
        "/nonexistent/cfg.json",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let text = std::fs::read_to_string(smoke())
        .unwrap()
        .replace("\"beta\": 0.4", "\"beta\": 1.5");
    std::fs::write(&cfg, text).unwrap();
    let o = exacfs(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta"));
}

#[test]
fn seed_override_reaches_the_written_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(dir.path(), Some("7"));
    assert_eq!(o.status.code(), Some(0));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["seed"], 7);
}

fn ablate(study: &str, out: &Path) -> Output {
    let cfg = smoke();
    exacfs(&[
        "ablate",
        "--study",
        study,
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ])
}

fn comparison_arms(out: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("arm,avg_incremental_accuracy,final_acc"));
    lines
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect()
}

#[test]
fn ablate_sampling_runs_three_arms() {
    let dir = tempfile::tempdir().unwrap();
    let o = ablate("sampling", dir.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let arms = comparison_arms(dir.path());
    assert_eq!(arms, ["herding", "random", "closest_to_mean"]);
    for a in &arms {
        assert!(dir.path().join(a).join("metrics.csv").exists(), "{a}");
    }
}

#[test]
fn ablate_budget_runs_five_arms() {
    let dir = tempfile::tempdir().unwrap();
    let o = ablate("budget", dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        comparison_arms(dir.path()),
        [
            "budget_5",
            "budget_10",
            "budget_20",
            "budget_50",
            "budget_100"
        ]
    );
}

#[test]
fn unknown_study_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ablate("dropout", dir.path()).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_clean_and_fails_with_fault() {
    let o = exacfs(&["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let passes = stdout(&o).lines().filter(|l| l.starts_with("PASS")).count();
    assert_eq!(passes, exacfs::diagnostics::check_names().len());
    assert!(stdout(&o).lines().all(|l| !l.starts_with("FAIL")));
    let o = exacfs(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("FAIL")));
}

#[test]
fn report_groups_orderings_and_round_trips_averages() {
    let dir = tempfile::tempdir().unwrap();
    let mut base: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(smoke()).unwrap()).unwrap();
    let mut files = Vec::new();
    let mut averages = Vec::new();
    for s in 1..=3 {
        base["stream"]["ordering_seed"] = s.into();
        let cfg = dir.path().join(format!("order{s}.json"));
        std::fs::write(&cfg, base.to_string()).unwrap();
        let out = dir.path().join("smoke").join(format!("seed{s}"));
        let o = exacfs(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        let m = out.join("metrics.csv");
        averages.push(read_csv(&m).unwrap().average);
        files.push(m.to_str().unwrap().to_string());
    }
    let mut args = vec!["report", "--input"];
    args.extend(files.iter().map(String::as_str));

    let o = exacfs(&[args.as_slice(), &["--format", "csv"]].concat());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2, "{text}");
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "smoke");
    assert_eq!(row[1], "3");
    let mean = averages.iter().sum::<f64>() / 3.0;
    let std = (averages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((row[row.len() - 2].parse::<f64>().unwrap() - mean).abs() < 1e-6);
    assert!((row[row.len() - 1].parse::<f64>().unwrap() - std).abs() < 1e-6);

    let o = exacfs(&args);
    assert!(stdout(&o).contains('±'));

    // one run: the exact average from the file, no spread
    let o = exacfs(&["report", "--input", &format!("only={}", files[0])]);
    let text = stdout(&o);
    assert!(!text.contains('±'));
    assert!(text.contains(&read_csv(Path::new(&files[0])).unwrap().average_text));
    assert!(text.contains("only"));
}

#[test]
fn report_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        format!("{HEADER}\n0,2,1.7,0.5,0\navg_incremental_accuracy,0.5\n"),
    )
    .unwrap();
    let o = exacfs(&["report", "--input", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains(":2"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let good = dir.path().join("good.csv");
    std::fs::write(
        &good,
        format!("{HEADER}\n0,2,0.5,0.5,0\navg_incremental_accuracy,0.500000\n"),
    )
    .unwrap();
    let other = dir.path().join("other.csv");
    std::fs::write(
        &other,
        "task,classes_seen,overall_acc\n0,2,0.5\navg_incremental_accuracy,0.5\n",
    )
    .unwrap();
    let o = exacfs(&[
        "report",
        "--input",
        good.to_str().unwrap(),
        other.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = exacfs(&[
        "report",
        "--input",
        dir.path().join("absent.csv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
