use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn nback(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nback"))
        .args(args)
        .env_remove("NBACK_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_writes_deterministic_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = nback(&["gen", "--n", "3", "--seed", "7", "--out", p(out)]);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    }
    let train = fs::read_to_string(a.join("nback3_train.jsonl")).unwrap();
    let test = fs::read_to_string(a.join("nback3_test.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 800);
    assert_eq!(test.lines().count(), 200);
    assert_eq!(
        train,
        fs::read_to_string(b.join("nback3_train.jsonl")).unwrap()
    );
    assert_eq!(
        test,
        fs::read_to_string(b.join("nback3_test.jsonl")).unwrap()
    );
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&nback(&["gen", "--n", "0", "--out", p(dir.path())])),
        1
    );
    assert_eq!(code(&nback(&["gen", "--out", p(dir.path())])), 1);
    assert_eq!(code(&nback(&["frobnicate"])), 1);
    assert_eq!(code(&nback(&["train", "--n", "1"])), 1);
    assert_eq!(code(&nback(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let res = nback(&[
        "train",
        "--data",
        p(&missing),
        "--n",
        "1",
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("nback1_train.jsonl"));
    assert_eq!(code(&nback(&["analyze", "--runs", p(dir.path())])), 2);
    assert_eq!(code(&nback(&["stats", "--runs", p(dir.path())])), 2);

    let bad = dir.path().join("grid.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        code(&nback(&[
            "grid",
            "--config",
            p(&bad),
            "--out",
            p(&dir.path().join("g"))
        ])),
        2
    );
    let zero_seeds = nback(&["grid", "--seeds", "0", "--out", p(&dir.path().join("g"))]);
    assert_eq!(code(&zero_seeds), 2);

    let workers = Command::new(env!("CARGO_BIN_EXE_nback"))
        .args([
            "grid",
            "--seeds",
            "1",
            "--n-values",
            "1",
            "--out",
            p(&dir.path().join("g")),
        ])
        .env("NBACK_WORKERS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&workers), 2);
}

#[test]
fn default_training_run_is_quick_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&nback(&[
            "gen",
            "--n",
            "1",
            "--seed",
            "3",
            "--out",
            p(&data)
        ])),
        0
    );
    let run = dir.path().join("run");
    let start = Instant::now();
    let res = nback(&[
        "train",
        "--data",
        p(&data),
        "--n",
        "1",
        "--seed",
        "5",
        "--out",
        p(&run),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 10);
    for file in [
        "config.json",
        "entropy.csv",
        "predictions.csv",
        "params.bin",
        "attention/epoch_10_L0H0.f32",
    ] {
        assert!(run.join(file).exists(), "{file}");
    }
}

#[test]
fn architecture_flags_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&nback(&[
            "gen",
            "--n",
            "2",
            "--out",
            p(&data),
            "--train-size",
            "40",
            "--test-size",
            "10"
        ])),
        0
    );
    let run = dir.path().join("run");
    let res = nback(&[
        "train",
        "--data",
        p(&data),
        "--n",
        "2",
        "--out",
        p(&run),
        "--layers",
        "2",
        "--heads",
        "4",
        "--d-model",
        "16",
        "--epochs",
        "2",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["model"]["n_layers"], 2);
    assert_eq!(config["model"]["n_heads"], 4);
    assert_eq!(config["train"]["epochs"], 2);
    assert!(run.join("attention/epoch_2_L1H3.f32").exists());
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        code(&nback(&[
            "gen",
            "--n",
            "1",
            "--out",
            p(&data),
            "--train-size",
            "32",
            "--test-size",
            "8"
        ])),
        0
    );
    let run = dir.path().join("run");
    let res = nback(&[
        "train",
        "--data",
        p(&data),
        "--n",
        "1",
        "--out",
        p(&run),
        "--lr",
        "1e30",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&res), 3);
    assert!(run.join("FAILED").exists());

    let grid = dir.path().join("grid");
    let res = nback(&[
        "grid",
        "--out",
        p(&grid),
        "--n-values",
        "1",
        "--seeds",
        "1",
        "--layer-values",
        "1",
        "--head-values",
        "1",
        "--d-model",
        "8",
        "--epochs",
        "1",
        "--lr",
        "1e30",
    ]);
    assert_eq!(code(&res), 3);
    assert!(grid.join("L1H1/N1/seed0/FAILED").exists());
}

#[test]
fn grid_then_analysis_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let config = dir.path().join("grid.json");
    fs::write(
        &config,
        r#"{"n_values": [1, 2, 3], "seeds_per_n": 2, "layer_values": [1], "head_values": [1],
            "base_seed": 4, "model": {"d_model": 8}, "train": {"epochs": 2}}"#,
    )
    .unwrap();
    let res = Command::new(env!("CARGO_BIN_EXE_nback"))
        .args(["grid", "--config", p(&config), "--out", p(&root)])
        .env("NBACK_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("6 runs: 6 completed"));
    let again = nback(&["grid", "--config", p(&config), "--out", p(&root)]);
    assert!(String::from_utf8_lossy(&again.stdout).contains("0 completed, 6 skipped"));

    assert_eq!(code(&nback(&["analyze", "--runs", p(&root)])), 0);
    assert!(root.join("analysis/fig3_epoch2.svg").exists());
    assert!(root.join("analysis/fig5.csv").exists());
    let stats = nback(&["stats", "--runs", p(&root)]);
    assert_eq!(
        code(&stats),
        0,
        "{}",
        String::from_utf8_lossy(&stats.stderr)
    );
    let table = fs::read_to_string(root.join("table1.csv")).unwrap();
    assert!(table.starts_with("test,H,p,epsilon_squared\nkruskal_wallis,"));
    assert!(table.contains("\n2 vs 3,"));
    assert_eq!(code(&nback(&["report", "--runs", p(&root)])), 0);
    let report = fs::read_to_string(root.join("report.md")).unwrap();
    assert!(report.starts_with("# N-back grid report"));
}
