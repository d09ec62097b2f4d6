use std::fs;
use std::path::Path;

use nback_core::model::ModelConfig;
use nback_core::runner::{
    analyze, load_run_tree, report, run_grid, stats_table, table1_csv, Execution, GridConfig,
    Headline, RunStatus, FAILED_MARKER,
};
use nback_core::training::TrainConfig;

fn small_grid() -> GridConfig {
    GridConfig {
        n_values: vec![1, 2, 3],
        seeds_per_n: 3,
        layer_values: vec![1],
        head_values: vec![1],
        base_seed: 11,
        model: ModelConfig {
            d_model: 8,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        parallelism: 1,
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn grid_writes_every_run_and_resumes_missing_ones() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = small_grid();
    let first = run_grid(&config, root, Execution::Sequential).unwrap();
    assert_eq!(first.statuses.len(), 9);
    assert!(first
        .statuses
        .iter()
        .all(|(_, s)| *s == RunStatus::Completed));
    assert!(!root.join(".partial").exists());
    for n in 1..=3 {
        for k in 0..3 {
            let run = root.join(format!("L1H1/N{n}/seed{k}"));
            assert!(run.join("metrics.csv").exists(), "{}", run.display());
            assert!(run.join("params.bin").exists());
        }
        assert!(root.join(format!("data/nback{n}_train.jsonl")).exists());
    }
    let summary = read(&root.join("grid_summary.csv"));
    let text = String::from_utf8(summary.clone()).unwrap();
    assert!(text.starts_with("L,H,N,mean_acc,sem,runs,failures\n"));
    assert!(text.contains("\n1,1,2,"));
    assert_eq!(text.lines().count(), 4);

    // Simulate an interrupted grid: one run is missing, one left half-written.
    let metrics = read(&root.join("L1H1/N2/seed1/metrics.csv"));
    fs::remove_dir_all(root.join("L1H1/N2/seed1")).unwrap();
    fs::create_dir_all(root.join(".partial/L1H1_N2_seed1")).unwrap();
    fs::write(root.join(".partial/L1H1_N2_seed1/junk"), "x").unwrap();

    let second = run_grid(&config, root, Execution::Sequential).unwrap();
    let completed: Vec<_> = second
        .statuses
        .iter()
        .filter(|(_, s)| *s == RunStatus::Completed)
        .collect();
    assert_eq!(completed.len(), 1);
    assert_eq!(completed[0].0.n_back, 2);
    assert_eq!(completed[0].0.seed_index, 1);
    assert_eq!(read(&root.join("L1H1/N2/seed1/metrics.csv")), metrics);
    assert_eq!(read(&root.join("grid_summary.csv")), summary);
    assert!(!root.join("L1H1/N2/seed1/junk").exists());
}

#[test]
fn parallel_and_sequential_grids_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = GridConfig {
        n_values: vec![2],
        seeds_per_n: 4,
        ..small_grid()
    };
    run_grid(&config, a.path(), Execution::Sequential).unwrap();
    run_grid(&config, b.path(), Execution::Parallel(3)).unwrap();
    assert_eq!(
        read(&a.path().join("grid_summary.csv")),
        read(&b.path().join("grid_summary.csv"))
    );
    for k in 0..4 {
        let rel = format!("L1H1/N2/seed{k}");
        for file in [
            "metrics.csv",
            "entropy.csv",
            "params.bin",
            "attention/epoch_2_L0H0.f32",
        ] {
            assert_eq!(
                read(&a.path().join(&rel).join(file)),
                read(&b.path().join(&rel).join(file)),
                "{rel}/{file}"
            );
        }
    }
}

#[test]
fn divergent_runs_are_recorded_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let config = GridConfig {
        n_values: vec![1],
        seeds_per_n: 2,
        train: TrainConfig {
            epochs: 1,
            lr: 1e30,
            ..TrainConfig::default()
        },
        ..small_grid()
    };
    let outcome = run_grid(&config, dir.path(), Execution::Sequential).unwrap();
    assert_eq!(outcome.failures().len(), 2);
    let marker = fs::read_to_string(dir.path().join("L1H1/N1/seed0").join(FAILED_MARKER)).unwrap();
    assert!(marker.contains("diverged"), "{marker}");
    assert_eq!(outcome.summary[0].runs, 0);
    assert_eq!(outcome.summary[0].failures, 2);
    assert!(outcome.summary[0].mean_acc.is_nan());

    // Failed runs are not retried.
    let summary = read(&dir.path().join("grid_summary.csv"));
    let again = run_grid(&config, dir.path(), Execution::Sequential).unwrap();
    assert!(again.statuses.iter().all(|(_, s)| *s == RunStatus::Skipped));
    assert_eq!(read(&dir.path().join("grid_summary.csv")), summary);
}

#[test]
fn analysis_outputs_are_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    run_grid(&small_grid(), root, Execution::Sequential).unwrap();
    let headline = Headline::default();
    let written = analyze(root, &headline).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for expected in [
        "fig2a.csv",
        "fig2b.csv",
        "fig3_epoch1.svg",
        "fig3_epoch2.svg",
        "fig4_N1.csv",
        "fig4_N3.csv",
        "fig5.csv",
        "diagonal.csv",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    let before: Vec<Vec<u8>> = written.iter().map(|p| read(p)).collect();
    analyze(root, &headline).unwrap();
    let after: Vec<Vec<u8>> = written.iter().map(|p| read(p)).collect();
    assert_eq!(before, after);

    let fig4 = fs::read_to_string(root.join("analysis/fig4_N3.csv")).unwrap();
    assert!(fig4.starts_with("seed,epoch,position,attention,accuracy\n"));
    // 3 seeds × 2 epochs × 21 positions.
    assert_eq!(fig4.lines().count(), 1 + 3 * 2 * 21);
    let fig5 = fs::read_to_string(root.join("analysis/fig5.csv")).unwrap();
    assert!(fig5.starts_with("N,mean_H,sem,mean_acc\n"));
    assert_eq!(fig5.lines().count(), 4);
    let fig2b = fs::read_to_string(root.join("analysis/fig2b.csv")).unwrap();
    assert!(fig2b.starts_with("N,mean_acc,sem,fit_a,fit_b,fit_r_squared\n"));

    let tree = load_run_tree(root).unwrap();
    let table = stats_table(&tree, &headline).unwrap();
    assert_eq!(table.group_sizes, vec![3, 3, 3]);
    assert_eq!(table.comparisons.len(), 3);
    let csv = table1_csv(&table);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "test,H,p,epsilon_squared");
    assert!(lines[1].starts_with("kruskal_wallis,"));
    assert_eq!(lines[2], "comparison,U,p,r,p_exact");
    assert!(lines[3].starts_with("1 vs 2,"));
    for (_, _, mw) in &table.comparisons {
        assert_eq!(mw.p_value, mw.p_exact.unwrap_or(mw.p_normal));
    }

    let text = report(root, &headline).unwrap();
    assert!(text.contains("## Logarithmic fit (L1H1)"));
    assert!(text.contains("Kruskal–Wallis H ="));
    assert_eq!(text, report(root, &headline).unwrap());
}

#[test]
fn analysis_needs_headline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let err = analyze(dir.path(), &Headline::default()).unwrap_err();
    assert!(err.to_string().contains("no completed L1H1 runs"), "{err}");
}
