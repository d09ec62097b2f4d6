use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{io, GridConfig, RunKey, RunnerError, FAILED_MARKER};
use crate::analysis::{
    accuracy_attention_pairs, diagonal_mass, entropy_summary, log_fit, mean_sem, render_heatmap,
    EntropySummary, LogFit,
};
use crate::grad::Matrix;
use crate::stats::{
    kruskal_wallis, mann_whitney, pearson, spearman, KruskalResult, MannWhitneyResult,
};
use crate::training::{read_run_dir, StoredRun};

/// Which architecture and N values the single-configuration outputs use.
#[derive(Clone, Debug, PartialEq)]
pub struct Headline {
    pub layers: usize,
    pub heads: usize,
    /// N whose seed-mean attention maps are drawn per epoch.
    pub heatmap_n: usize,
    /// Groups compared in the statistics table.
    pub table_n_values: Vec<usize>,
}

impl Default for Headline {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 1,
            heatmap_n: 3,
            table_n_values: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TreeRun {
    pub key: RunKey,
    pub run: StoredRun,
}

/// Every run directory found under a grid root, in key order.
#[derive(Clone, Debug, Default)]
pub struct RunTree {
    pub runs: Vec<TreeRun>,
    pub failed: Vec<RunKey>,
}

impl RunTree {
    pub fn select(&self, layers: usize, heads: usize) -> Vec<&TreeRun> {
        self.runs
            .iter()
            .filter(|r| r.key.layers == layers && r.key.heads == heads)
            .collect()
    }

    /// Completed runs of one architecture grouped by N.
    pub fn by_n(&self, layers: usize, heads: usize) -> BTreeMap<usize, Vec<&TreeRun>> {
        let mut out: BTreeMap<usize, Vec<&TreeRun>> = BTreeMap::new();
        for r in self.select(layers, heads) {
            out.entry(r.key.n_back).or_default().push(r);
        }
        out
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>, RunnerError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        if entry.file_type().map_err(io(dir))?.is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                out.push((name.to_string(), entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_run_tree(root: &Path) -> Result<RunTree, RunnerError> {
    let mut tree = RunTree::default();
    for (arch, arch_path) in sorted_entries(root)? {
        if RunKey::parse(&arch, "N1", "seed0").is_none() {
            continue;
        }
        for (n, n_path) in sorted_entries(&arch_path)? {
            for (seed, path) in sorted_entries(&n_path)? {
                let Some(key) = RunKey::parse(&arch, &n, &seed) else {
                    continue;
                };
                if path.join(FAILED_MARKER).exists() {
                    tree.failed.push(key);
                } else {
                    tree.runs.push(TreeRun {
                        key,
                        run: read_run_dir(&path)?,
                    });
                }
            }
        }
    }
    tree.runs.sort_by_key(|r| r.key);
    tree.failed.sort();
    Ok(tree)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub layers: usize,
    pub heads: usize,
    pub n_back: usize,
    pub mean_acc: f64,
    pub sem: f64,
    pub runs: usize,
    pub failures: usize,
}

/// Final test accuracy per (L, H, N): mean, standard error and counts.
pub fn summarize(tree: &RunTree) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in &tree.runs {
        let acc = r
            .run
            .epoch_metrics
            .last()
            .map_or(f64::NAN, |m| m.test_accuracy);
        groups
            .entry((r.key.layers, r.key.heads, r.key.n_back))
            .or_default()
            .0
            .push(acc);
    }
    for k in &tree.failed {
        groups.entry((k.layers, k.heads, k.n_back)).or_default().1 += 1;
    }
    groups
        .into_iter()
        .map(|((layers, heads, n_back), (accs, failures))| {
            let (mean_acc, sem) = if accs.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_sem(&accs)
            };
            SummaryRow {
                layers,
                heads,
                n_back,
                mean_acc,
                sem,
                runs: accs.len(),
                failures,
            }
        })
        .collect()
}

pub fn grid_summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("L,H,N,mean_acc,sem,runs,failures\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.layers, r.heads, r.n_back, r.mean_acc, r.sem, r.runs, r.failures
        );
    }
    out
}

/// Summarizes the runs of `config` found under `root` into
/// `grid_summary.csv`.
pub fn write_grid_summary(
    config: &GridConfig,
    root: &Path,
) -> Result<Vec<SummaryRow>, RunnerError> {
    let mut tree = load_run_tree(root)?;
    let wanted: std::collections::HashSet<RunKey> = config.keys().into_iter().collect();
    tree.runs.retain(|r| wanted.contains(&r.key));
    tree.failed.retain(|k| wanted.contains(k));
    let rows = summarize(&tree);
    let path = root.join("grid_summary.csv");
    fs::write(&path, grid_summary_csv(&rows)).map_err(io(&path))?;
    Ok(rows)
}

pub fn fig2a_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("L,H,N,mean_acc,sem\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.layers, r.heads, r.n_back, r.mean_acc, r.sem
        );
    }
    out
}

pub fn fig2b_csv(rows: &[&SummaryRow], fit: &LogFit) -> String {
    let mut out = String::from("N,mean_acc,sem,fit_a,fit_b,fit_r_squared\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.n_back, r.mean_acc, r.sem, fit.a, fit.b, fit.r_squared
        );
    }
    out
}

/// Accuracy/attention points of one N with the seed index in the first column.
pub fn fig4_csv(runs: &[&TreeRun], layer: usize, head: usize) -> Result<String, RunnerError> {
    let mut out = String::from("seed,epoch,position,attention,accuracy\n");
    for r in runs {
        for p in accuracy_attention_pairs(std::slice::from_ref(&r.run), layer, head)?.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.key.seed_index, p.epoch, p.position, p.attention, p.accuracy
            );
        }
    }
    Ok(out)
}

pub fn fig5_csv(summary: &[EntropySummary]) -> String {
    let mut out = String::from("N,mean_H,sem,mean_acc\n");
    for s in summary {
        let _ = writeln!(out, "{},{},{},{}", s.n_back, s.mean, s.sem, s.mean_accuracy);
    }
    out
}

/// Mean N-back diagonal mass of head (0, 0) per N and epoch.
pub fn diagonal_csv(by_n: &BTreeMap<usize, Vec<&TreeRun>>) -> Result<String, RunnerError> {
    let mut out = String::from("N,epoch,mean_mass,sem\n");
    for (n, runs) in by_n {
        let epochs = runs
            .iter()
            .map(|r| r.run.epoch_metrics.len())
            .min()
            .unwrap_or(0);
        for e in 0..epochs {
            let masses = runs
                .iter()
                .map(|r| diagonal_mass(&r.run.epoch_metrics[e].mean_attention[0].matrix, *n))
                .collect::<Result<Vec<_>, _>>()?;
            let (mean, sem) = mean_sem(&masses);
            let _ = writeln!(out, "{n},{},{mean},{sem}", e + 1);
        }
    }
    Ok(out)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, RunnerError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

fn headline_runs<'a>(
    tree: &'a RunTree,
    headline: &Headline,
) -> Result<BTreeMap<usize, Vec<&'a TreeRun>>, RunnerError> {
    let by_n = tree.by_n(headline.layers, headline.heads);
    if by_n.is_empty() {
        return Err(RunnerError::Missing(format!(
            "no completed L{}H{} runs",
            headline.layers, headline.heads
        )));
    }
    Ok(by_n)
}

/// Writes every figure table and heatmap into `<root>/analysis/` and returns
/// the written paths.
pub fn analyze(root: &Path, headline: &Headline) -> Result<Vec<PathBuf>, RunnerError> {
    let tree = load_run_tree(root)?;
    let by_n = headline_runs(&tree, headline)?;
    let out_dir = root.join("analysis");
    fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    let mut written = Vec::new();

    let rows = summarize(&tree);
    written.push(write(&out_dir, "fig2a.csv", &fig2a_csv(&rows))?);

    let head_rows: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| r.layers == headline.layers && r.heads == headline.heads && r.runs > 0)
        .collect();
    if head_rows.len() >= 2 {
        let xs: Vec<f64> = head_rows.iter().map(|r| r.n_back as f64).collect();
        let ys: Vec<f64> = head_rows.iter().map(|r| r.mean_acc).collect();
        let fit = log_fit(&xs, &ys)?;
        written.push(write(&out_dir, "fig2b.csv", &fig2b_csv(&head_rows, &fit))?);
    }

    let heatmap_n = if by_n.contains_key(&headline.heatmap_n) {
        headline.heatmap_n
    } else {
        *by_n.keys().next().expect("nonempty")
    };
    let runs = &by_n[&heatmap_n];
    let epochs = runs
        .iter()
        .map(|r| r.run.epoch_metrics.len())
        .min()
        .unwrap_or(0);
    for e in 0..epochs {
        let t = runs[0].run.epoch_metrics[e].mean_attention[0].matrix.rows();
        let mut mean = Matrix::<f64>::zeros(t, t);
        for r in runs {
            mean.add_assign(&r.run.epoch_metrics[e].mean_attention[0].matrix);
        }
        let mean = mean.scaled(1.0 / runs.len() as f64);
        let title = format!(
            "L{}H{} N={heatmap_n} epoch {} (mean of {} runs)",
            headline.layers,
            headline.heads,
            e + 1,
            runs.len()
        );
        let path = out_dir.join(format!("fig3_epoch{}.svg", e + 1));
        render_heatmap(&mean, &title, &path)?;
        written.push(path);
    }

    for (n, runs) in &by_n {
        written.push(write(
            &out_dir,
            &format!("fig4_N{n}.csv"),
            &fig4_csv(runs, 0, 0)?,
        )?);
    }
    let stored: Vec<StoredRun> = by_n.values().flatten().map(|r| r.run.clone()).collect();
    written.push(write(
        &out_dir,
        "fig5.csv",
        &fig5_csv(&entropy_summary(&stored, 0, 0)?),
    )?);
    written.push(write(&out_dir, "diagonal.csv", &diagonal_csv(&by_n)?)?);
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct StatsTable {
    pub n_values: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub kruskal: KruskalResult,
    /// Pairwise tests (N_a, N_b, result) with N_a < N_b.
    pub comparisons: Vec<(usize, usize, MannWhitneyResult)>,
}

/// Kruskal–Wallis over the final accuracies of the headline N groups, with
/// pairwise Mann–Whitney follow-ups.
pub fn stats_table(tree: &RunTree, headline: &Headline) -> Result<StatsTable, RunnerError> {
    let by_n = headline_runs(tree, headline)?;
    let mut n_values = Vec::new();
    let mut groups = Vec::new();
    for n in &headline.table_n_values {
        if let Some(runs) = by_n.get(n) {
            n_values.push(*n);
            groups.push(
                runs.iter()
                    .filter_map(|r| r.run.epoch_metrics.last().map(|m| m.test_accuracy))
                    .collect::<Vec<f64>>(),
            );
        }
    }
    if groups.len() < 2 {
        return Err(RunnerError::Missing(format!(
            "need runs for at least two of N = {:?}",
            headline.table_n_values
        )));
    }
    let slices: Vec<&[f64]> = groups.iter().map(Vec::as_slice).collect();
    let kruskal = kruskal_wallis(&slices)?;
    let mut comparisons = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            comparisons.push((
                n_values[i],
                n_values[j],
                mann_whitney(&groups[i], &groups[j])?,
            ));
        }
    }
    Ok(StatsTable {
        n_values,
        group_sizes: groups.iter().map(Vec::len).collect(),
        kruskal,
        comparisons,
    })
}

pub fn table1_csv(table: &StatsTable) -> String {
    let k = &table.kruskal;
    let mut out = String::from("test,H,p,epsilon_squared\n");
    let _ = writeln!(
        out,
        "kruskal_wallis,{},{},{}",
        k.h_statistic, k.p_value, k.epsilon_squared
    );
    out.push_str("comparison,U,p,r,p_exact\n");
    for (a, b, mw) in &table.comparisons {
        let exact = mw.p_exact.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{a} vs {b},{},{},{},{exact}",
            mw.u_statistic, mw.p_value, mw.rank_biserial
        );
    }
    out
}

/// Markdown summary of the whole grid.
pub fn report(root: &Path, headline: &Headline) -> Result<String, RunnerError> {
    let tree = load_run_tree(root)?;
    let by_n = headline_runs(&tree, headline)?;
    let arch = format!("L{}H{}", headline.layers, headline.heads);
    let rows = summarize(&tree);
    let mut out = String::from("# N-back grid report\n\n");
    let _ = writeln!(
        out,
        "{} completed runs, {} failed.\n",
        tree.runs.len(),
        tree.failed.len()
    );

    out.push_str("## Final test accuracy\n\n| L | H | N | mean | sem | runs | failures |\n|---|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.4} | {:.4} | {} | {} |",
            r.layers, r.heads, r.n_back, r.mean_acc, r.sem, r.runs, r.failures
        );
    }

    let head_rows: Vec<&SummaryRow> = rows
        .iter()
        .filter(|r| r.layers == headline.layers && r.heads == headline.heads && r.runs > 0)
        .collect();
    if head_rows.len() >= 2 {
        let xs: Vec<f64> = head_rows.iter().map(|r| r.n_back as f64).collect();
        let ys: Vec<f64> = head_rows.iter().map(|r| r.mean_acc).collect();
        let fit = log_fit(&xs, &ys)?;
        let _ = writeln!(
            out,
            "\n## Logarithmic fit ({arch})\n\naccuracy = {:.4} + ({:.4}) ln N, R² = {:.4}",
            fit.a, fit.b, fit.r_squared
        );
    }

    let stored: Vec<StoredRun> = by_n.values().flatten().map(|r| r.run.clone()).collect();
    let _ = writeln!(
        out,
        "\n## Attention ({arch}, final epoch)\n\n| N | mean H_N | sem | mean diagonal mass | Spearman(attention, accuracy) | Pearson |\n|---|---|---|---|---|---|"
    );
    for s in entropy_summary(&stored, 0, 0)? {
        let runs = &by_n[&s.n_back];
        let masses = runs
            .iter()
            .map(|r| {
                let last = r.run.epoch_metrics.last().expect("epochs");
                diagonal_mass(&last.mean_attention[0].matrix, s.n_back)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let owned: Vec<StoredRun> = runs.iter().map(|r| r.run.clone()).collect();
        let pairs = accuracy_attention_pairs(&owned, 0, 0)?;
        let corr = |f: fn(&[f64], &[f64]) -> Result<f64, _>| {
            f(&pairs.attention(), &pairs.accuracy())
                .map_or("n/a".to_string(), |c| format!("{c:.4}"))
        };
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {} | {} |",
            s.n_back,
            s.mean,
            s.sem,
            mean_sem(&masses).0,
            corr(spearman),
            corr(pearson)
        );
    }

    match stats_table(&tree, headline) {
        Ok(table) => {
            let k = &table.kruskal;
            let _ = writeln!(
                out,
                "\n## Group comparison ({arch}, N = {:?}, n = {:?})\n\nKruskal–Wallis H = {:.3}, df = {}, p = {:.4e}, ε² = {:.3}\n\n| comparison | U | p | r |\n|---|---|---|---|",
                table.n_values, table.group_sizes, k.h_statistic, k.df, k.p_value, k.epsilon_squared
            );
            for (a, b, mw) in &table.comparisons {
                let _ = writeln!(
                    out,
                    "| {a} vs {b} | {} | {:.4} | {:.4} |",
                    mw.u_statistic, mw.p_value, mw.rank_biserial
                );
            }
        }
        Err(RunnerError::Missing(m)) => {
            let _ = writeln!(out, "\n## Group comparison\n\nskipped: {m}");
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}
