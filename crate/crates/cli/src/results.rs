//! Per-cell result records, their merged tabular export, and the summary report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CELLS_DIR: &str = "cells";
pub const RESULTS_JSONL: &str = "results.jsonl";
pub const RESULTS_CSV: &str = "results.csv";
pub const REPORT_MD: &str = "report.md";

/// One finished grid cell; enough to re-run it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub command: String,
    pub cell: String,
    /// Ablation axis and its value verbatim; empty outside `ablate`.
    pub axis: String,
    pub value: String,
    pub dataset: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub strategy: String,
    pub lambda: f64,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub n_epochs: usize,
    pub q_epochs: usize,
    pub pool: String,
    pub arch: String,
    pub inpc: usize,
    pub deploy_epochs: usize,
    pub accuracy: Option<f64>,
    pub gen_ms: Option<f64>,
    pub train_ms: Option<f64>,
    pub ratio: Option<f64>,
    pub hardware: String,
    pub checkpoint: String,
}

impl ResultRow {
    pub const COLUMNS: [&'static str; 25] = [
        "command",
        "cell",
        "axis",
        "value",
        "dataset",
        "seed",
        "config_hash",
        "code_version",
        "strategy",
        "lambda",
        "batch_size",
        "noise_dim",
        "n_epochs",
        "q_epochs",
        "pool",
        "arch",
        "inpc",
        "deploy_epochs",
        "accuracy",
        "gen_ms",
        "train_ms",
        "ratio",
        "hardware",
        "checkpoint",
        "id",
    ];

    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        vec![
            self.command.clone(),
            self.cell.clone(),
            self.axis.clone(),
            self.value.clone(),
            self.dataset.clone(),
            self.seed.to_string(),
            self.config_hash.clone(),
            self.code_version.clone(),
            self.strategy.clone(),
            format!("{}", self.lambda),
            self.batch_size.to_string(),
            self.noise_dim.to_string(),
            self.n_epochs.to_string(),
            self.q_epochs.to_string(),
            self.pool.clone(),
            self.arch.clone(),
            self.inpc.to_string(),
            self.deploy_epochs.to_string(),
            opt(self.accuracy),
            opt(self.gen_ms),
            opt(self.train_ms),
            opt(self.ratio),
            self.hardware.clone(),
            self.checkpoint.clone(),
            format!("{}/{}", self.cell, self.seed),
        ]
    }
}

pub fn cell_path(out: &Path, cell: &str, seed: u64) -> PathBuf {
    out.join(CELLS_DIR).join(format!("{cell}__seed{seed}.json"))
}

pub fn write_row(out: &Path, row: &ResultRow) -> Result<()> {
    let path = cell_path(out, &row.cell, row.seed);
    let dir = path.parent().expect("cell path has a parent");
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(row)?).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, &path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Every cell record under `out`, ordered by file name.
pub fn read_rows(out: &Path) -> Result<Vec<ResultRow>> {
    let dir = out.join(CELLS_DIR);
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

/// Rewrites `results.jsonl` and `results.csv` from the cell records.
pub fn export(out: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut jsonl = String::new();
    for r in rows {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    std::fs::write(out.join(RESULTS_JSONL), jsonl)?;
    let mut w = csv::Writer::from_path(out.join(RESULTS_CSV))?;
    w.write_record(ResultRow::COLUMNS)?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub key: Vec<String>,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
}

fn key_of(r: &ResultRow) -> Vec<String> {
    vec![
        r.command.clone(),
        r.dataset.clone(),
        r.axis.clone(),
        r.value.clone(),
        r.arch.clone(),
        r.inpc.to_string(),
        r.strategy.clone(),
    ]
}

/// Groups rows that differ only by seed, keeping first-appearance order.
pub fn group(rows: &[ResultRow], metric: impl Fn(&ResultRow) -> Option<f64>) -> Vec<Group> {
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut map: BTreeMap<Vec<String>, Group> = BTreeMap::new();
    for r in rows {
        let Some(v) = metric(r) else { continue };
        let k = key_of(r);
        let g = map.entry(k.clone()).or_insert_with(|| {
            order.push(k.clone());
            Group {
                key: k,
                seeds: Vec::new(),
                values: Vec::new(),
            }
        });
        g.seeds.push(r.seed);
        g.values.push(v);
    }
    order.into_iter().map(|k| map.remove(&k).expect("grouped key")).collect()
}

/// Markdown summary: accuracy rows as `mean±std` percentages, profile rows as milliseconds.
pub fn render_report(rows: &[ResultRow]) -> String {
    let mut s = String::new();
    let acc = group(rows, |r| r.accuracy);
    if !acc.is_empty() {
        s.push_str("| Dataset | Axis | Value | Arch | INPC | Strategy | Seeds | Accuracy (%) |\n");
        s.push_str("|---|---|---|---|---|---|---|---|\n");
        for g in &acc {
            let (m, sd) = mean_std(&g.values);
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} | {:.1}±{:.1} |\n",
                g.key[1],
                dash(&g.key[2]),
                dash(&g.key[3]),
                g.key[4],
                g.key[5],
                g.key[6],
                g.seeds.len(),
                100.0 * m,
                100.0 * sd
            ));
        }
    }
    let prof: Vec<&ResultRow> = rows.iter().filter(|r| r.ratio.is_some()).collect();
    if !prof.is_empty() {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str("| Arch | Batch | Gen. (ms) | Train (ms) | Ratio | Hardware |\n|---|---|---|---|---|---|\n");
        for r in prof {
            s.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.3} | {} |\n",
                r.arch,
                r.batch_size,
                r.gen_ms.unwrap_or(0.0),
                r.train_ms.unwrap_or(0.0),
                r.ratio.unwrap_or(0.0),
                r.hardware
            ));
        }
    }
    if s.is_empty() {
        s.push_str("no results\n");
    }
    s
}

fn dash(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn row(cell: &str, seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            command: "ablate".into(),
            cell: cell.into(),
            axis: "lambda".into(),
            value: cell.trim_start_matches("lambda=").into(),
            dataset: "toy".into(),
            seed,
            config_hash: "h".into(),
            code_version: CODE_VERSION.into(),
            strategy: "logits".into(),
            lambda: 0.01,
            batch_size: 64,
            noise_dim: 100,
            n_epochs: 1,
            q_epochs: 1,
            pool: "convnet3".into(),
            arch: "convnet3".into(),
            inpc: 10,
            deploy_epochs: 1,
            accuracy: Some(acc),
            gen_ms: None,
            train_ms: None,
            ratio: None,
            hardware: String::new(),
            checkpoint: String::new(),
        }
    }

    #[test]
    fn grouping_and_report() {
        let rows = vec![row("lambda=0.1", 0, 0.5), row("lambda=0.1", 1, 0.7), row("lambda=1", 0, 0.9)];
        let g = group(&rows, |r| r.accuracy);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].values, vec![0.5, 0.7]);
        let rep = render_report(&rows);
        assert!(rep.contains("60.0±10.0"), "{rep}");
        assert_eq!(rep, render_report(&rows));
    }

    #[test]
    fn export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("lambda=0.1", 0, 0.5), row("lambda=1", 0, 0.9)];
        for r in &rows {
            write_row(dir.path(), r).unwrap();
        }
        let back = read_rows(dir.path()).unwrap();
        assert_eq!(back, rows);
        export(dir.path(), &back).unwrap();
        let text = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
        assert_eq!(text.lines().count(), 3);
    }
}
