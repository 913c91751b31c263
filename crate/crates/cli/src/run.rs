//! Command implementations: each writes per-cell records, then the merged tables and report.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dim_core::datasets::{load_dataset, Split};
use dim_core::deploy::{deploy_train, measure_effort, DeployConfig, DeployResult, EffortOptions};
use dim_core::distill::{distill_with, load_checkpoint, DistillConfig, DistillOptions, GeneratorCheckpoint, CHECKPOINT_DIR};
use dim_core::models::Arch;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{config_error, load_settings, parse_pool, Overrides, Settings};
use crate::plot::montage;
use crate::results::{cell_path, export, read_rows, render_report, write_row, ResultRow, CODE_VERSION, REPORT_MD};

const PLAN_FILE: &str = "plan.json";
const MONTAGE: &str = "montage.png";
const CHECKPOINT_EVERY: usize = 10;

fn short_hash(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(v.to_string().as_bytes()))[..12].to_string()
}

/// Creates `out/<command>-<hash>` and records the plan that produced it.
fn plan_dir(out: &Path, command: &str, settings: &Settings, extra: serde_json::Value) -> Result<PathBuf> {
    let plan = json!({ "command": command, "settings": settings, "extra": extra });
    let dir = out.join(format!("{command}-{}", short_hash(&plan)));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join(PLAN_FILE), serde_json::to_string_pretty(&plan)?)?;
    log::info!("writing into {}", dir.display());
    Ok(dir)
}

fn pool_name(d: &DistillConfig) -> String {
    d.pool.entries.iter().map(|a| a.as_str()).collect::<Vec<_>>().join("+")
}

fn base_row(command: &str, cell: &str, axis: &str, value: &str, d: &DistillConfig, p: &DeployConfig, seed: u64) -> Result<ResultRow> {
    Ok(ResultRow {
        command: command.to_string(),
        cell: cell.to_string(),
        axis: axis.to_string(),
        value: value.to_string(),
        dataset: d.dataset.name.as_str().to_string(),
        seed,
        config_hash: short_hash(&json!({ "distill": d.hash()?, "deploy": p })),
        code_version: CODE_VERSION.to_string(),
        strategy: d.strategy.to_string(),
        lambda: d.lambda,
        batch_size: d.batch_size,
        noise_dim: d.noise_dim,
        n_epochs: d.n_epochs,
        q_epochs: d.q_epochs,
        pool: pool_name(d),
        arch: p.arch.to_string(),
        inpc: p.inpc,
        deploy_epochs: p.epochs,
        accuracy: None,
        gen_ms: None,
        train_ms: None,
        ratio: None,
        hardware: String::new(),
        checkpoint: String::new(),
    })
}

fn with_deploy(mut row: ResultRow, r: &DeployResult) -> ResultRow {
    row.accuracy = Some(r.accuracy);
    row.gen_ms = Some(r.timing.generation_ms_per_batch);
    row.train_ms = Some(r.timing.training_ms_per_batch);
    row.hardware = r.timing.hardware.clone();
    row
}

fn done(dir: &Path, cell: &str, seed: u64, force: bool) -> bool {
    let exists = cell_path(dir, cell, seed).exists();
    if exists && !force {
        log::info!("cell {cell} seed {seed} already has results; skipping");
    }
    exists && !force
}

/// Merges the cell records, writes the tables and report, and fails if any cell failed.
fn finish(dir: &Path, failures: Vec<String>) -> Result<()> {
    let rows = read_rows(dir)?;
    export(dir, &rows)?;
    let report = render_report(&rows);
    std::fs::write(dir.join(REPORT_MD), &report)?;
    print!("{report}");
    println!("results: {}", dir.display());
    if failures.is_empty() {
        Ok(())
    } else {
        bail!("{} cell(s) failed:\n  {}", failures.len(), failures.join("\n  "))
    }
}

fn run_distill(cfg: &DistillConfig, dir: &Path, resume: bool) -> Result<GeneratorCheckpoint> {
    let options = DistillOptions {
        out_dir: Some(dir.to_path_buf()),
        resume,
        checkpoint_every: CHECKPOINT_EVERY,
        stop_after: None,
    };
    let ckpt = distill_with(cfg, &options)?;
    montage(&ckpt, 10, 0, &dir.join(MONTAGE))?;
    Ok(ckpt)
}

pub fn distill(out: &Path, config: Option<&Path>, ov: &Overrides, resume: bool, force: bool) -> Result<()> {
    let s = load_settings(config, ov)?;
    let dir = plan_dir(out, "distill", &s, json!({}))?;
    let mut failures = Vec::new();
    for &seed in &s.seeds {
        let cfg = DistillConfig { seed, ..s.distill.clone() };
        if done(&dir, "distill", seed, force) {
            continue;
        }
        let seed_dir = dir.join(format!("seed{seed}"));
        match run_distill(&cfg, &seed_dir, resume && !force) {
            Ok(_) => {
                let mut row = base_row("distill", "distill", "", "", &cfg, &s.deploy, seed)?;
                row.checkpoint = seed_dir.join(CHECKPOINT_DIR).display().to_string();
                write_row(&dir, &row)?;
            }
            Err(e) => {
                log::error!("seed {seed}: {e:#}");
                failures.push(format!("seed {seed}: {e:#}"));
            }
        }
    }
    finish(&dir, failures)
}

fn test_split(ckpt: &GeneratorCheckpoint) -> Result<dim_core::datasets::DatasetHandle> {
    Ok(load_dataset(&ckpt.config.dataset.with_split(Split::Test))?)
}

fn parse_archs(archs: &[String]) -> Result<Vec<Arch>> {
    archs
        .iter()
        .map(|a| a.trim().parse::<Arch>().map_err(|e| config_error(format!("--archs {a:?}: {e}"))))
        .collect()
}

pub fn deploy(out: &Path, config: Option<&Path>, ov: &Overrides, checkpoint: &Path, archs: Option<&[String]>, force: bool) -> Result<()> {
    let s = load_settings(config, ov)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let archs = match archs {
        Some(a) => parse_archs(a)?,
        None => vec![s.deploy.arch],
    };
    let test = test_split(&ckpt)?;
    let dir = plan_dir(out, "deploy", &s, json!({ "checkpoint": ckpt.blob_sha256, "archs": archs }))?;
    let mut failures = Vec::new();
    for &arch in &archs {
        let cell = format!("arch={arch}");
        for &seed in &s.seeds {
            if done(&dir, &cell, seed, force) {
                continue;
            }
            let cfg = DeployConfig { arch, seed, ..s.deploy.clone() };
            match deploy_train(&ckpt, &cfg, &test) {
                Ok(r) => {
                    let mut row = with_deploy(base_row("deploy", &cell, "arch", arch.as_str(), &ckpt.config, &cfg, seed)?, &r);
                    row.checkpoint = checkpoint.display().to_string();
                    write_row(&dir, &row)?;
                }
                Err(e) => {
                    log::error!("{cell} seed {seed}: {e:#}");
                    failures.push(format!("{cell} seed {seed}: {e:#}"));
                }
            }
        }
    }
    finish(&dir, failures)
}

pub const AXES: [&str; 8] = ["lambda", "batch_size", "noise_dim", "n_epochs", "strategy", "pool", "inpc", "arch"];

/// Settings with `axis` set to `value`; pool values join architectures with `+`.
pub fn apply_axis(s: &Settings, axis: &str, value: &str) -> Result<Settings> {
    let mut s = s.clone();
    let bad = |e: &dyn std::fmt::Display| config_error(format!("--axis {axis} value {value:?}: {e}"));
    let v = value.trim();
    match axis {
        "lambda" => s.distill.lambda = v.parse().map_err(|e| bad(&e))?,
        "batch_size" => s.distill.batch_size = v.parse().map_err(|e| bad(&e))?,
        "noise_dim" => s.distill.noise_dim = v.parse().map_err(|e| bad(&e))?,
        "n_epochs" => s.distill.n_epochs = v.parse().map_err(|e| bad(&e))?,
        "strategy" => s.distill.strategy = v.parse().map_err(|e| bad(&e))?,
        "pool" => s.distill.pool.entries = parse_pool(v)?,
        "inpc" => s.deploy.inpc = v.parse().map_err(|e| bad(&e))?,
        "arch" => s.deploy.arch = v.parse().map_err(|e| bad(&e))?,
        _ => bail!(config_error(format!("unknown axis {axis:?}; expected one of {}", AXES.join(", ")))),
    }
    s.validate()?;
    Ok(s)
}

pub fn ablate(out: &Path, config: Option<&Path>, ov: &Overrides, axis: &str, values: &[String], resume: bool, force: bool) -> Result<()> {
    let s = load_settings(config, ov)?;
    if values.is_empty() {
        bail!(config_error("--values needs at least one value"));
    }
    let cells: Vec<(String, Settings)> = values
        .iter()
        .map(|v| Ok((v.trim().to_string(), apply_axis(&s, axis, v)?)))
        .collect::<Result<_>>()?;
    let dir = plan_dir(out, "ablate", &s, json!({ "axis": axis, "values": values }))?;
    let mut failures = Vec::new();
    for (value, cs) in &cells {
        let cell = format!("{axis}={value}");
        for &seed in &s.seeds {
            if done(&dir, &cell, seed, force) {
                continue;
            }
            let outcome = (|| -> Result<ResultRow> {
                let d = DistillConfig { seed, ..cs.distill.clone() };
                let ck_dir = out.join("checkpoints").join(format!("{}-seed{seed}", &d.hash()?[..12]));
                let ckpt = run_distill(&d, &ck_dir, resume || !force)?;
                let p = DeployConfig { seed, ..cs.deploy.clone() };
                let r = deploy_train(&ckpt, &p, &test_split(&ckpt)?)?;
                let mut row = with_deploy(base_row("ablate", &cell, axis, value, &d, &p, seed)?, &r);
                row.checkpoint = ck_dir.join(CHECKPOINT_DIR).display().to_string();
                Ok(row)
            })();
            match outcome {
                Ok(row) => write_row(&dir, &row)?,
                Err(e) => {
                    log::error!("{cell} seed {seed}: {e:#}");
                    failures.push(format!("{cell} seed {seed}: {e:#}"));
                }
            }
        }
    }
    finish(&dir, failures)
}

#[allow(clippy::too_many_arguments)]
pub fn profile(
    out: &Path,
    config: Option<&Path>,
    ov: &Overrides,
    checkpoint: Option<&Path>,
    archs: &[String],
    batch: usize,
    warmup: usize,
    repetitions: usize,
) -> Result<()> {
    let s = load_settings(config, ov)?;
    let archs = parse_archs(archs)?;
    let ckpt = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => GeneratorCheckpoint::initial(&s.distill)?,
    };
    let dir = plan_dir(
        out,
        "profile",
        &s,
        json!({ "checkpoint": ckpt.blob_sha256, "archs": archs, "batch": batch, "warmup": warmup, "repetitions": repetitions }),
    )?;
    let opts = EffortOptions {
        warmup,
        repetitions,
        ..EffortOptions::default()
    };
    let mut failures = Vec::new();
    for &arch in &archs {
        let cell = format!("arch={arch}");
        if done(&dir, &cell, 0, false) {
            continue;
        }
        match measure_effort(&ckpt, arch, batch, &opts) {
            Ok(e) => {
                let p = DeployConfig { arch, ..s.deploy.clone() };
                let mut row = base_row("profile", &cell, "arch", arch.as_str(), &ckpt.config, &p, 0)?;
                row.batch_size = batch;
                row.gen_ms = Some(e.gen_ms);
                row.train_ms = Some(e.train_ms);
                row.ratio = Some(e.ratio);
                row.hardware = e.hardware;
                row.checkpoint = checkpoint.map(|p| p.display().to_string()).unwrap_or_default();
                write_row(&dir, &row)?;
            }
            Err(e) => failures.push(format!("{cell}: {e:#}")),
        }
    }
    finish(&dir, failures)
}

pub fn report(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!(config_error(format!("{} is not a run directory", dir.display())));
    }
    let rows = read_rows(dir)?;
    if rows.is_empty() {
        return Err(anyhow!(config_error(format!("{} holds no cell results", dir.display()))));
    }
    finish(dir, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_values_apply_and_validate() {
        let s = load_settings(None, &Overrides::default()).unwrap();
        assert_eq!(apply_axis(&s, "lambda", "0.1").unwrap().distill.lambda, 0.1);
        assert_eq!(apply_axis(&s, "pool", "convnet3+resnet10").unwrap().distill.pool.entries.len(), 2);
        assert_eq!(apply_axis(&s, "inpc", "50").unwrap().deploy.inpc, 50);
        assert!(apply_axis(&s, "lambda", "-1").is_err());
        assert!(apply_axis(&s, "gamma", "1").is_err());
    }
}
