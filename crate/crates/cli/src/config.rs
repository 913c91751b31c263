//! TOML experiment files merged over library defaults, then overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dim_core::datasets::{DatasetName, DatasetSpec, ImageShape, Split, ToyParams};
use dim_core::deploy::DeployConfig;
use dim_core::distill::DistillConfig;
use dim_core::models::Arch;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Environment variable naming the directory that holds the canonical datasets.
pub const DATA_ROOT_ENV: &str = "DIM_DATA_ROOT";

/// A configuration problem that maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySection {
    #[serde(default = "ToySection::default_classes")]
    pub num_classes: usize,
    #[serde(default = "ToySection::default_per_class")]
    pub per_class: usize,
    #[serde(default = "ToySection::default_channels")]
    pub channels: usize,
    #[serde(default = "ToySection::default_side")]
    pub side: usize,
    #[serde(default = "ToySection::default_separation")]
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ToySection {
    fn default_classes() -> usize {
        10
    }
    fn default_per_class() -> usize {
        50
    }
    fn default_channels() -> usize {
        1
    }
    fn default_side() -> usize {
        8
    }
    fn default_separation() -> f64 {
        10.0
    }
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            num_classes: Self::default_classes(),
            per_class: Self::default_per_class(),
            channels: Self::default_channels(),
            side: Self::default_side(),
            separation: Self::default_separation(),
            seed: 0,
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub dataset: DatasetSpec,
    pub distill: DistillConfig,
    pub deploy: DeployConfig,
    pub seeds: Vec<u64>,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub data_root: Option<PathBuf>,
    pub inpc: Option<usize>,
    pub arch: Option<String>,
    pub strategy: Option<String>,
    pub lambda: Option<f64>,
    pub batch_size: Option<usize>,
    pub noise_dim: Option<usize>,
    pub n_epochs: Option<usize>,
    pub q_epochs: Option<usize>,
    pub deploy_epochs: Option<usize>,
    pub pool: Option<String>,
    pub seeds: Option<Vec<u64>>,
}

fn line_of(text: &str, section: &str, key: &str) -> usize {
    let header = format!("[{section}]");
    let mut in_section = section.is_empty();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            in_section = t == header;
            continue;
        }
        if in_section && t.split('=').next().map(str::trim) == Some(key) {
            return i + 1;
        }
    }
    0
}

fn location(path: &Path, text: &str, section: &str, key: &str) -> String {
    match line_of(text, section, key) {
        0 => format!("{}", path.display()),
        n => format!("{}:{n}", path.display()),
    }
}

/// Optional fields, absent from serialized defaults when unset.
const OPTIONAL_KEYS: &[&str] = &["width"];

fn overlay(base: &mut Table, user: &Table, section: &str, path: &Path, text: &str) -> Result<()> {
    for (k, v) in user {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => overlay(b, u, &format!("{section}.{k}"), path, text)?,
            (Some(_), _) => {
                base.insert(k.clone(), v.clone());
            }
            (None, _) if OPTIONAL_KEYS.contains(&k.as_str()) => {
                base.insert(k.clone(), v.clone());
            }
            (None, _) => bail!(config_error(format!(
                "{}: unknown key `{k}` in [{section}]",
                location(path, text, section, k)
            ))),
        }
    }
    Ok(())
}

/// Overlays `user` on the serialized defaults, rejecting keys the defaults do not have.
fn merge<T: Serialize + for<'de> Deserialize<'de>>(
    defaults: &T,
    user: Option<&Value>,
    section: &str,
    skip: &[&str],
    path: &Path,
    text: &str,
) -> Result<T> {
    let mut base = Table::try_from(defaults).context("serializing defaults")?;
    if let Some(user) = user {
        let Value::Table(user) = user else {
            bail!(config_error(format!("{}: [{section}] must be a table", path.display())));
        };
        if let Some(k) = user.keys().find(|k| skip.contains(&k.as_str())) {
            bail!(config_error(format!(
                "{}: `{k}` cannot be set in [{section}]",
                location(path, text, section, k)
            )));
        }
        overlay(&mut base, user, section, path, text)?;
    }
    Value::Table(base).try_into().map_err(|e: toml::de::Error| {
        config_error(format!("{}: invalid [{section}] section: {}", path.display(), e.message()))
    })
}

fn dataset_spec(name: DatasetName, root: &Path, toy: &ToySection) -> Result<DatasetSpec> {
    if name == DatasetName::Toy {
        let params = ToyParams::new(
            toy.num_classes,
            toy.per_class,
            ImageShape::new(toy.channels, toy.side, toy.side),
            toy.separation,
            toy.seed,
        );
        params.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(DatasetSpec::toy(params, Split::Train))
    } else {
        DatasetSpec::standard(name, Split::Train, root).map_err(|e| config_error(e.to_string()))
    }
}

fn parse_flag<T: std::str::FromStr>(flag: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| config_error(format!("--{flag} {v:?}: {e}")))
}

pub fn parse_pool(v: &str) -> Result<Vec<Arch>> {
    v.split([',', '+'])
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_flag("pool", s.trim()))
        .collect()
}

/// Reads `path` (if any), merges it over the defaults and applies `ov`.
pub fn load_settings(path: Option<&Path>, ov: &Overrides) -> Result<Settings> {
    let (text, table) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_error(format!("{}: cannot read config: {e}", p.display())))?;
            let table: Table = text
                .parse()
                .map_err(|e: toml::de::Error| config_error(format!("{}: {e}", p.display())))?;
            (text, table)
        }
        None => (String::new(), Table::new()),
    };
    let path = path.unwrap_or(Path::new("<flags>"));
    for k in table.keys() {
        if !["dataset", "distill", "deploy", "experiment"].contains(&k.as_str()) {
            bail!(config_error(format!("{}: unknown section `{k}`", location(path, &text, "", k))));
        }
    }

    let ds = table.get("dataset").and_then(Value::as_table).cloned().unwrap_or_default();
    for k in ds.keys() {
        if !["name", "root", "toy"].contains(&k.as_str()) {
            bail!(config_error(format!(
                "{}: unknown key `{k}` in [dataset]",
                location(path, &text, "dataset", k)
            )));
        }
    }
    let name_str = ov
        .dataset
        .clone()
        .or_else(|| ds.get("name").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| "toy".to_string());
    let name: DatasetName = parse_flag("dataset", &name_str)?;
    let root = ov
        .data_root
        .clone()
        .or_else(|| ds.get("root").and_then(Value::as_str).map(PathBuf::from))
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let toy: ToySection = match ds.get("toy") {
        Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| {
            config_error(format!(
                "{}: invalid [dataset.toy]: {}",
                location(path, &text, "dataset.toy", ""),
                e.message()
            ))
        })?,
        None => ToySection::default(),
    };
    let dataset = dataset_spec(name, &root, &toy)?;

    let mut distill = merge(
        &DistillConfig::new(dataset.clone()),
        table.get("distill"),
        "distill",
        &["dataset"],
        path,
        &text,
    )?;
    let arch_default: Arch = ov.arch.as_deref().map(|a| parse_flag("arch", a)).transpose()?.unwrap_or(Arch::Convnet3);
    let mut deploy = merge(&DeployConfig::new(10, arch_default), table.get("deploy"), "deploy", &[], path, &text)?;

    let seeds = match table.get("experiment") {
        Some(Value::Table(t)) => {
            for k in t.keys() {
                if k != "seeds" {
                    bail!(config_error(format!(
                        "{}: unknown key `{k}` in [experiment]",
                        location(path, &text, "experiment", k)
                    )));
                }
            }
            match t.get("seeds") {
                Some(v) => v.clone().try_into::<Vec<u64>>().map_err(|e| {
                    config_error(format!(
                        "{}: seeds must be a list of non-negative integers: {}",
                        location(path, &text, "experiment", "seeds"),
                        e.message()
                    ))
                })?,
                None => vec![0, 1, 2],
            }
        }
        Some(_) => bail!(config_error(format!("{}: [experiment] must be a table", path.display()))),
        None => vec![0, 1, 2],
    };

    if let Some(v) = ov.inpc {
        deploy.inpc = v;
    }
    if let Some(a) = &ov.arch {
        deploy.arch = parse_flag("arch", a)?;
    }
    if let Some(v) = ov.deploy_epochs {
        deploy.epochs = v;
    }
    if let Some(s) = &ov.strategy {
        distill.strategy = parse_flag("strategy", s)?;
    }
    if let Some(v) = ov.lambda {
        distill.lambda = v;
    }
    if let Some(v) = ov.batch_size {
        distill.batch_size = v;
    }
    if let Some(v) = ov.noise_dim {
        distill.noise_dim = v;
    }
    if let Some(v) = ov.n_epochs {
        distill.n_epochs = v;
    }
    if let Some(v) = ov.q_epochs {
        distill.q_epochs = v;
    }
    if let Some(p) = &ov.pool {
        distill.pool.entries = parse_pool(p)?;
    }
    let seeds = ov.seeds.clone().unwrap_or(seeds);
    if seeds.is_empty() {
        bail!(config_error("at least one seed is required"));
    }
    distill.dataset = dataset.clone();
    let settings = Settings {
        dataset,
        distill,
        deploy,
        seeds,
    };
    settings.validate()?;
    Ok(settings)
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.distill.validate().map_err(|e| config_error(e.to_string()))?;
        self.deploy.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.toml");
        std::fs::write(&p, text).unwrap();
        (dir, p)
    }

    #[test]
    fn defaults_without_file() {
        let s = load_settings(None, &Overrides::default()).unwrap();
        assert_eq!(s.distill.n_epochs, 120);
        assert_eq!(s.seeds, vec![0, 1, 2]);
        assert_eq!(s.dataset.num_classes, 10);
    }

    #[test]
    fn file_then_flags() {
        let (_d, p) = write("[distill]\nlambda = 0.1\nn_epochs = 3\n\n[deploy]\ninpc = 5\n\n[experiment]\nseeds = [7]\n");
        let ov = Overrides {
            lambda: Some(1.0),
            ..Default::default()
        };
        let s = load_settings(Some(&p), &ov).unwrap();
        assert_eq!(s.distill.lambda, 1.0);
        assert_eq!(s.distill.n_epochs, 3);
        assert_eq!(s.deploy.inpc, 5);
        assert_eq!(s.seeds, vec![7]);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let (_d, p) = write("[distill]\nlambda = 0.1\nlamda = 0.2\n");
        let e = load_settings(Some(&p), &Overrides::default()).unwrap_err();
        assert!(e.is::<ConfigError>());
        assert!(e.to_string().contains("exp.toml:3"), "{e}");
    }
}
