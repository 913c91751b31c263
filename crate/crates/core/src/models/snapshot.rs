//! One binary parameter blob per model plus a JSON sidecar describing how to rebuild it.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::classifier::{build_classifier_with, Classifier, ClassifierConfig};
use super::generator::{build_generator_with, Generator, GeneratorConfig};
use crate::atomic::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::nn::params::TensorRecord;
use crate::nn::ParamStore;

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Generator { config: GeneratorConfig },
    Classifier { config: ClassifierConfig, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub format_version: u32,
    pub model: ModelDescriptor,
    /// "f32" or "f64", little endian, tensors concatenated in `tensors` order.
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
    pub blob_sha256: String,
}

fn dtype_name(d: DType) -> &'static str {
    if d == DType::F64 {
        "f64"
    } else {
        "f32"
    }
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

fn write(dir: &Path, name: &str, model: ModelDescriptor, store: &ParamStore) -> Result<SnapshotManifest> {
    let blob = store.to_bytes()?;
    let manifest = SnapshotManifest {
        format_version: SNAPSHOT_VERSION,
        model,
        dtype: dtype_name(store.dtype()).to_string(),
        tensors: store.records(),
        blob_sha256: sha256_hex(&blob),
    };
    let (bin, json) = paths(dir, name);
    write_atomic(&bin, &blob)?;
    write_atomic(&json, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

fn read(dir: &Path, name: &str) -> Result<(SnapshotManifest, Vec<u8>)> {
    let (bin, json) = paths(dir, name);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: SnapshotManifest =
        serde_json::from_str(&text).map_err(|e| Error::checkpoint(&json, format!("invalid manifest: {e}")))?;
    if manifest.format_version != SNAPSHOT_VERSION {
        return Err(Error::checkpoint(
            &json,
            format!("format version {} is not supported (expected {SNAPSHOT_VERSION})", manifest.format_version),
        ));
    }
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::checkpoint(&bin, "parameter blob does not match its recorded sha256"));
    }
    Ok((manifest, blob))
}

fn restore(store: &ParamStore, manifest: &SnapshotManifest, blob: &[u8], path: &Path) -> Result<()> {
    if store.records() != manifest.tensors {
        return Err(Error::checkpoint(path, "tensor layout differs from the rebuilt model"));
    }
    store.load_bytes(blob).map_err(|e| Error::checkpoint(path, e.to_string()))
}

fn dtype_of(manifest: &SnapshotManifest) -> DType {
    if manifest.dtype == "f64" {
        DType::F64
    } else {
        DType::F32
    }
}

pub fn save_classifier(c: &Classifier, dir: &Path, name: &str) -> Result<SnapshotManifest> {
    let model = ModelDescriptor::Classifier {
        config: c.config().clone(),
        seed: c.seed(),
    };
    write(dir, name, model, c.store())
}

pub fn load_classifier(dir: &Path, name: &str) -> Result<Classifier> {
    let (manifest, blob) = read(dir, name)?;
    let ModelDescriptor::Classifier { config, seed } = &manifest.model else {
        return Err(Error::checkpoint(dir.join(name), "snapshot does not hold a classifier"));
    };
    let c = build_classifier_with(config, *seed, dtype_of(&manifest))?;
    restore(c.store(), &manifest, &blob, &dir.join(name))?;
    Ok(c)
}

pub fn save_generator(g: &Generator, dir: &Path, name: &str) -> Result<SnapshotManifest> {
    let model = ModelDescriptor::Generator {
        config: g.config().clone(),
    };
    write(dir, name, model, g.store())
}

pub fn load_generator(dir: &Path, name: &str) -> Result<Generator> {
    let (manifest, blob) = read(dir, name)?;
    let ModelDescriptor::Generator { config } = &manifest.model else {
        return Err(Error::checkpoint(dir.join(name), "snapshot does not hold a generator"));
    };
    let g = build_generator_with(config, dtype_of(&manifest))?;
    restore(g.store(), &manifest, &blob, &dir.join(name))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::ImageShape;
    use crate::models::classifier::Arch;

    #[test]
    fn classifier_roundtrip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ClassifierConfig::new(Arch::Resnet10, 4, ImageShape::new(1, 8, 8));
        cfg.width = Some(4);
        let c = build_classifier_with(&cfg, 5, DType::F32).unwrap();
        let m = save_classifier(&c, dir.path(), "clf").unwrap();
        assert!(m.tensors.iter().any(|t| t.name.starts_with("layer1.0")));
        let back = load_classifier(dir.path(), "clf").unwrap();
        assert_eq!(back.store().to_bytes().unwrap(), c.store().to_bytes().unwrap());
        let bin = dir.path().join("clf.bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_classifier(dir.path(), "clf"), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn generator_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            noise_dim: 4,
            num_classes: 2,
            image_shape: ImageShape::new(1, 8, 8),
            base_width: 3,
            seed: 1,
        };
        let g = build_generator_with(&cfg, DType::F32).unwrap();
        save_generator(&g, dir.path(), "gen").unwrap();
        assert!(load_classifier(dir.path(), "gen").is_err());
        let back = load_generator(dir.path(), "gen").unwrap();
        assert_eq!(back.store().digest().unwrap(), g.store().digest().unwrap());
    }
}
