//! On-disk generator checkpoints and the trainer state needed to resume a run.
//!
//! A checkpoint directory holds `manifest.json`, `generator.bin` and, when written from a
//! live training state, `trainer.json` plus `trainer.bin` with the discriminator and both
//! optimizers.

use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::{DistillConfig, DistillState};
use crate::atomic::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::models::{build_generator_with, Generator, GeneratorConfig};
use crate::nn::optim::Adam;
use crate::nn::params::{tensors_from_bytes, tensors_to_bytes, TensorRecord};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;
pub(super) const MANIFEST: &str = "manifest.json";
const GENERATOR_BLOB: &str = "generator.bin";
const TRAINER_MANIFEST: &str = "trainer.json";
const TRAINER_BLOB: &str = "trainer.bin";

const DETERMINISM: &str = "bitwise reproducible for a fixed seed, configuration, build and single-threaded CPU execution";

/// A trained generator with the provenance needed to reproduce or resume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCheckpoint {
    pub format_version: u32,
    pub generator: GeneratorConfig,
    pub config: DistillConfig,
    /// sha256 of the JSON-encoded `config`.
    pub config_hash: String,
    pub epochs_completed: usize,
    /// Hash chain over every LossReport of the run.
    pub loss_digest: String,
    pub tensors: Vec<TensorRecord>,
    pub blob_sha256: String,
    pub determinism: String,
    /// Raw parameter blob in `tensors` order (f32 little endian).
    #[serde(skip)]
    pub params: Vec<u8>,
}

impl GeneratorCheckpoint {
    pub(super) fn from_state(state: &DistillState) -> Result<Self> {
        let params = state.generator.store().to_bytes()?;
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            generator: state.generator.config().clone(),
            config: state.config.clone(),
            config_hash: state.config.hash()?,
            epochs_completed: state.epochs_completed,
            loss_digest: state.loss_digest.clone(),
            tensors: state.generator.store().records(),
            blob_sha256: sha256_hex(&params),
            determinism: DETERMINISM.to_string(),
            params,
        })
    }

    /// The freshly initialized generator of `config`, as if no epoch had run.
    pub fn initial(config: &DistillConfig) -> Result<Self> {
        config.validate()?;
        let g = build_generator_with(&config.generator_config(), DType::F32)?;
        let params = g.store().to_bytes()?;
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            generator: g.config().clone(),
            config: config.clone(),
            config_hash: config.hash()?,
            epochs_completed: 0,
            loss_digest: super::genesis_digest(),
            tensors: g.store().records(),
            blob_sha256: sha256_hex(&params),
            determinism: DETERMINISM.to_string(),
            params,
        })
    }

    /// Rebuilds the generator with the stored parameters.
    pub fn generator(&self) -> Result<Generator> {
        let g = build_generator_with(&self.generator, DType::F32)?;
        if g.store().records() != self.tensors {
            return Err(Error::checkpoint(GENERATOR_BLOB, "tensor layout differs from the rebuilt generator"));
        }
        g.store().load_bytes(&self.params)?;
        Ok(g)
    }

    /// Writes `manifest.json` and `generator.bin` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(GENERATOR_BLOB), &self.params)?;
        write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Persists the generator, and the discriminator plus optimizer moments, into `dir`.
pub fn save_checkpoint(state: &DistillState, dir: &Path) -> Result<GeneratorCheckpoint> {
    super::count_call();
    let ckpt = state.checkpoint()?;
    TrainerState::capture(state)?.write(dir)?;
    ckpt.write(dir)?;
    Ok(ckpt)
}

/// Reads and verifies a checkpoint written by [`save_checkpoint`] or [`GeneratorCheckpoint::write`].
pub fn load_checkpoint(dir: &Path) -> Result<GeneratorCheckpoint> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut ckpt: GeneratorCheckpoint =
        serde_json::from_str(&text).map_err(|e| Error::checkpoint(&mpath, format!("invalid manifest: {e}")))?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(
            &mpath,
            format!("format version {} is not supported (expected {CHECKPOINT_VERSION})", ckpt.format_version),
        ));
    }
    if ckpt.config.hash()? != ckpt.config_hash {
        return Err(Error::checkpoint(&mpath, "config hash does not match the recorded configuration"));
    }
    let bpath = dir.join(GENERATOR_BLOB);
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if sha256_hex(&blob) != ckpt.blob_sha256 {
        return Err(Error::checkpoint(&bpath, "parameter blob does not match its recorded sha256"));
    }
    let expected: usize = ckpt.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * 4;
    if blob.len() != expected {
        return Err(Error::checkpoint(&bpath, format!("blob has {} bytes, manifest implies {expected}", blob.len())));
    }
    ckpt.params = blob;
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerManifest {
    format_version: u32,
    epochs_completed: usize,
    generator_steps: u64,
    discriminator_steps: u64,
    discriminator_bytes: usize,
    generator_moment_bytes: usize,
    blob_sha256: String,
}

/// Discriminator parameters and both optimizers' moments.
pub struct TrainerState {
    manifest: TrainerManifest,
    blob: Vec<u8>,
}

fn moment_shapes(store: &ParamStore) -> Vec<Vec<usize>> {
    let shapes: Vec<Vec<usize>> = store.trainable().iter().map(|v| v.dims().to_vec()).collect();
    shapes.iter().chain(&shapes).cloned().collect()
}

fn restore_adam(opt: &mut Adam, store: &ParamStore, bytes: &[u8], steps: u64, path: &Path) -> Result<()> {
    let (tensors, used) = tensors_from_bytes(bytes, &moment_shapes(store), store.dtype(), &Device::Cpu)?;
    if used != bytes.len() {
        return Err(Error::checkpoint(path, "optimizer moments have trailing bytes"));
    }
    opt.restore(steps, tensors)
}

impl TrainerState {
    fn capture(state: &DistillState) -> Result<Self> {
        let disc = state.discriminator.store().to_bytes()?;
        let gen_m = tensors_to_bytes(&state.gen_opt.state_tensors())?;
        let disc_m = tensors_to_bytes(&state.disc_opt.state_tensors())?;
        let mut blob = disc.clone();
        blob.extend_from_slice(&gen_m);
        blob.extend_from_slice(&disc_m);
        Ok(Self {
            manifest: TrainerManifest {
                format_version: CHECKPOINT_VERSION,
                epochs_completed: state.epochs_completed,
                generator_steps: state.gen_opt.steps(),
                discriminator_steps: state.disc_opt.steps(),
                discriminator_bytes: disc.len(),
                generator_moment_bytes: gen_m.len(),
                blob_sha256: sha256_hex(&blob),
            },
            blob,
        })
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(TRAINER_BLOB), &self.blob)?;
        write_atomic(&dir.join(TRAINER_MANIFEST), serde_json::to_string_pretty(&self.manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(TRAINER_MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: TrainerManifest =
            serde_json::from_str(&text).map_err(|e| Error::checkpoint(&mpath, format!("invalid trainer manifest: {e}")))?;
        let bpath = dir.join(TRAINER_BLOB);
        let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if sha256_hex(&blob) != manifest.blob_sha256 {
            return Err(Error::checkpoint(&bpath, "trainer blob does not match its recorded sha256"));
        }
        Ok(Self { manifest, blob })
    }

    pub(super) fn restore(&self, state: &mut DistillState) -> Result<()> {
        let m = &self.manifest;
        let path = Path::new(TRAINER_BLOB);
        let (a, b) = (m.discriminator_bytes, m.discriminator_bytes + m.generator_moment_bytes);
        if b > self.blob.len() {
            return Err(Error::checkpoint(path, "trainer blob is truncated"));
        }
        state
            .discriminator
            .store()
            .load_bytes(&self.blob[..a])
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        let gstore = state.generator.store().clone();
        restore_adam(&mut state.gen_opt, &gstore, &self.blob[a..b], m.generator_steps, path)?;
        let dstore = state.discriminator.store().clone();
        restore_adam(&mut state.disc_opt, &dstore, &self.blob[b..], m.discriminator_steps, path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::tests::toy_config;

    #[test]
    fn roundtrip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = DistillState::new(toy_config()).unwrap();
        state.run_epoch(0).unwrap();
        let saved = save_checkpoint(&state, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, saved);
        assert_eq!(back.generator().unwrap().store().digest().unwrap(), state.generator.store().digest().unwrap());

        let bin = dir.path().join(GENERATOR_BLOB);
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[3] ^= 0x10;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint { .. })));
    }
}
