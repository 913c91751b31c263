//! Two-phase generator training: adversarial epochs, then adversarial plus matching epochs.

mod checkpoint;

use std::cell::Cell;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{load_dataset, sample_real_batch_with, DatasetHandle, DatasetSpec, LabelVector, LabeledImageBatch, Split};
use crate::error::{config_err, Error, Result};
use crate::matching::{
    discriminator_loss, generator_loss, matching_loss, total_loss, GanLossKind, LossLog, LossReport, MatchStrategy,
};
use crate::models::{
    build_discriminator_with, build_generator_with, pool_select, Arch, Classifier, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, ModelsPool, NoiseBatch, PoolSpec,
};
use crate::nn::functional::scalar;
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::Mode;
use crate::seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, GeneratorCheckpoint, TrainerState, CHECKPOINT_VERSION};

thread_local! {
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

fn count_call() {
    CALLS.with(|c| c.set(c.get() + 1));
}

/// Number of calls into this module's operations on the current thread.
pub fn invocation_count() -> usize {
    CALLS.with(|c| c.get())
}

pub fn reset_invocation_count() {
    CALLS.with(|c| c.set(0));
}

/// Consecutive non-finite iterations tolerated before a run aborts.
pub const MAX_BAD_ITERATIONS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Adversarial-only epochs (N).
    pub n_epochs: usize,
    /// Joint adversarial plus matching epochs (Q).
    pub q_epochs: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub pool: PoolSpec,
    pub strategy: MatchStrategy,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub d_steps_per_g_step: usize,
    pub gan_loss_kind: GanLossKind,
}

impl DistillConfig {
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            n_epochs: 120,
            q_epochs: 80,
            lambda: 0.01,
            batch_size: 64,
            noise_dim: 100,
            gen_lr: 1e-4,
            disc_lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            pool: PoolSpec::default(),
            strategy: MatchStrategy::Logits,
            seed: 0,
            dataset,
            generator_width: 196,
            discriminator_width: 64,
            d_steps_per_g_step: 1,
            gan_loss_kind: GanLossKind::NonSaturating,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.n_epochs + self.q_epochs
    }

    /// J = ⌈|train| / B⌉
    pub fn iterations_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.batch_size).max(1)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            noise_dim: self.noise_dim,
            num_classes: self.dataset.num_classes,
            image_shape: self.dataset.image_shape,
            base_width: self.generator_width,
            seed: self.seed,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            num_classes: self.dataset.num_classes,
            image_shape: self.dataset.image_shape,
            base_width: self.discriminator_width,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(config_err!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if self.batch_size < 1 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.d_steps_per_g_step < 1 {
            return Err(config_err!("d_steps_per_g_step must be at least 1"));
        }
        for (name, lr) in [("gen_lr", self.gen_lr), ("disc_lr", self.disc_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(config_err!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if self.strategy != MatchStrategy::None && self.q_epochs > 0 && self.pool.entries.is_empty() {
            return Err(config_err!("the models pool is empty but strategy is {}", self.strategy));
        }
        self.dataset.validate()?;
        self.generator_config().validate()?;
        Ok(())
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Gan,
    Joint,
}

/// What happened during one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub phase: Phase,
    pub iterations: usize,
    pub arch: Option<Arch>,
    pub pool_index: Option<usize>,
    /// Parameter digest of the matcher before and after the epoch.
    pub matcher_digest: Option<(String, String)>,
    pub mean_l_g: f64,
    pub mean_l_d: f64,
    pub mean_l_m: f64,
    pub skipped_iterations: usize,
}

/// Mutable training state owned by one loop.
pub struct DistillState {
    pub config: DistillConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    gen_opt: Adam,
    disc_opt: Adam,
    dataset: DatasetHandle,
    pool: Option<ModelsPool>,
    pub epochs_completed: usize,
    loss_digest: String,
    history: Vec<LossReport>,
    log: Option<LossLog>,
    bad_streak: usize,
}

fn genesis_digest() -> String {
    hex::encode(Sha256::digest(b""))
}

impl DistillState {
    /// Fresh state: seeded generator and discriminator, zeroed optimizer moments.
    pub fn new(config: DistillConfig) -> Result<Self> {
        count_call();
        config.validate()?;
        let dataset = load_dataset(&config.dataset.with_split(Split::Train))?;
        Self::with_dataset(config, dataset)
    }

    /// Like [`DistillState::new`] with an already loaded training split.
    pub fn with_dataset(config: DistillConfig, dataset: DatasetHandle) -> Result<Self> {
        count_call();
        config.validate()?;
        if dataset.num_classes() != config.dataset.num_classes || dataset.image_shape() != config.dataset.image_shape {
            return Err(config_err!("training split does not match the dataset spec"));
        }
        if dataset.is_empty() {
            return Err(config_err!("training split is empty"));
        }
        let generator = build_generator_with(&config.generator_config(), DType::F32)?;
        let discriminator = build_discriminator_with(&config.discriminator_config(), DType::F32)?;
        let adam = |lr| AdamConfig {
            lr,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            ..AdamConfig::default()
        };
        let gen_opt = Adam::new(generator.store().trainable(), adam(config.gen_lr))?;
        let disc_opt = Adam::new(discriminator.store().trainable(), adam(config.disc_lr))?;
        let pool = if config.q_epochs > 0 && config.strategy != MatchStrategy::None {
            Some(ModelsPool::new(
                config.pool.clone(),
                config.dataset.num_classes,
                config.dataset.image_shape,
                seed::derive(config.seed, &[seed::stream::POOL_CHOICE]),
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            dataset,
            pool,
            epochs_completed: 0,
            loss_digest: genesis_digest(),
            history: Vec::new(),
            log: None,
            bad_streak: 0,
        })
    }

    pub fn dataset(&self) -> &DatasetHandle {
        &self.dataset
    }

    pub fn pool(&self) -> Option<&ModelsPool> {
        self.pool.as_ref()
    }

    /// Every LossReport produced by this state, in order.
    pub fn history(&self) -> &[LossReport] {
        &self.history
    }

    /// Hash chain over the serialized LossReports.
    pub fn loss_digest(&self) -> &str {
        &self.loss_digest
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.config.iterations_per_epoch(self.dataset.len())
    }

    /// Streams every subsequent LossReport to `log`.
    pub fn attach_log(&mut self, log: LossLog) {
        self.log = Some(log);
    }

    fn record(&mut self, report: LossReport) -> Result<()> {
        let mut h = Sha256::new();
        h.update(self.loss_digest.as_bytes());
        h.update(serde_json::to_vec(&report)?);
        self.loss_digest = hex::encode(h.finalize());
        if let Some(log) = self.log.as_mut() {
            log.append(&report)?;
        }
        self.history.push(report);
        Ok(())
    }

    /// Snapshot of the generator and its provenance.
    pub fn checkpoint(&self) -> Result<GeneratorCheckpoint> {
        GeneratorCheckpoint::from_state(self)
    }

    /// Runs epoch `epoch`, choosing the phase from the schedule.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochSummary> {
        if epoch < self.config.n_epochs {
            train_epoch_gan(self, epoch)
        } else {
            train_epoch_joint(self, epoch)
        }
    }

    fn batch_inputs(&self, rng: &mut ChaCha8Rng) -> Result<(LabelVector, NoiseBatch, LabeledImageBatch)> {
        let b = self.config.batch_size;
        let labels = LabelVector::uniform(b, self.config.dataset.num_classes, rng)?;
        let noise = NoiseBatch::sample(b, self.config.noise_dim, rng, DType::F32)?;
        let real = sample_real_batch_with(&self.dataset, &labels, rng)?;
        Ok((labels, noise, real))
    }

    fn note_bad(&mut self, epoch: usize, iteration: usize, detail: String) -> Result<()> {
        self.bad_streak += 1;
        log::warn!("epoch {epoch} iteration {iteration}: {detail}; update skipped");
        if self.bad_streak >= MAX_BAD_ITERATIONS {
            return Err(Error::Numeric {
                epoch,
                iteration,
                detail: format!("{detail} ({} consecutive non-finite iterations)", self.bad_streak),
            });
        }
        Ok(())
    }

    /// One alternating update; returns `None` when the iteration was skipped.
    fn iteration(
        &mut self,
        epoch: usize,
        iteration: usize,
        rng: &mut ChaCha8Rng,
        matcher: Option<(&Classifier, Arch)>,
    ) -> Result<Option<LossReport>> {
        let (labels, noise, real) = self.batch_inputs(rng)?;
        let fake = self.generator.generate_with(&noise, &labels, Mode::TRAIN)?;

        let mut l_d_value = 0.0;
        let mut d_ok = true;
        for _ in 0..self.config.d_steps_per_g_step {
            let s_real = self.discriminator.forward(&real.images, &labels, Mode::TRAIN)?;
            let s_fake = self.discriminator.forward(&fake.images.detach(), &labels, Mode::TRAIN)?;
            let l_d = discriminator_loss(&s_real, &s_fake).map_err(|e| e.at(epoch, iteration))?;
            l_d_value = scalar(&l_d)?;
            if !l_d_value.is_finite() {
                d_ok = false;
                break;
            }
            let grads = l_d.backward()?;
            self.disc_opt.step(&grads)?;
        }

        let s_fake = self.discriminator.forward(&fake.images, &labels, Mode::FROZEN)?;
        let l_g = generator_loss(&s_fake).map_err(|e| e.at(epoch, iteration))?;
        let (l_m, arch) = match matcher {
            Some((clf, arch)) => (matching_loss(self.config.strategy, clf, &fake, &real)?, Some(arch)),
            None => (Tensor::zeros((), DType::F32, &Device::Cpu)?, None),
        };
        let lambda = if matcher.is_some() { self.config.lambda } else { 0.0 };
        let l_total = total_loss(&l_g, &l_m, lambda)?;
        let (g, m, t) = (scalar(&l_g)?, scalar(&l_m)?, scalar(&l_total)?);
        if !d_ok || !(g.is_finite() && m.is_finite() && t.is_finite()) {
            self.note_bad(
                epoch,
                iteration,
                format!("non-finite loss (l_d {l_d_value}, l_g {g}, l_m {m}, l_total {t})"),
            )?;
            return Ok(None);
        }
        self.bad_streak = 0;
        let grads = l_total.backward()?;
        self.gen_opt.step(&grads)?;
        let report = LossReport {
            epoch,
            iteration,
            l_g: g,
            l_d: l_d_value,
            l_m: m,
            l_total: t,
            strategy: self.config.strategy,
            arch,
        };
        self.record(report.clone())?;
        Ok(Some(report))
    }

    fn run_iterations(
        &mut self,
        epoch: usize,
        phase: Phase,
        matcher: Option<(&Classifier, Arch, usize)>,
    ) -> Result<EpochSummary> {
        let j = self.iterations_per_epoch();
        let mut rng = seed::rng(self.config.seed, &[seed::stream::DISTILL_EPOCH, epoch as u64]);
        let before = match matcher {
            Some((c, _, _)) => Some(c.store().digest()?),
            None => None,
        };
        let (mut sg, mut sd, mut sm, mut done) = (0.0, 0.0, 0.0, 0usize);
        for it in 0..j {
            if let Some(r) = self.iteration(epoch, it, &mut rng, matcher.map(|(c, a, _)| (c, a)))? {
                sg += r.l_g;
                sd += r.l_d;
                sm += r.l_m;
                done += 1;
            }
        }
        if let Some(log) = self.log.as_mut() {
            log.flush()?;
        }
        let after = match matcher {
            Some((c, _, _)) => Some(c.store().digest()?),
            None => None,
        };
        self.epochs_completed = epoch + 1;
        let n = done.max(1) as f64;
        let summary = EpochSummary {
            epoch,
            phase,
            iterations: j,
            arch: matcher.map(|m| m.1),
            pool_index: matcher.map(|m| m.2),
            matcher_digest: before.zip(after),
            mean_l_g: sg / n,
            mean_l_d: sd / n,
            mean_l_m: sm / n,
            skipped_iterations: j - done,
        };
        log::info!(
            "epoch {epoch} ({phase:?}): l_g {:.4} l_d {:.4} l_m {:.4}",
            summary.mean_l_g,
            summary.mean_l_d,
            summary.mean_l_m
        );
        Ok(summary)
    }
}

/// One adversarial-only epoch of J iterations; every report carries `l_m = 0`.
pub fn train_epoch_gan(state: &mut DistillState, epoch: usize) -> Result<EpochSummary> {
    count_call();
    if epoch >= state.config.n_epochs {
        return Err(config_err!("epoch {epoch} is not an adversarial-only epoch (N = {})", state.config.n_epochs));
    }
    state.run_iterations(epoch, Phase::Gan, None)
}

/// One joint epoch: the pool classifier chosen for `epoch` supplies the matching loss
/// for all J iterations and is never updated.
pub fn train_epoch_joint(state: &mut DistillState, epoch: usize) -> Result<EpochSummary> {
    count_call();
    let c = &state.config;
    if epoch < c.n_epochs || epoch >= c.total_epochs() {
        return Err(config_err!("epoch {epoch} is outside the joint phase [{}, {})", c.n_epochs, c.total_epochs()));
    }
    match state.pool.clone() {
        Some(pool) => {
            let sel = pool_select(&pool, epoch)?;
            let arch = sel.classifier.arch();
            state.run_iterations(epoch, Phase::Joint, Some((&sel.classifier, arch, sel.index)))
        }
        None => state.run_iterations(epoch, Phase::Joint, None),
    }
}

/// Where and how a run persists its artifacts.
#[derive(Debug, Clone, Default)]
pub struct DistillOptions {
    /// Directory receiving `checkpoint/` and `loss.jsonl`; in-memory run when absent.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/checkpoint` when it exists.
    pub resume: bool,
    /// Epochs between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many completed epochs (for interruption tests); the schedule is unchanged.
    pub stop_after: Option<usize>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss.jsonl";

/// Runs the full schedule in memory and returns the final checkpoint.
pub fn distill(config: &DistillConfig) -> Result<GeneratorCheckpoint> {
    distill_with(config, &DistillOptions::default())
}

pub fn distill_with(config: &DistillConfig, options: &DistillOptions) -> Result<GeneratorCheckpoint> {
    count_call();
    let dataset = load_dataset(&config.dataset.with_split(Split::Train))?;
    distill_on(config, dataset, options)
}

/// [`distill_with`] on an already loaded training split.
pub fn distill_on(config: &DistillConfig, dataset: DatasetHandle, options: &DistillOptions) -> Result<GeneratorCheckpoint> {
    count_call();
    let ckpt_dir = options.out_dir.as_ref().map(|d| d.join(CHECKPOINT_DIR));
    let mut state = match (&ckpt_dir, options.resume) {
        (Some(dir), true) if dir.join(checkpoint::MANIFEST).exists() => resume_state(config, dataset, dir)?,
        _ => DistillState::with_dataset(config.clone(), dataset)?,
    };
    if let Some(out) = &options.out_dir {
        let log_path = out.join(LOSS_LOG);
        let log = if state.epochs_completed > 0 {
            let (log, kept) = LossLog::resume(&log_path, state.epochs_completed)?;
            state.history = kept;
            log
        } else {
            LossLog::create(&log_path)?
        };
        state.attach_log(log);
    }
    let total = config.total_epochs();
    let stop = options.stop_after.unwrap_or(total).min(total);
    for epoch in state.epochs_completed..stop {
        state.run_epoch(epoch)?;
        let periodic = options.checkpoint_every > 0 && (epoch + 1) % options.checkpoint_every == 0;
        if let Some(dir) = &ckpt_dir {
            if periodic || epoch + 1 == stop {
                save_checkpoint(&state, dir)?;
            }
        }
    }
    if let Some(dir) = &ckpt_dir {
        if state.epochs_completed == 0 || !dir.join(checkpoint::MANIFEST).exists() {
            save_checkpoint(&state, dir)?;
        }
    }
    state.checkpoint()
}

fn resume_state(config: &DistillConfig, dataset: DatasetHandle, dir: &Path) -> Result<DistillState> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.config_hash != config.hash()? {
        return Err(Error::checkpoint(dir, "checkpoint was written by a different configuration"));
    }
    let trainer = TrainerState::load(dir)?;
    let mut state = DistillState::with_dataset(config.clone(), dataset)?;
    state.generator.store().load_bytes(&ckpt.params)?;
    trainer.restore(&mut state)?;
    state.epochs_completed = ckpt.epochs_completed;
    state.loss_digest = ckpt.loss_digest.clone();
    log::info!("resuming after epoch {}", ckpt.epochs_completed);
    Ok(state)
}

/// Mean matching loss of `generator` against fixed real batches through a fixed probe classifier.
///
/// Batches and noise come from the probe stream of `probe_seed`, so two calls with equal
/// arguments see identical inputs.
pub fn measure_matching(
    generator: &Generator,
    dataset: &DatasetHandle,
    probe: &Classifier,
    strategy: MatchStrategy,
    batch_size: usize,
    batches: usize,
    probe_seed: u64,
) -> Result<f64> {
    let mut rng = seed::rng(probe_seed, &[seed::stream::PROBE]);
    let mut sum = 0.0;
    for _ in 0..batches {
        let labels = LabelVector::uniform(batch_size, dataset.num_classes(), &mut rng)?;
        let noise = NoiseBatch::sample(batch_size, generator.config().noise_dim, &mut rng, generator.dtype())?;
        let real = sample_real_batch_with(dataset, &labels, &mut rng)?;
        let fake = generator.generate_with(&noise, &labels, Mode::FROZEN)?;
        sum += scalar(&matching_loss(strategy, probe, &fake, &real)?)?;
    }
    Ok(sum / batches.max(1) as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datasets::{ImageShape, ToyParams};
    use crate::models::ReinitPolicy;

    pub(crate) fn toy_config() -> DistillConfig {
        let params = ToyParams::new(2, 8, ImageShape::new(1, 8, 8), 10.0, 0);
        let mut c = DistillConfig::new(DatasetSpec::toy(params, Split::Train));
        c.n_epochs = 1;
        c.q_epochs = 1;
        c.batch_size = 8;
        c.noise_dim = 4;
        c.generator_width = 4;
        c.discriminator_width = 4;
        c.pool = PoolSpec {
            entries: vec![Arch::Convnet3],
            reinit_policy: ReinitPolicy::FreshEachSelection,
            width: Some(4),
        };
        c
    }

    #[test]
    fn iteration_count_is_ceiling() {
        let c = toy_config();
        assert_eq!(c.iterations_per_epoch(640), 80);
        assert_eq!(c.iterations_per_epoch(641), 81);
    }

    #[test]
    fn schedule_and_bookkeeping() {
        let mut s = DistillState::new(toy_config()).unwrap();
        let j = s.iterations_per_epoch();
        assert_eq!(j, 2);
        let a = s.run_epoch(0).unwrap();
        assert_eq!(a.phase, Phase::Gan);
        assert_eq!(s.history().len(), j);
        assert!(s.history().iter().all(|r| r.l_m == 0.0 && r.arch.is_none()));
        let b = s.run_epoch(1).unwrap();
        assert_eq!(b.phase, Phase::Joint);
        assert_eq!(s.history().len(), 2 * j);
        let (before, after) = b.matcher_digest.unwrap();
        assert_eq!(before, after);
        for r in &s.history()[j..] {
            assert_eq!(r.arch, Some(Arch::Convnet3));
            assert!((r.l_total - (r.l_g + 0.01 * r.l_m)).abs() < 1e-6);
        }
        assert!(train_epoch_gan(&mut s, 1).is_err());
        assert!(train_epoch_joint(&mut s, 2).is_err());
    }

    #[test]
    fn empty_schedule_keeps_initialization() {
        let mut c = toy_config();
        c.n_epochs = 0;
        c.q_epochs = 0;
        let ck = distill(&c).unwrap();
        let init = build_generator_with(&c.generator_config(), DType::F32).unwrap();
        assert_eq!(ck.params, init.store().to_bytes().unwrap());
        assert_eq!(ck.epochs_completed, 0);
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.pool.entries.clear();
        assert!(c.validate().is_err());
        c.strategy = MatchStrategy::None;
        assert!(c.validate().is_ok());
    }
}
