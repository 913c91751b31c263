//! Training downstream classifiers on images a frozen generator synthesizes on the fly.

mod augment;

use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetHandle, LabelVector, LabeledImageBatch};
use crate::distill::GeneratorCheckpoint;
use crate::error::{config_err, validation_err, Result};
use crate::models::{build_classifier_with, Arch, Classifier, ClassifierConfig, Generator, NoiseBatch};
use crate::nn::functional::{argmax_rows, cross_entropy};
use crate::nn::optim::{cosine_lr, Sgd, SgdConfig};
use crate::nn::Mode;
use crate::seed;

pub use augment::{apply_op, default_policy, dsa_augment, parse_policy, AugmentOp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployConfig {
    /// Images per class generated for every epoch.
    pub inpc: usize,
    pub epochs: usize,
    /// Minibatch size of the downstream SGD updates.
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub cosine_decay: bool,
    pub augmentation: Vec<AugmentOp>,
    pub arch: Arch,
    /// Classifier base width; the architecture default when absent.
    pub width: Option<usize>,
    pub fresh_noise: bool,
    pub seed: u64,
    /// Test-set evaluation period in epochs for the accuracy curve; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl DeployConfig {
    pub fn new(inpc: usize, arch: Arch) -> Self {
        Self {
            inpc,
            epochs: 1000,
            batch_size: 256,
            sgd: SgdConfig::default(),
            cosine_decay: true,
            augmentation: default_policy(),
            arch,
            width: None,
            fresh_noise: true,
            seed: 0,
            eval_every: 1,
        }
    }

    /// Generated images per epoch.
    pub fn images_per_epoch(&self, num_classes: usize) -> usize {
        self.inpc * num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.inpc < 1 {
            return Err(config_err!("inpc must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(config_err!("deployment batch_size must be at least 1"));
        }
        if !(self.sgd.lr > 0.0) || !self.sgd.lr.is_finite() {
            return Err(config_err!("deployment learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return Err(config_err!("momentum must lie in [0, 1) and weight decay must be non-negative"));
        }
        Ok(())
    }

    fn lr(&self, epoch: usize) -> f64 {
        if self.cosine_decay {
            cosine_lr(self.sgd.lr, epoch, self.epochs)
        } else {
            self.sgd.lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Number of completed epochs.
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub generation_ms_per_batch: f64,
    pub training_ms_per_batch: f64,
    pub hardware: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployResult {
    /// Mean final test accuracy over `seeds`.
    pub accuracy: f64,
    /// Population standard deviation over `seeds`; 0 for a single run.
    pub accuracy_std: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    /// Accuracy curve of the first seed.
    pub curve: Vec<CurvePoint>,
    pub timing: Timing,
    pub images_per_epoch: usize,
    pub generator_forwards: usize,
    pub config: DeployConfig,
}

fn check_compat(ckpt: &GeneratorCheckpoint, test_set: &DatasetHandle) -> Result<()> {
    let g = &ckpt.generator;
    if g.num_classes != test_set.num_classes() {
        return Err(config_err!(
            "checkpoint has {} classes but the test set has {}",
            g.num_classes,
            test_set.num_classes()
        ));
    }
    if g.image_shape != test_set.image_shape() {
        return Err(config_err!(
            "checkpoint generates {} images but the test set holds {}",
            g.image_shape,
            test_set.image_shape()
        ));
    }
    Ok(())
}

fn classifier_config(config: &DeployConfig, gen: &Generator) -> ClassifierConfig {
    let mut c = ClassifierConfig::new(config.arch, gen.config().num_classes, gen.config().image_shape);
    c.width = config.width;
    c
}

/// Class-balanced label order and noise for `epoch`; fixed-sample mode reuses epoch 0.
fn epoch_inputs(gen: &Generator, config: &DeployConfig, epoch: usize) -> Result<(LabelVector, NoiseBatch)> {
    let c = gen.config().num_classes;
    let e = if config.fresh_noise { epoch as u64 } else { 0 };
    let mut rng = seed::rng(config.seed, &[seed::stream::DEPLOY_NOISE, e]);
    let mut labels = LabelVector::balanced(config.inpc, c)?.as_slice().to_vec();
    labels.shuffle(&mut rng);
    let labels = LabelVector::new(labels, c)?;
    let noise = NoiseBatch::sample(labels.len(), gen.config().noise_dim, &mut rng, gen.dtype())?;
    Ok((labels, noise))
}

/// The un-augmented images generated for `epoch`, split into minibatches of `config.batch_size`.
pub fn epoch_batches(gen: &Generator, config: &DeployConfig, epoch: usize) -> Result<Vec<LabeledImageBatch>> {
    let (labels, noise) = epoch_inputs(gen, config, epoch)?;
    let mut out = Vec::new();
    let mut start = 0;
    while start < labels.len() {
        let len = config.batch_size.min(labels.len() - start);
        let chunk = NoiseBatch {
            values: noise.values.narrow(0, start, len)?,
            seed: None,
        };
        out.push(gen.generate_with(&chunk, &labels.slice(start, len), Mode::EVAL)?);
        start += len;
    }
    Ok(out)
}

/// Anything that maps a batch of images to predicted classes.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict(&self, images: &Tensor) -> Result<Vec<usize>>;
}

impl Predictor for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(images, Mode::EVAL)?;
        argmax_rows(&logits)
    }
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy over the whole split.
pub fn evaluate(model: &impl Predictor, test_set: &DatasetHandle) -> Result<f64> {
    if test_set.is_empty() {
        return Err(validation_err!("cannot evaluate on an empty test set"));
    }
    if model.num_classes() != test_set.num_classes() {
        return Err(config_err!(
            "model predicts {} classes but the test set has {}",
            model.num_classes(),
            test_set.num_classes()
        ));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test_set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = test_set.batch(chunk)?;
        let pred = model.predict(&batch.images)?;
        correct += pred.iter().zip(batch.labels.as_slice()).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / test_set.len() as f64)
}

fn train_step(clf: &Classifier, opt: &mut Sgd, batch: &LabeledImageBatch, lr: f64) -> Result<f64> {
    let (logits, _) = clf.forward(&batch.images, Mode::TRAIN)?;
    let loss = cross_entropy(&logits, batch.labels.as_slice())?;
    let grads = loss.backward()?;
    opt.step(&grads, lr)?;
    crate::nn::functional::scalar(&loss)
}

struct SingleRun {
    accuracy: f64,
    curve: Vec<CurvePoint>,
    gen_time: Duration,
    gen_batches: usize,
    train_time: Duration,
    train_batches: usize,
    forwards: usize,
}

fn deploy_once(gen: &Generator, config: &DeployConfig, test_set: &DatasetHandle) -> Result<SingleRun> {
    let cfg = classifier_config(config, gen);
    let clf = build_classifier_with(&cfg, seed::derive(config.seed, &[seed::stream::DEPLOY_INIT]), DType::F32)?;
    let mut opt = Sgd::new(clf.store().trainable(), config.sgd);
    let mut run = SingleRun {
        accuracy: 0.0,
        curve: Vec::new(),
        gen_time: Duration::ZERO,
        gen_batches: 0,
        train_time: Duration::ZERO,
        train_batches: 0,
        forwards: 0,
    };
    let mut fixed: Option<Vec<LabeledImageBatch>> = None;
    for epoch in 0..config.epochs {
        let batches = match &fixed {
            Some(b) => b.clone(),
            None => {
                let t = Instant::now();
                let b = epoch_batches(gen, config, epoch)?;
                run.gen_time += t.elapsed();
                run.gen_batches += b.len();
                run.forwards += b.iter().map(|x| x.len()).sum::<usize>();
                if !config.fresh_noise {
                    fixed = Some(b.clone());
                }
                b
            }
        };
        let lr = config.lr(epoch);
        let t = Instant::now();
        for (i, batch) in batches.iter().enumerate() {
            let aug_seed = seed::derive(config.seed, &[seed::stream::AUGMENT, epoch as u64, i as u64]);
            let batch = dsa_augment(batch, &config.augmentation, aug_seed)?;
            let loss = train_step(&clf, &mut opt, &batch, lr)?;
            if !loss.is_finite() {
                return Err(crate::Error::Numeric {
                    epoch,
                    iteration: i,
                    detail: format!("downstream cross-entropy is {loss}"),
                });
            }
        }
        run.train_time += t.elapsed();
        run.train_batches += batches.len();
        let last = epoch + 1 == config.epochs;
        if last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) {
            let acc = evaluate(&clf, test_set)?;
            run.curve.push(CurvePoint { epoch: epoch + 1, accuracy: acc });
        }
    }
    run.accuracy = match run.curve.last() {
        Some(p) => p.accuracy,
        None => evaluate(&clf, test_set)?,
    };
    Ok(run)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ms_per(d: Duration, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        d.as_secs_f64() * 1e3 / n as f64
    }
}

/// Trains one classifier with `config.seed` and reports its test accuracy.
pub fn deploy_train(ckpt: &GeneratorCheckpoint, config: &DeployConfig, test_set: &DatasetHandle) -> Result<DeployResult> {
    deploy_seeds(ckpt, config, test_set, &[config.seed])
}

/// Runs [`deploy_train`] once per seed and aggregates mean and standard deviation.
pub fn deploy_seeds(
    ckpt: &GeneratorCheckpoint,
    config: &DeployConfig,
    test_set: &DatasetHandle,
    seeds: &[u64],
) -> Result<DeployResult> {
    config.validate()?;
    check_compat(ckpt, test_set)?;
    if seeds.is_empty() {
        return Err(config_err!("at least one seed is required"));
    }
    let gen = ckpt.generator()?;
    let mut per_seed = Vec::new();
    let mut curve = Vec::new();
    let (mut gt, mut gb, mut tt, mut tb, mut forwards) = (Duration::ZERO, 0, Duration::ZERO, 0, 0);
    for (k, &s) in seeds.iter().enumerate() {
        let cfg = DeployConfig { seed: s, ..config.clone() };
        let run = deploy_once(&gen, &cfg, test_set)?;
        log::info!("deploy {} seed {s}: accuracy {:.4}", config.arch, run.accuracy);
        per_seed.push(run.accuracy);
        if k == 0 {
            curve = run.curve;
            forwards = run.forwards;
        }
        gt += run.gen_time;
        gb += run.gen_batches;
        tt += run.train_time;
        tb += run.train_batches;
    }
    let (accuracy, accuracy_std) = mean_std(&per_seed);
    Ok(DeployResult {
        accuracy,
        accuracy_std,
        seeds: seeds.to_vec(),
        per_seed,
        curve,
        timing: Timing {
            generation_ms_per_batch: ms_per(gt, gb),
            training_ms_per_batch: ms_per(tt, tb),
            hardware: hardware_descriptor(),
        },
        images_per_epoch: config.images_per_epoch(ckpt.generator.num_classes),
        generator_forwards: forwards,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossArchRow {
    pub arch: Arch,
    pub accuracy: f64,
    pub accuracy_std: f64,
}

/// Deploys the same checkpoint on each architecture with an otherwise identical budget.
pub fn cross_arch_eval(
    ckpt: &GeneratorCheckpoint,
    archs: &[Arch],
    config: &DeployConfig,
    test_set: &DatasetHandle,
    seeds: &[u64],
) -> Result<Vec<CrossArchRow>> {
    archs
        .iter()
        .map(|&arch| {
            let cfg = DeployConfig { arch, ..config.clone() };
            let r = deploy_seeds(ckpt, &cfg, test_set, seeds)?;
            Ok(CrossArchRow {
                arch,
                accuracy: r.accuracy,
                accuracy_std: r.accuracy_std,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortOptions {
    pub warmup: usize,
    pub repetitions: usize,
    /// Shortest acceptable timed sample; shorter samples are repeated in groups.
    pub min_sample: Duration,
    pub classifier_width: Option<usize>,
}

impl Default for EffortOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            repetitions: 20,
            min_sample: Duration::from_micros(200),
            classifier_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effort {
    pub arch: Arch,
    pub batch_size: usize,
    /// Median wall-clock of one generator forward over the batch.
    pub gen_ms: f64,
    /// Median wall-clock of one downstream optimizer step over the batch.
    pub train_ms: f64,
    pub ratio: f64,
    /// Calls per timed sample after automatic grouping.
    pub gen_group: usize,
    pub train_group: usize,
    pub hardware: String,
}

const MAX_GROUP: usize = 1 << 16;

/// Median per-call milliseconds of `f`, grouping calls until a sample exceeds `min_sample`.
pub fn median_ms(mut f: impl FnMut() -> Result<()>, opts: &EffortOptions) -> Result<(f64, usize)> {
    for _ in 0..opts.warmup {
        f()?;
    }
    let mut group = 1usize;
    loop {
        let mut samples = Vec::with_capacity(opts.repetitions.max(1));
        for _ in 0..opts.repetitions.max(1) {
            let t = Instant::now();
            for _ in 0..group {
                f()?;
            }
            samples.push(t.elapsed());
        }
        samples.sort();
        let median = samples[samples.len() / 2];
        if median >= opts.min_sample || group >= MAX_GROUP {
            return Ok((median.as_secs_f64() * 1e3 / group as f64, group));
        }
        group *= 2;
    }
}

/// Times generation of one batch against one downstream optimizer step on `arch`.
pub fn measure_effort(ckpt: &GeneratorCheckpoint, arch: Arch, batch_size: usize, opts: &EffortOptions) -> Result<Effort> {
    if batch_size < 1 {
        return Err(config_err!("batch_size must be at least 1"));
    }
    let gen = ckpt.generator()?;
    let gc = gen.config();
    let mut rng = seed::rng(0, &[seed::stream::PROBE]);
    let labels = LabelVector::uniform(batch_size, gc.num_classes, &mut rng)?;
    let noise = NoiseBatch::sample(batch_size, gc.noise_dim, &mut rng, gen.dtype())?;
    let (gen_ms, gen_group) = median_ms(
        || {
            gen.generate_with(&noise, &labels, Mode::EVAL)?;
            Ok(())
        },
        opts,
    )?;
    let batch = gen.generate_with(&noise, &labels, Mode::EVAL)?;
    let mut cfg = ClassifierConfig::new(arch, gc.num_classes, gc.image_shape);
    cfg.width = opts.classifier_width;
    let clf = build_classifier_with(&cfg, 0, DType::F32)?;
    let mut opt = Sgd::new(clf.store().trainable(), SgdConfig::default());
    let (train_ms, train_group) = median_ms(
        || {
            train_step(&clf, &mut opt, &batch, 1e-6)?;
            Ok(())
        },
        opts,
    )?;
    Ok(Effort {
        arch,
        batch_size,
        gen_ms,
        train_ms,
        ratio: gen_ms / train_ms.max(f64::MIN_POSITIVE),
        gen_group,
        train_group,
        hardware: hardware_descriptor(),
    })
}

/// CPU model string plus logical core count.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model} ({cores} logical cores, CPU)")
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(usize, usize);

    impl Predictor for Constant {
        fn num_classes(&self) -> usize {
            self.1
        }
        fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
            Ok(vec![self.0; images.dim(0)?])
        }
    }

    #[test]
    fn constant_predictor_scores_class_share() {
        use crate::datasets::{make_toy_dataset, ImageShape};
        let t = make_toy_dataset(10, 3, ImageShape::new(1, 4, 4), 1.0, 0).unwrap();
        assert!((evaluate(&Constant(0, 10), &t).unwrap() - 0.1).abs() < 1e-12);
        assert!(evaluate(&Constant(0, 9), &t).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DeployConfig::new(10, Arch::Convnet3);
        assert!(c.validate().is_ok());
        assert_eq!(c.images_per_epoch(10), 100);
        c.inpc = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mean_and_population_std() {
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
    }
}
