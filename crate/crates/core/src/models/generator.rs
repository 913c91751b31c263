use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageShape, LabelVector, LabeledImageBatch};
use crate::error::{config_err, validation_err, Result};
use crate::nn::layers::{center_crop, BatchNorm, Conv2d, ConvTranspose2d, Linear};
use crate::nn::{Init, Mode, ParamStore};
use crate::seed;

/// Spatial upsampling factor of the three stride-2 transposed convolutions.
pub const UPSAMPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub num_classes: usize,
    pub image_shape: ImageShape,
    pub base_width: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(num_classes: usize, image_shape: ImageShape, seed: u64) -> Self {
        Self {
            noise_dim: 100,
            num_classes,
            image_shape,
            base_width: 196,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.noise_dim + self.num_classes
    }

    /// Side of the initial feature map produced by the fully connected layer.
    pub fn seed_side(&self) -> usize {
        self.image_shape.height.div_ceil(UPSAMPLE)
    }

    /// Side of the raw output before the center crop.
    pub fn raw_side(&self) -> usize {
        self.seed_side() * UPSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_dim < 1 {
            return Err(config_err!("generator noise_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(config_err!("generator needs at least 2 classes"));
        }
        if self.base_width < self.num_classes {
            return Err(config_err!(
                "generator base_width {} is smaller than num_classes {}",
                self.base_width,
                self.num_classes
            ));
        }
        let s = self.image_shape;
        let achievable = "square images with side 8·k, or 8·k minus an even number (for example 8, 16, 28, 30, 32)";
        if s.channels == 0 || s.height != s.width || s.height < UPSAMPLE {
            return Err(config_err!("generator cannot produce {s}; achievable shapes are {achievable}"));
        }
        if (self.raw_side() - s.height) % 2 != 0 {
            return Err(config_err!(
                "generator cannot produce {s}: the {0}x{0} output has no centered {1}x{1} crop; achievable shapes are {achievable}",
                self.raw_side(),
                s.height
            ));
        }
        Ok(())
    }
}

/// I.i.d. standard normal noise rows with their provenance.
#[derive(Debug, Clone)]
pub struct NoiseBatch {
    pub values: Tensor,
    pub seed: Option<u64>,
}

impl NoiseBatch {
    pub fn sample(batch: usize, noise_dim: usize, rng: &mut impl Rng, dtype: DType) -> Result<Self> {
        let data: Vec<f32> = (0..batch * noise_dim).map(|_| rng.sample(StandardNormal)).collect();
        let values = Tensor::from_vec(data, (batch, noise_dim), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { values, seed: None })
    }

    pub fn from_seed(batch: usize, noise_dim: usize, noise_seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = seed::rng(noise_seed, &[]);
        let mut n = Self::sample(batch, noise_dim, &mut rng, dtype)?;
        n.seed = Some(noise_seed);
        Ok(n)
    }

    pub fn len(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Block {
    conv: Conv2d,
    bn: BatchNorm,
}

struct UpBlock {
    conv: ConvTranspose2d,
    bn: BatchNorm,
}

/// Conditional generator: `[z, onehot(y)]` → FC → BN → ReLU → 3 × (ConvT, BN, ReLU)
/// → 4 × (Conv, BN, ReLU) → Conv → tanh.
pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    fc: Linear,
    fc_bn: BatchNorm,
    up: Vec<UpBlock>,
    blocks: Vec<Block>,
    head: Conv2d,
}

pub fn build_generator(config: &GeneratorConfig) -> Result<Generator> {
    build_generator_with(config, DType::F32)
}

pub fn build_generator_with(config: &GeneratorConfig, dtype: DType) -> Result<Generator> {
    config.validate()?;
    let w = config.base_width;
    let s0 = config.seed_side();
    let mut store = ParamStore::new(dtype, Device::Cpu);
    let mut rng = seed::rng(config.seed, &[seed::stream::GENERATOR_INIT]);
    let mut init = Init::new(&mut store, &mut rng);
    let fc = Linear::new(init.sub("fc"), config.input_dim(), w * s0 * s0)?;
    let fc_bn = BatchNorm::new(init.sub("fc_bn"), w * s0 * s0)?;
    let mut up = Vec::with_capacity(3);
    for i in 0..3 {
        let mut sub = init.sub(&format!("up{i}"));
        up.push(UpBlock {
            conv: ConvTranspose2d::new(sub.sub("conv"), w, w, 4, 2, 1, false)?,
            bn: BatchNorm::new(sub.sub("bn"), w)?,
        });
    }
    let mut blocks = Vec::with_capacity(4);
    for i in 0..4 {
        let mut sub = init.sub(&format!("block{i}"));
        blocks.push(Block {
            conv: Conv2d::new(sub.sub("conv"), w, w, 3, 1, 1, false)?,
            bn: BatchNorm::new(sub.sub("bn"), w)?,
        });
    }
    let head = Conv2d::new(init.sub("head"), w, config.image_shape.channels, 3, 1, 1, true)?;
    Ok(Generator {
        config: config.clone(),
        store,
        fc,
        fc_bn,
        up,
        blocks,
        head,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Raw forward pass on a noise matrix (B, K) and one-hot labels (B, C).
    pub fn forward(&self, noise: &Tensor, one_hot: &Tensor, mode: Mode) -> Result<Tensor> {
        let (b, k) = noise.dims2()?;
        let (bl, c) = one_hot.dims2()?;
        if b != bl {
            return Err(validation_err!("generator got {b} noise rows but {bl} labels"));
        }
        if k != self.config.noise_dim || c != self.config.num_classes {
            return Err(validation_err!(
                "generator expects noise dim {} and {} classes, got {k} and {c}",
                self.config.noise_dim,
                self.config.num_classes
            ));
        }
        let w = self.config.base_width;
        let s0 = self.config.seed_side();
        let input = Tensor::cat(&[noise, &one_hot.to_dtype(noise.dtype())?], 1)?;
        let h = self.fc.forward(&input, mode)?;
        let h = self.fc_bn.forward(&h, mode)?.relu()?;
        let mut h = h.reshape((b, w, s0, s0))?;
        for u in &self.up {
            h = u.bn.forward(&u.conv.forward(&h, mode)?, mode)?.relu()?;
        }
        for blk in &self.blocks {
            h = blk.bn.forward(&blk.conv.forward(&h, mode)?, mode)?.relu()?;
        }
        let out = self.head.forward(&h, mode)?.tanh()?;
        let s = self.config.image_shape;
        center_crop(&out, s.height, s.width)
    }

    /// Images for `(noise, labels)`, paired index-wise with `labels`.
    pub fn generate_with(&self, noise: &NoiseBatch, labels: &LabelVector, mode: Mode) -> Result<LabeledImageBatch> {
        if noise.len() != labels.len() {
            return Err(validation_err!(
                "noise batch has {} rows but {} labels were given",
                noise.len(),
                labels.len()
            ));
        }
        if labels.num_classes() != self.config.num_classes {
            return Err(validation_err!(
                "labels span {} classes, generator was built for {}",
                labels.num_classes(),
                self.config.num_classes
            ));
        }
        let one_hot = labels.one_hot(self.dtype(), &Device::Cpu)?;
        let images = self.forward(&noise.values.to_dtype(self.dtype())?, &one_hot, mode)?;
        LabeledImageBatch::new(images, labels.clone())
    }
}

/// Inference-mode generation: running normalization statistics, no graph through β.
pub fn generate(gen: &Generator, noise: &NoiseBatch, labels: &LabelVector) -> Result<LabeledImageBatch> {
    gen.generate_with(noise, labels, Mode::EVAL)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            noise_dim: 6,
            num_classes: 3,
            image_shape: ImageShape::new(1, 8, 8),
            base_width: 4,
            seed,
        }
    }

    #[test]
    fn shape_rules() {
        let mut c = small(0);
        for (side, ok) in [(8, true), (16, true), (28, true), (30, true), (32, true), (27, false), (4, false)] {
            c.image_shape = ImageShape::new(3, side, side);
            assert_eq!(c.validate().is_ok(), ok, "side {side}");
        }
        c.image_shape = ImageShape::new(3, 32, 16);
        assert!(c.validate().is_err());
        c.image_shape = ImageShape::new(1, 28, 28);
        assert_eq!(c.raw_side(), 32);
        c.base_width = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let mut cfg = small(1);
        cfg.image_shape = ImageShape::new(1, 28, 28);
        let g = build_generator(&cfg).unwrap();
        let z = NoiseBatch::from_seed(5, 6, 0, DType::F32).unwrap();
        let y = LabelVector::new(vec![0, 1, 2, 0, 1], 3).unwrap();
        let out = g.generate_with(&z, &y, Mode::TRAIN).unwrap();
        assert_eq!(out.images.dims(), &[5, 1, 28, 28]);
        assert!(out.max_abs().unwrap() <= 1.0);
        let bad = LabelVector::new(vec![0, 1], 3).unwrap();
        assert!(g.generate_with(&z, &bad, Mode::EVAL).is_err());
    }

    #[test]
    fn zero_generator_emits_zeros() {
        let g = build_generator(&small(2)).unwrap();
        g.store().zero_all().unwrap();
        let z = NoiseBatch::from_seed(4, 6, 3, DType::F32).unwrap();
        let y = LabelVector::new(vec![0, 1, 2, 2], 3).unwrap();
        for mode in [Mode::TRAIN, Mode::EVAL] {
            let v: Vec<f32> = g.generate_with(&z, &y, mode).unwrap().images.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn seeds_determine_parameters() {
        let a = build_generator(&small(7)).unwrap();
        let b = build_generator(&small(7)).unwrap();
        let c = build_generator(&small(8)).unwrap();
        assert_eq!(a.store().to_bytes().unwrap(), b.store().to_bytes().unwrap());
        assert_ne!(a.store().digest().unwrap(), c.store().digest().unwrap());
    }
}
