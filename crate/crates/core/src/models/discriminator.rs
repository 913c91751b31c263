use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageShape, LabelVector};
use crate::error::{config_err, validation_err, Result};
use crate::nn::conv::ConvGeometry;
use crate::nn::layers::{leaky_relu, BatchNorm, Conv2d, Linear};
use crate::nn::{Init, Mode, ParamStore};
use crate::seed;

const SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    pub image_shape: ImageShape,
    pub base_width: usize,
    pub seed: u64,
}

impl DiscriminatorConfig {
    pub fn new(num_classes: usize, image_shape: ImageShape, seed: u64) -> Self {
        Self {
            num_classes,
            image_shape,
            base_width: 64,
            seed,
        }
    }
}

/// Conditional realness critic. Labels enter as `C` constant planes appended to
/// the image channels, followed by three stride-2 convolutions and a linear score.
pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm>,
    head: Linear,
}

pub fn build_discriminator(num_classes: usize, image_shape: ImageShape, seed: u64) -> Result<Discriminator> {
    build_discriminator_with(&DiscriminatorConfig::new(num_classes, image_shape, seed), DType::F32)
}

pub fn build_discriminator_with(config: &DiscriminatorConfig, dtype: DType) -> Result<Discriminator> {
    let s = config.image_shape;
    if config.num_classes < 2 || s.channels == 0 || config.base_width == 0 {
        return Err(config_err!("invalid discriminator configuration {config:?}"));
    }
    let geom = ConvGeometry::new(2, 1);
    let mut h = s.height;
    let mut w = s.width;
    for _ in 0..3 {
        match (geom.out_size(h, 4), geom.out_size(w, 4)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (h, w) = (a, b),
            _ => return Err(validation_err!("discriminator cannot downsample {s} three times")),
        }
    }
    let d = config.base_width;
    let widths = [d, 2 * d, 4 * d];
    let mut store = ParamStore::new(dtype, Device::Cpu);
    let mut rng = seed::rng(config.seed, &[seed::stream::DISCRIMINATOR_INIT]);
    let mut init = Init::new(&mut store, &mut rng);
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut c_in = s.channels + config.num_classes;
    for (i, &c_out) in widths.iter().enumerate() {
        convs.push(Conv2d::new(init.sub(&format!("conv{i}")), c_in, c_out, 4, 2, 1, i == 0)?);
        if i > 0 {
            norms.push(BatchNorm::new(init.sub(&format!("bn{i}")), c_out)?);
        }
        c_in = c_out;
    }
    let head = Linear::new(init.sub("head"), 4 * d * h * w, 1)?;
    Ok(Discriminator {
        config: config.clone(),
        store,
        convs,
        norms,
        head,
    })
}

impl Discriminator {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Appends one constant plane per class, 1 on the sample's own class and 0 elsewhere.
    pub fn condition(&self, images: &Tensor, labels: &LabelVector) -> Result<Tensor> {
        let (b, c, h, w) = images.dims4()?;
        let s = self.config.image_shape;
        if c != s.channels || h != s.height || w != s.width {
            return Err(validation_err!(
                "discriminator expects {s} images, got {c}x{h}x{w}"
            ));
        }
        if labels.len() != b || labels.num_classes() != self.config.num_classes {
            return Err(validation_err!(
                "discriminator got {b} images and {} labels over {} classes",
                labels.len(),
                labels.num_classes()
            ));
        }
        let planes = labels
            .one_hot(images.dtype(), images.device())?
            .reshape((b, self.config.num_classes, 1, 1))?
            .broadcast_as((b, self.config.num_classes, h, w))?;
        Ok(Tensor::cat(&[images, &planes], 1)?)
    }

    /// Pre-sigmoid realness scores of shape (B, 1).
    pub fn forward(&self, images: &Tensor, labels: &LabelVector, mode: Mode) -> Result<Tensor> {
        let x = self.condition(images, labels)?;
        self.forward_conditioned(&x, mode)
    }

    pub fn forward_conditioned(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = leaky_relu(&self.convs[0].forward(x, mode)?, SLOPE)?;
        for (conv, bn) in self.convs[1..].iter().zip(&self.norms) {
            h = leaky_relu(&bn.forward(&conv.forward(&h, mode)?, mode)?, SLOPE)?;
        }
        self.head.forward(&h.flatten_from(1)?, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditioned_input_and_score_shape() {
        let d = build_discriminator(10, ImageShape::new(3, 32, 32), 0).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let y = LabelVector::new(vec![4, 9], 10).unwrap();
        let cond = d.condition(&x, &y).unwrap();
        assert_eq!(cond.dims(), &[2, 13, 32, 32]);
        let plane: Vec<f32> = cond.get(0).unwrap().get(3 + 4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(plane.iter().all(|&v| v == 1.0));
        assert_eq!(d.forward(&x, &y, Mode::TRAIN).unwrap().dims(), &[2, 1]);
        let wrong = Tensor::zeros((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(d.forward(&wrong, &y, Mode::TRAIN).is_err());
    }

    #[test]
    fn zero_parameters_score_zero() {
        let d = build_discriminator(3, ImageShape::new(1, 28, 28), 1).unwrap();
        d.store().zero_all().unwrap();
        let x = Tensor::rand(-1f32, 1.0, (4, 1, 28, 28), &Device::Cpu).unwrap();
        let y = LabelVector::new(vec![0, 1, 2, 0], 3).unwrap();
        let s: Vec<f32> = d.forward(&x, &y, Mode::TRAIN).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(s, vec![0.0; 4]);
    }
}
