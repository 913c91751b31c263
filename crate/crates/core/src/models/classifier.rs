use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageShape, LabeledImageBatch};
use crate::error::{config_err, validation_err, Error, Result};
use crate::nn::layers::{
    avg_pool2, global_avg_pool, global_max_pool, max_pool2, BatchNorm, Conv2d, InstanceNorm, Linear,
};
use crate::nn::{Init, Mode, ParamStore};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Convnet3,
    Resnet10,
    Resnet18,
    Resnet34,
    Resnet50,
    Vgg11,
    Alexnet,
    Densenet121,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::Convnet3,
        Arch::Resnet10,
        Arch::Resnet18,
        Arch::Resnet34,
        Arch::Resnet50,
        Arch::Vgg11,
        Arch::Alexnet,
        Arch::Densenet121,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arch::Convnet3 => "convnet3",
            Arch::Resnet10 => "resnet10",
            Arch::Resnet18 => "resnet18",
            Arch::Resnet34 => "resnet34",
            Arch::Resnet50 => "resnet50",
            Arch::Vgg11 => "vgg11",
            Arch::Alexnet => "alexnet",
            Arch::Densenet121 => "densenet121",
        }
    }

    fn default_width(&self) -> usize {
        match self {
            Arch::Convnet3 | Arch::Alexnet => 128,
            Arch::Resnet10 | Arch::Resnet18 | Arch::Resnet34 | Arch::Resnet50 | Arch::Vgg11 => 64,
            Arch::Densenet121 => 32,
        }
    }

    /// Residual blocks per stage.
    pub fn resnet_blocks(&self) -> Option<[usize; 4]> {
        match self {
            Arch::Resnet10 => Some([1, 1, 1, 1]),
            Arch::Resnet18 => Some([2, 2, 2, 2]),
            Arch::Resnet34 | Arch::Resnet50 => Some([3, 4, 6, 3]),
            _ => None,
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == key)
            .ok_or_else(|| config_err!("unknown architecture {s:?}"))
    }
}

/// Everything that determines a classifier's structure.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: Arch,
    pub num_classes: usize,
    pub image_shape: ImageShape,
    /// Base channel width; defaults per architecture (128 for ConvNet, 64 for ResNet/VGG,
    /// growth rate 32 for DenseNet).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Number of conv blocks for the ConvNet family (3 by default).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

impl ClassifierConfig {
    pub fn new(arch: Arch, num_classes: usize, image_shape: ImageShape) -> Self {
        Self {
            arch,
            num_classes,
            image_shape,
            width: None,
            depth: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width.unwrap_or_else(|| self.arch.default_width())
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(3)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_shape;
        let unsupported = |why: &str| config_err!("{} does not support {s} inputs: {why}", self.arch);
        if self.num_classes < 2 {
            return Err(config_err!("classifier needs at least 2 classes"));
        }
        if self.width() == 0 {
            return Err(config_err!("classifier width must be positive"));
        }
        if self.depth.is_some() && self.arch != Arch::Convnet3 {
            return Err(config_err!("depth applies to the ConvNet family only"));
        }
        if s.channels == 0 || s.height != s.width {
            return Err(unsupported("square images required"));
        }
        match self.arch {
            Arch::Convnet3 => {
                let d = self.depth();
                if d == 0 || convnet_side(s.height) >> d == 0 {
                    return Err(unsupported(&format!("{d} halvings need a side of at least {}", 1usize << d)));
                }
            }
            Arch::Vgg11 | Arch::Alexnet => {
                if s.height != 28 && s.height != 32 {
                    return Err(unsupported("only 28x28 and 32x32 are supported"));
                }
            }
            _ => {
                if s.height < 8 {
                    return Err(unsupported("side must be at least 8"));
                }
            }
        }
        Ok(())
    }
}

/// 28-pixel inputs get a first-layer padding of 3, which turns them into 32-pixel maps.
fn first_padding(side: usize, kernel_pad: usize) -> usize {
    if side == 28 {
        kernel_pad + 2
    } else {
        kernel_pad
    }
}

fn convnet_side(side: usize) -> usize {
    side + 2 * (first_padding(side, 1) - 1)
}

#[derive(Clone)]
enum Norm {
    Instance(InstanceNorm),
    Batch(BatchNorm),
}

impl Norm {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Norm::Instance(n) => n.forward(x, mode),
            Norm::Batch(n) => n.forward(x, mode),
        }
    }
}

struct ConvNet {
    convs: Vec<(Conv2d, Norm)>,
    head: Linear,
}

impl ConvNet {
    fn new(init: &mut Init<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let s = cfg.image_shape;
        let w = cfg.width();
        let mut convs = Vec::new();
        let mut c_in = s.channels;
        let mut side = convnet_side(s.height);
        for i in 0..cfg.depth() {
            let pad = if i == 0 { first_padding(s.height, 1) } else { 1 };
            let mut sub = init.sub(&format!("features{i}"));
            let conv = Conv2d::new(sub.sub("conv"), c_in, w, 3, 1, pad, true)?;
            let norm = Norm::Instance(InstanceNorm::new(sub.sub("norm"), w)?);
            convs.push((conv, norm));
            c_in = w;
            side /= 2;
        }
        let head = Linear::new(init.sub("classifier"), w * side * side, cfg.num_classes)?;
        Ok(Self { convs, head })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for (conv, norm) in &self.convs {
            h = avg_pool2(&norm.forward(&conv.forward(&h, mode)?, mode)?.relu()?)?;
        }
        let feat = h.flatten_from(1)?;
        Ok((self.head.forward(&feat, mode)?, feat))
    }
}

fn conv_bn(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<(Conv2d, Norm)> {
    let mut sub = init.sub(name);
    let conv = Conv2d::new(sub.sub("conv"), c_in, c_out, k, stride, k / 2, false)?;
    let bn = Norm::Batch(BatchNorm::new(sub.sub("bn"), c_out)?);
    Ok((conv, bn))
}

fn apply(layer: &(Conv2d, Norm), x: &Tensor, mode: Mode) -> Result<Tensor> {
    layer.1.forward(&layer.0.forward(x, mode)?, mode)
}

struct ResBlock {
    layers: Vec<(Conv2d, Norm)>,
    shortcut: Option<(Conv2d, Norm)>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = apply(l, &h, mode)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => apply(s, x, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

struct ResNet {
    stem: (Conv2d, Norm),
    blocks: Vec<ResBlock>,
    head: Linear,
}

impl ResNet {
    fn new(init: &mut Init<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let w = cfg.width();
        let layout = cfg.arch.resnet_blocks().expect("resnet arch");
        let bottleneck = cfg.arch == Arch::Resnet50;
        let expansion = if bottleneck { 4 } else { 1 };
        let stem = conv_bn(init, "stem", cfg.image_shape.channels, w, 3, 1)?;
        let mut blocks = Vec::new();
        let mut c_in = w;
        for (stage, &count) in layout.iter().enumerate() {
            let planes = w << stage;
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let mut sub = init.sub(&format!("layer{}.{b}", stage + 1));
                let c_out = planes * expansion;
                let layers = if bottleneck {
                    vec![
                        conv_bn(&mut sub, "a", c_in, planes, 1, 1)?,
                        conv_bn(&mut sub, "b", planes, planes, 3, stride)?,
                        conv_bn(&mut sub, "c", planes, c_out, 1, 1)?,
                    ]
                } else {
                    vec![
                        conv_bn(&mut sub, "a", c_in, planes, 3, stride)?,
                        conv_bn(&mut sub, "b", planes, planes, 3, 1)?,
                    ]
                };
                let shortcut = if stride != 1 || c_in != c_out {
                    Some(conv_bn(&mut sub, "shortcut", c_in, c_out, 1, stride)?)
                } else {
                    None
                };
                blocks.push(ResBlock { layers, shortcut });
                c_in = c_out;
            }
        }
        let head = Linear::new(init.sub("classifier"), 2 * c_in, cfg.num_classes)?;
        Ok(Self { stem, blocks, head })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = apply(&self.stem, x, mode)?.relu()?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        let feat = Tensor::cat(&[global_avg_pool(&h)?, global_max_pool(&h)?], 1)?;
        Ok((self.head.forward(&feat, mode)?, feat))
    }
}

enum VggItem {
    Conv(Conv2d, Norm),
    Pool,
}

struct Vgg {
    items: Vec<VggItem>,
    head: Linear,
}

impl Vgg {
    fn new(init: &mut Init<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let w = cfg.width();
        let plan = [1, 0, 2, 0, 4, 4, 0, 8, 8, 0, 8, 8, 0];
        let mut items = Vec::new();
        let mut c_in = cfg.image_shape.channels;
        for (i, &m) in plan.iter().enumerate() {
            if m == 0 {
                items.push(VggItem::Pool);
                continue;
            }
            let pad = if i == 0 { first_padding(cfg.image_shape.height, 1) } else { 1 };
            let mut sub = init.sub(&format!("features{i}"));
            let conv = Conv2d::new(sub.sub("conv"), c_in, w * m, 3, 1, pad, true)?;
            let bn = Norm::Batch(BatchNorm::new(sub.sub("bn"), w * m)?);
            items.push(VggItem::Conv(conv, bn));
            c_in = w * m;
        }
        let head = Linear::new(init.sub("classifier"), c_in, cfg.num_classes)?;
        Ok(Self { items, head })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for item in &self.items {
            h = match item {
                VggItem::Conv(c, n) => n.forward(&c.forward(&h, mode)?, mode)?.relu()?,
                VggItem::Pool => max_pool2(&h)?,
            };
        }
        let feat = h.flatten_from(1)?;
        Ok((self.head.forward(&feat, mode)?, feat))
    }
}

struct AlexNet {
    convs: Vec<(Conv2d, bool)>,
    head: Linear,
}

impl AlexNet {
    fn new(init: &mut Init<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let w = cfg.width();
        let widths = [w, w * 3 / 2, 2 * w, w * 3 / 2, w * 3 / 2];
        let kernels = [5, 5, 3, 3, 3];
        let pools = [true, true, false, false, true];
        let mut convs = Vec::new();
        let mut c_in = cfg.image_shape.channels;
        for i in 0..5 {
            let pad = if i == 0 { first_padding(cfg.image_shape.height, 2) } else { kernels[i] / 2 };
            let conv = Conv2d::new(init.sub(&format!("features{i}")), c_in, widths[i], kernels[i], 1, pad, true)?;
            convs.push((conv, pools[i]));
            c_in = widths[i];
        }
        let head = Linear::new(init.sub("classifier"), c_in * 16, cfg.num_classes)?;
        Ok(Self { convs, head })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for (conv, pool) in &self.convs {
            h = conv.forward(&h, mode)?.relu()?;
            if *pool {
                h = max_pool2(&h)?;
            }
        }
        let feat = h.flatten_from(1)?;
        Ok((self.head.forward(&feat, mode)?, feat))
    }
}

struct DenseLayer {
    bn1: Norm,
    conv1: Conv2d,
    bn2: Norm,
    conv2: Conv2d,
}

struct Transition {
    bn: Norm,
    conv: Conv2d,
}

struct DenseNet {
    stem: Conv2d,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: Norm,
    head: Linear,
}

impl DenseNet {
    fn new(init: &mut Init<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let g = cfg.width();
        let layout = [6, 12, 24, 16];
        let mut c = 2 * g;
        let stem = Conv2d::new(init.sub("stem"), cfg.image_shape.channels, c, 3, 1, 1, false)?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &n) in layout.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..n {
                let mut sub = init.sub(&format!("dense{bi}.{li}"));
                layers.push(DenseLayer {
                    bn1: Norm::Batch(BatchNorm::new(sub.sub("bn1"), c)?),
                    conv1: Conv2d::new(sub.sub("conv1"), c, 4 * g, 1, 1, 0, false)?,
                    bn2: Norm::Batch(BatchNorm::new(sub.sub("bn2"), 4 * g)?),
                    conv2: Conv2d::new(sub.sub("conv2"), 4 * g, g, 3, 1, 1, false)?,
                });
                c += g;
            }
            blocks.push(layers);
            if bi + 1 < layout.len() {
                let mut sub = init.sub(&format!("trans{bi}"));
                let out = c / 2;
                transitions.push(Transition {
                    bn: Norm::Batch(BatchNorm::new(sub.sub("bn"), c)?),
                    conv: Conv2d::new(sub.sub("conv"), c, out, 1, 1, 0, false)?,
                });
                c = out;
            }
        }
        let final_bn = Norm::Batch(BatchNorm::new(init.sub("final_bn"), c)?);
        let head = Linear::new(init.sub("classifier"), c, cfg.num_classes)?;
        Ok(Self {
            stem,
            blocks,
            transitions,
            final_bn,
            head,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let mut h = self.stem.forward(x, mode)?;
        for (bi, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                let y = l.conv1.forward(&l.bn1.forward(&h, mode)?.relu()?, mode)?;
                let y = l.conv2.forward(&l.bn2.forward(&y, mode)?.relu()?, mode)?;
                h = Tensor::cat(&[&h, &y], 1)?;
            }
            if let Some(t) = self.transitions.get(bi) {
                h = avg_pool2(&t.conv.forward(&t.bn.forward(&h, mode)?.relu()?, mode)?)?;
            }
        }
        let feat = global_avg_pool(&self.final_bn.forward(&h, mode)?.relu()?)?;
        Ok((self.head.forward(&feat, mode)?, feat))
    }
}

enum Net {
    ConvNet(ConvNet),
    ResNet(ResNet),
    Vgg(Vgg),
    AlexNet(AlexNet),
    DenseNet(DenseNet),
}

/// A randomly initialized image classifier exposing logits and penultimate features.
pub struct Classifier {
    config: ClassifierConfig,
    seed: u64,
    store: ParamStore,
    net: Net,
}

pub fn build_classifier(arch: Arch, num_classes: usize, image_shape: ImageShape, seed: u64) -> Result<Classifier> {
    build_classifier_with(&ClassifierConfig::new(arch, num_classes, image_shape), seed, DType::F32)
}

pub fn build_classifier_with(config: &ClassifierConfig, seed: u64, dtype: DType) -> Result<Classifier> {
    config.validate()?;
    let mut store = ParamStore::new(dtype, Device::Cpu);
    let mut rng = seed::rng(seed, &[]);
    let mut init = Init::new(&mut store, &mut rng);
    let net = match config.arch {
        Arch::Convnet3 => Net::ConvNet(ConvNet::new(&mut init, config)?),
        Arch::Resnet10 | Arch::Resnet18 | Arch::Resnet34 | Arch::Resnet50 => Net::ResNet(ResNet::new(&mut init, config)?),
        Arch::Vgg11 => Net::Vgg(Vgg::new(&mut init, config)?),
        Arch::Alexnet => Net::AlexNet(AlexNet::new(&mut init, config)?),
        Arch::Densenet121 => Net::DenseNet(DenseNet::new(&mut init, config)?),
    };
    Ok(Classifier {
        config: config.clone(),
        seed,
        store,
        net,
    })
}

impl Classifier {
    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Returns `(logits (B, C), features (B, F))`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.config.image_shape;
        if c != s.channels || h != s.height || w != s.width {
            return Err(validation_err!("{} expects {s} inputs, got {c}x{h}x{w}", self.config.arch));
        }
        let x = x.to_dtype(self.store.dtype())?;
        match &self.net {
            Net::ConvNet(n) => n.forward(&x, mode),
            Net::ResNet(n) => n.forward(&x, mode),
            Net::Vgg(n) => n.forward(&x, mode),
            Net::AlexNet(n) => n.forward(&x, mode),
            Net::DenseNet(n) => n.forward(&x, mode),
        }
    }
}

/// Logits and features of a batch through a frozen classifier; differentiable in the images.
pub fn forward_logits(classifier: &Classifier, batch: &LabeledImageBatch) -> Result<(Tensor, Tensor)> {
    classifier.forward(&batch.images, Mode::FROZEN)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite(t: &Tensor) -> bool {
        let v: Vec<f32> = t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1().unwrap();
        v.iter().all(|x| x.is_finite())
    }

    #[test]
    fn every_arch_builds_and_runs_at_32() {
        let shape = ImageShape::new(3, 32, 32);
        for arch in Arch::ALL {
            let mut cfg = ClassifierConfig::new(arch, 10, shape);
            cfg.width = Some(match arch {
                Arch::Densenet121 => 4,
                _ => 8,
            });
            let c = build_classifier_with(&cfg, 0, DType::F32).unwrap();
            let x = Tensor::rand(-1f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
            let (logits, feat) = c.forward(&x, Mode::TRAIN).unwrap();
            assert_eq!(logits.dims(), &[2, 10], "{arch}");
            assert_eq!(feat.dims()[0], 2);
            assert!(finite(&logits), "{arch}");
        }
    }

    #[test]
    fn mnist_resolution_and_rejections() {
        let shape = ImageShape::new(1, 28, 28);
        for arch in [Arch::Convnet3, Arch::Alexnet, Arch::Vgg11] {
            let mut cfg = ClassifierConfig::new(arch, 10, shape);
            cfg.width = Some(4);
            let c = build_classifier_with(&cfg, 1, DType::F32).unwrap();
            let x = Tensor::zeros((1, 1, 28, 28), DType::F32, &Device::Cpu).unwrap();
            assert_eq!(c.forward(&x, Mode::EVAL).unwrap().0.dims(), &[1, 10]);
        }
        let tiny = ImageShape::new(1, 8, 8);
        assert!(matches!(build_classifier(Arch::Vgg11, 10, tiny, 0), Err(Error::Config(_))));
        assert!(build_classifier(Arch::Resnet10, 10, ImageShape::new(1, 4, 4), 0).is_err());
        assert!("resnet-18".parse::<Arch>().unwrap() == Arch::Resnet18);
        assert!("lenet".parse::<Arch>().is_err());
    }

    #[test]
    fn convnet_feature_size() {
        let c = build_classifier(Arch::Convnet3, 10, ImageShape::new(3, 32, 32), 0).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let (_, f) = c.forward(&x, Mode::EVAL).unwrap();
        assert_eq!(f.dims(), &[1, 128 * 16]);
        let wrong = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(c.forward(&wrong, Mode::EVAL), Err(Error::Validation(_))));
    }

    #[test]
    fn equal_seeds_equal_parameters() {
        let s = ImageShape::new(1, 8, 8);
        let a = build_classifier(Arch::Resnet10, 4, s, 3).unwrap();
        let b = build_classifier(Arch::Resnet10, 4, s, 3).unwrap();
        assert_eq!(a.store().to_bytes().unwrap(), b.store().to_bytes().unwrap());
    }
}
