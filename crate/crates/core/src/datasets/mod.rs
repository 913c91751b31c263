//! Labeled image datasets: canonical archives, toy fixtures, label-aligned sampling.
//!
//! All images handed to models live in `[-1, 1]`, the range of the generator's
//! tanh output, so real and synthetic batches can be compared directly.

mod readers;
mod toy;

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation_err, Error, Result};
use crate::seed;

pub use toy::{export_image_dir, load_image_dir, make_toy_dataset, make_toy_split, ToyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Fashionmnist,
    Svhn,
    Cifar10,
    Toy,
}

impl DatasetName {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Fashionmnist => "fashionmnist",
            DatasetName::Svhn => "svhn",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Toy => "toy",
        }
    }

    /// Canonical (train, test) split sizes.
    pub fn canonical_sizes(&self) -> Option<(usize, usize)> {
        match self {
            DatasetName::Mnist | DatasetName::Fashionmnist => Some((60_000, 10_000)),
            DatasetName::Svhn => Some((73_257, 26_032)),
            DatasetName::Cifar10 => Some((50_000, 10_000)),
            DatasetName::Toy => None,
        }
    }
}

impl std::str::FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mnist" => Ok(DatasetName::Mnist),
            "fashionmnist" => Ok(DatasetName::Fashionmnist),
            "svhn" => Ok(DatasetName::Svhn),
            "cifar10" => Ok(DatasetName::Cifar10),
            "toy" => Ok(DatasetName::Toy),
            _ => Err(config_err!("unknown dataset name {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Per-channel affine map from `[0, 1]` pixels into model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// mean 0.5, std 0.5: maps `[0, 1]` exactly onto `[-1, 1]`.
    pub fn symmetric(channels: usize) -> Self {
        Self {
            mean: vec![0.5; channels],
            std: vec![0.5; channels],
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(config_err!(
                "normalization needs {channels} (mean, std) pairs, got {} means and {} stds",
                self.mean.len(),
                self.std.len()
            ));
        }
        for (c, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            if !(s > 0.0) {
                return Err(config_err!("normalization std for channel {c} must be positive"));
            }
            // [0, 1] must land inside [-1, 1].
            if m > s + 1e-12 || 1.0 - m > s + 1e-12 {
                return Err(config_err!(
                    "normalization (mean {m}, std {s}) for channel {c} maps [0, 1] outside [-1, 1]"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub image_shape: ImageShape,
    pub num_classes: usize,
    pub split: Split,
    pub root_path: PathBuf,
    pub normalization: Normalization,
    /// Generation parameters when `name` is `toy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyParams>,
}

impl DatasetSpec {
    /// Spec for one of the canonical datasets with the native resolution.
    pub fn standard(name: DatasetName, split: Split, root: impl Into<PathBuf>) -> Result<Self> {
        let image_shape = match name {
            DatasetName::Mnist | DatasetName::Fashionmnist => ImageShape::new(1, 28, 28),
            DatasetName::Svhn | DatasetName::Cifar10 => ImageShape::new(3, 32, 32),
            DatasetName::Toy => {
                return Err(config_err!("toy datasets are built with DatasetSpec::toy"))
            }
        };
        Ok(Self {
            name,
            image_shape,
            num_classes: 10,
            split,
            root_path: root.into(),
            normalization: Normalization::symmetric(image_shape.channels),
            toy: None,
        })
    }

    pub fn toy(params: ToyParams, split: Split) -> Self {
        Self {
            name: DatasetName::Toy,
            image_shape: params.image_shape,
            num_classes: params.num_classes,
            split,
            root_path: PathBuf::new(),
            normalization: Normalization::symmetric(params.image_shape.channels),
            toy: Some(params),
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self {
            split,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let s = self.image_shape;
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(config_err!("image shape {s} has an empty axis"));
        }
        let native = match self.name {
            DatasetName::Mnist | DatasetName::Fashionmnist => Some(ImageShape::new(1, 28, 28)),
            DatasetName::Svhn | DatasetName::Cifar10 => Some(ImageShape::new(3, 32, 32)),
            DatasetName::Toy => None,
        };
        if let Some(native) = native {
            if s != native {
                return Err(config_err!(
                    "{} images are {native}, spec declares {s}",
                    self.name.as_str()
                ));
            }
            if self.num_classes != 10 {
                return Err(config_err!("{} has 10 classes", self.name.as_str()));
            }
        }
        if self.name == DatasetName::Toy {
            let p = self
                .toy
                .as_ref()
                .ok_or_else(|| config_err!("toy dataset spec without toy parameters"))?;
            p.validate()?;
            if p.num_classes != self.num_classes || p.image_shape != s {
                return Err(config_err!("toy parameters disagree with the dataset spec"));
            }
        }
        self.normalization.validate(s.channels)
    }
}

/// Pixels before normalization.
pub enum RawPixels<'a> {
    /// Values in `[0, 255]`.
    Bytes(&'a [u8]),
    /// Values in `[0, 1]`.
    Unit(&'a [f32]),
}

impl RawPixels<'_> {
    fn len(&self) -> usize {
        match self {
            RawPixels::Bytes(b) => b.len(),
            RawPixels::Unit(u) => u.len(),
        }
    }
}

/// Maps raw NCHW pixels into `[-1, 1]` using the spec's per-channel statistics.
pub fn normalize(raw: RawPixels<'_>, spec: &DatasetSpec) -> Result<Vec<f32>> {
    let shape = spec.image_shape;
    spec.normalization.validate(shape.channels)?;
    if raw.len() % shape.numel() != 0 {
        return Err(validation_err!(
            "{} pixels is not a whole number of {shape} images",
            raw.len()
        ));
    }
    let plane = shape.plane();
    let norm = &spec.normalization;
    let map = |i: usize, unit: f64| -> f32 {
        let c = (i / plane) % shape.channels;
        ((unit - norm.mean[c]) / norm.std[c]).clamp(-1.0, 1.0) as f32
    };
    match raw {
        RawPixels::Bytes(b) => Ok(b
            .iter()
            .enumerate()
            .map(|(i, &v)| map(i, v as f64 / 255.0))
            .collect()),
        RawPixels::Unit(u) => {
            if let Some((i, v)) = u
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(validation_err!("pixel {i} = {v} lies outside [0, 1]"));
            }
            Ok(u.iter().enumerate().map(|(i, &v)| map(i, v as f64)).collect())
        }
    }
}

/// Inverse of [`normalize`]: model-space values back to `[0, 1]` pixels.
pub fn denormalize(images: &[f32], spec: &DatasetSpec) -> Result<Vec<f32>> {
    let shape = spec.image_shape;
    if images.len() % shape.numel() != 0 {
        return Err(validation_err!("{} values is not a whole number of {shape} images", images.len()));
    }
    let plane = shape.plane();
    let norm = &spec.normalization;
    Ok(images
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % shape.channels;
            (v as f64 * norm.std[c] + norm.mean[c]) as f32
        })
        .collect())
}

/// Integer labels in `[0, C)` with a derived one-hot view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(validation_err!("label vector needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(validation_err!("label {bad} outside [0, {num_classes})"));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    /// `count` labels drawn uniformly over the classes.
    pub fn uniform(count: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let labels = (0..count).map(|_| rng.random_range(0..num_classes)).collect();
        Self::new(labels, num_classes)
    }

    /// `per_class` copies of every class, in class order.
    pub fn balanced(per_class: usize, num_classes: usize) -> Result<Self> {
        let labels = (0..num_classes)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .collect();
        Self::new(labels, num_classes)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            labels: self.labels[start..start + len].to_vec(),
            num_classes: self.num_classes,
        }
    }

    pub fn one_hot(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let mut data = vec![0f32; self.labels.len() * self.num_classes];
        for (row, &l) in self.labels.iter().enumerate() {
            data[row * self.num_classes + l] = 1.0;
        }
        Ok(Tensor::from_vec(data, (self.labels.len(), self.num_classes), device)?.to_dtype(dtype)?)
    }
}

/// A batch of `[-1, 1]` images with index-aligned labels.
#[derive(Debug, Clone)]
pub struct LabeledImageBatch {
    pub images: Tensor,
    pub labels: LabelVector,
}

impl LabeledImageBatch {
    pub fn new(images: Tensor, labels: LabelVector) -> Result<Self> {
        let (b, _, _, _) = images.dims4()?;
        if b != labels.len() {
            return Err(validation_err!("batch has {b} images but {} labels", labels.len()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Largest absolute pixel value.
    pub fn max_abs(&self) -> Result<f64> {
        if self.is_empty() {
            return Ok(0.0);
        }
        let m = self.images.abs()?.flatten_all()?.max(0)?;
        Ok(m.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn check_range(&self) -> Result<()> {
        let m = self.max_abs()?;
        if !(m <= 1.0 + 1e-6) {
            return Err(validation_err!("batch pixel magnitude {m} exceeds 1"));
        }
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            images: self.images.to_dtype(dtype)?,
            labels: self.labels.clone(),
        })
    }
}

struct Storage {
    images: Vec<f32>,
    labels: Vec<usize>,
    class_index: Vec<Vec<usize>>,
}

/// Immutable, cheaply clonable view of one dataset split.
#[derive(Clone)]
pub struct DatasetHandle {
    spec: DatasetSpec,
    data: Arc<Storage>,
}

impl std::fmt::Debug for DatasetHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetHandle")
            .field("name", &self.spec.name)
            .field("split", &self.spec.split)
            .field("len", &self.len())
            .finish()
    }
}

impl DatasetHandle {
    /// Builds a handle from normalized NCHW images and labels.
    pub fn from_normalized(spec: DatasetSpec, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let numel = spec.image_shape.numel();
        if images.len() != labels.len() * numel {
            return Err(validation_err!(
                "{} labels need {} pixel values, got {}",
                labels.len(),
                labels.len() * numel,
                images.len()
            ));
        }
        let mut class_index = vec![Vec::new(); spec.num_classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= spec.num_classes {
                return Err(validation_err!("sample {i} has label {l}, outside [0, {})", spec.num_classes));
            }
            class_index[l].push(i);
        }
        Ok(Self {
            spec,
            data: Arc::new(Storage {
                images,
                labels,
                class_index,
            }),
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.data.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn image_shape(&self) -> ImageShape {
        self.spec.image_shape
    }

    pub fn class_indices(&self, class: usize) -> &[usize] {
        self.data.class_index.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn label(&self, index: usize) -> usize {
        self.data.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.data.labels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.spec.image_shape.numel();
        &self.data.images[index * n..(index + 1) * n]
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<LabeledImageBatch> {
        let shape = self.spec.image_shape;
        let mut pixels = Vec::with_capacity(indices.len() * shape.numel());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(validation_err!("index {i} out of range for {} samples", self.len()));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.label(i));
        }
        let images = Tensor::from_vec(
            pixels,
            (indices.len(), shape.channels, shape.height, shape.width),
            &Device::Cpu,
        )?;
        LabeledImageBatch::new(images, LabelVector::new(labels, self.spec.num_classes)?)
    }
}

/// Loads one split described by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<DatasetHandle> {
    spec.validate()?;
    let (pixels, labels) = match spec.name {
        DatasetName::Toy => {
            let params = spec.toy.clone().expect("validated");
            return make_toy_split(&params, spec.split);
        }
        DatasetName::Mnist | DatasetName::Fashionmnist => readers::read_idx(spec)?,
        DatasetName::Cifar10 => readers::read_cifar10(spec)?,
        DatasetName::Svhn => readers::read_svhn(spec)?,
    };
    if let Some((train, test)) = spec.name.canonical_sizes() {
        let want = if spec.split == Split::Train { train } else { test };
        if labels.len() != want {
            return Err(Error::ingestion(
                &spec.root_path,
                format!(
                    "{} {:?} split has {} samples, canonical size is {want}",
                    spec.name.as_str(),
                    spec.split,
                    labels.len()
                ),
            ));
        }
    }
    let images = normalize(RawPixels::Bytes(&pixels), spec)?;
    DatasetHandle::from_normalized(spec.clone(), images, labels)
}

/// Draws one real image per requested label, uniformly within the class and with replacement.
pub fn sample_real_batch(
    handle: &DatasetHandle,
    labels: &LabelVector,
    rng_seed: u64,
) -> Result<LabeledImageBatch> {
    let mut rng = seed::rng(rng_seed, &[]);
    sample_real_batch_with(handle, labels, &mut rng)
}

pub(crate) fn sample_real_batch_with(
    handle: &DatasetHandle,
    labels: &LabelVector,
    rng: &mut impl Rng,
) -> Result<LabeledImageBatch> {
    if labels.num_classes() != handle.num_classes() {
        return Err(validation_err!(
            "labels span {} classes, dataset has {}",
            labels.num_classes(),
            handle.num_classes()
        ));
    }
    let mut indices = Vec::with_capacity(labels.len());
    for &l in labels.as_slice() {
        let members = handle.class_indices(l);
        if members.is_empty() {
            return Err(Error::MissingLabel { label: l });
        }
        indices.push(members[rng.random_range(0..members.len())]);
    }
    handle.batch(&indices)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> DatasetHandle {
        make_toy_dataset(classes, per_class, ImageShape::new(1, 8, 8), 10.0, 0).unwrap()
    }

    #[test]
    fn sampled_labels_follow_request() {
        let h = toy(10, 4);
        let req = LabelVector::new(vec![3, 3, 7], 10).unwrap();
        let b = sample_real_batch(&h, &req, 5).unwrap();
        assert_eq!(b.labels.as_slice(), &[3, 3, 7]);
        assert_eq!(b.images.dims(), &[3, 1, 8, 8]);
        b.check_range().unwrap();
        let again = sample_real_batch(&h, &req, 5).unwrap();
        let a: Vec<f32> = b.images.flatten_all().unwrap().to_vec1().unwrap();
        let c: Vec<f32> = again.images.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn sampled_images_carry_requested_label() {
        let h = toy(4, 6);
        let req = LabelVector::new((0..200).map(|i| i % 4).collect(), 4).unwrap();
        let mut rng = seed::rng(1, &[]);
        let mut idx = Vec::new();
        for &l in req.as_slice() {
            let m = h.class_indices(l);
            idx.push(m[rng.random_range(0..m.len())]);
        }
        assert!(idx.iter().zip(req.as_slice()).all(|(&i, &l)| h.label(i) == l));
    }

    #[test]
    fn missing_label_is_named() {
        let spec = DatasetSpec::toy(ToyParams::new(3, 1, ImageShape::new(1, 8, 8), 1.0, 0), Split::Train);
        let h = DatasetHandle::from_normalized(spec, vec![0.0; 64 * 2], vec![0, 2]).unwrap();
        let req = LabelVector::new(vec![0, 1], 3).unwrap();
        match sample_real_batch(&h, &req, 0) {
            Err(Error::MissingLabel { label }) => assert_eq!(label, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_lists_partition_indices() {
        let h = toy(5, 7);
        let mut all: Vec<usize> = (0..5).flat_map(|c| h.class_indices(c).to_vec()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..h.len()).collect::<Vec<_>>());
    }

    #[test]
    fn normalization_arithmetic() {
        let spec = DatasetSpec::toy(ToyParams::new(2, 1, ImageShape::new(1, 2, 2), 1.0, 0), Split::Train);
        let zeros = normalize(RawPixels::Unit(&[0.0; 4]), &spec).unwrap();
        assert_eq!(zeros, vec![-1.0; 4]);
        let gray = normalize(RawPixels::Unit(&[0.5; 4]), &spec).unwrap();
        assert_eq!(gray, vec![0.0; 4]);
        let bytes = normalize(RawPixels::Bytes(&[0, 255, 0, 255]), &spec).unwrap();
        assert_eq!(bytes, vec![-1.0, 1.0, -1.0, 1.0]);
        assert!(normalize(RawPixels::Unit(&[0.0, 1.5, 0.0, 0.0]), &spec).is_err());
        assert!(normalize(RawPixels::Unit(&[0.0; 3]), &spec).is_err());
    }

    #[test]
    fn normalization_must_stay_in_range() {
        let mut spec = DatasetSpec::standard(DatasetName::Cifar10, Split::Train, "/nonexistent").unwrap();
        spec.normalization = Normalization {
            mean: vec![0.49, 0.48, 0.45],
            std: vec![0.25, 0.24, 0.26],
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn spec_validation() {
        let mut spec = DatasetSpec::standard(DatasetName::Mnist, Split::Train, "/x").unwrap();
        assert_eq!(spec.image_shape, ImageShape::new(1, 28, 28));
        spec.validate().unwrap();
        spec.image_shape = ImageShape::new(1, 32, 32);
        assert!(spec.validate().is_err());
        assert!("imagenet".parse::<DatasetName>().is_err());
        assert_eq!("Fashion-MNIST".parse::<DatasetName>().unwrap(), DatasetName::Fashionmnist);
        let svhn = DatasetSpec::standard(DatasetName::Svhn, Split::Test, "/x").unwrap();
        assert_eq!(svhn.image_shape, ImageShape::new(3, 32, 32));
    }

    #[test]
    fn missing_files_report_path() {
        let spec = DatasetSpec::standard(DatasetName::Cifar10, Split::Test, "/definitely/missing").unwrap();
        match load_dataset(&spec) {
            Err(Error::Ingestion { path, .. }) => assert!(path.starts_with("/definitely/missing")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let l = LabelVector::new(vec![0, 2, 1, 2], 3).unwrap();
        let oh = l.one_hot(DType::F32, &Device::Cpu).unwrap();
        let sums: Vec<f32> = oh.sum(1).unwrap().to_vec1().unwrap();
        assert_eq!(sums, vec![1.0; 4]);
        let rows: Vec<Vec<f32>> = oh.to_vec2().unwrap();
        assert_eq!(rows[1], vec![0.0, 0.0, 1.0]);
        assert!(LabelVector::new(vec![3], 3).is_err());
    }
}
