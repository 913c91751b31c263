//! Synthetic Gaussian-blob datasets and their portable on-disk form.
//!
//! Class `k` has a fixed random ±1 pattern `p_k` over all pixels; a sample is
//! `clip(0.5 + a·p_k + σ·ε, 0, 1)` with `a = 0.4·(1 − exp(−separation / 4))`,
//! `σ = 0.1` and `ε` standard normal. At `separation = 0` every class shares the
//! same distribution; at `separation = 10` the class means are far apart in every pixel.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{denormalize, normalize, DatasetHandle, DatasetSpec, ImageShape, RawPixels, Split};
use crate::error::{config_err, Error, Result};
use crate::seed;

const NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_shape: ImageShape,
    pub separation: f64,
    pub seed: u64,
}

impl ToyParams {
    pub fn new(num_classes: usize, per_class: usize, image_shape: ImageShape, separation: f64, seed: u64) -> Self {
        Self {
            num_classes,
            per_class,
            image_shape,
            separation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("toy dataset needs at least 2 classes"));
        }
        if self.per_class < 1 {
            return Err(config_err!("toy dataset needs per_class >= 1"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(config_err!("toy separation must be a finite non-negative number"));
        }
        if self.image_shape.numel() == 0 {
            return Err(config_err!("toy image shape {} is empty", self.image_shape));
        }
        Ok(())
    }

    pub fn amplitude(&self) -> f64 {
        0.4 * (1.0 - (-self.separation / 4.0).exp())
    }
}

/// Training split of a toy dataset.
pub fn make_toy_dataset(
    num_classes: usize,
    per_class: usize,
    image_shape: ImageShape,
    separation: f64,
    seed: u64,
) -> Result<DatasetHandle> {
    make_toy_split(
        &ToyParams::new(num_classes, per_class, image_shape, separation, seed),
        Split::Train,
    )
}

/// Train and test splits share class patterns and differ only in their noise draws.
pub fn make_toy_split(params: &ToyParams, split: Split) -> Result<DatasetHandle> {
    params.validate()?;
    let d = params.image_shape.numel();
    let mut pattern_rng = seed::rng(params.seed, &[seed::stream::TOY_DATA, 0]);
    let patterns: Vec<Vec<f64>> = (0..params.num_classes)
        .map(|_| {
            (0..d)
                .map(|_| if pattern_rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let split_tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut noise_rng = seed::rng(params.seed, &[seed::stream::TOY_DATA, split_tag]);
    let a = params.amplitude();
    let n = params.num_classes * params.per_class;
    let mut raw = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // Interleave classes so that any prefix is close to balanced.
        let class = i % params.num_classes;
        labels.push(class);
        for &p in &patterns[class] {
            let eps: f64 = noise_rng.sample(StandardNormal);
            raw.push((0.5 + a * p + NOISE_STD * eps).clamp(0.0, 1.0) as f32);
        }
    }
    let spec = DatasetSpec::toy(params.clone(), split);
    let images = normalize(RawPixels::Unit(&raw), &spec)?;
    DatasetHandle::from_normalized(spec, images, labels)
}

const MANIFEST: &str = "labels.csv";

/// Writes every sample as a binary PGM (1 channel) or PPM (3 channels) file plus
/// a `labels.csv` manifest with `file,label` rows.
pub fn export_image_dir(handle: &DatasetHandle, dir: &Path) -> Result<()> {
    let shape = handle.image_shape();
    let (magic, ext) = match shape.channels {
        1 => ("P5", "pgm"),
        3 => ("P6", "ppm"),
        c => return Err(config_err!("cannot export {c}-channel images as PGM/PPM")),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("file,label\n");
    let plane = shape.plane();
    for i in 0..handle.len() {
        let unit = denormalize(handle.image(i), handle.spec())?;
        let mut body = Vec::with_capacity(unit.len());
        // NetPBM stores interleaved channels row by row.
        for px in 0..plane {
            for c in 0..shape.channels {
                body.push((unit[c * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let name = format!("{i:06}.{ext}");
        let path = dir.join(&name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write!(f, "{magic}\n{} {}\n255\n", shape.width, shape.height).map_err(|e| Error::io(&path, e))?;
        f.write_all(&body).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{name},{}\n", handle.label(i)));
    }
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

fn parse_netpbm(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bad = |why: &str| Error::ingestion(path, why.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated NetPBM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("only binary PGM (P5) and PPM (P6) are supported")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric NetPBM header field"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit NetPBM images are supported"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * channels {
        return Err(bad("pixel data length disagrees with the header"));
    }
    Ok((channels, h, w, body.to_vec()))
}

/// Reads a directory written by [`export_image_dir`] into a handle described by `spec`.
pub fn load_image_dir(dir: &Path, spec: &DatasetSpec) -> Result<DatasetHandle> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let shape = spec.image_shape;
    let plane = shape.plane();
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (file, label) = line
            .split_once(',')
            .ok_or_else(|| Error::ingestion(&mpath, format!("line {}: expected file,label", lineno + 1)))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::ingestion(&mpath, format!("line {}: bad label {label:?}", lineno + 1)))?;
        let path = dir.join(file.trim());
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (c, h, w, body) = parse_netpbm(&bytes, &path)?;
        if ImageShape::new(c, h, w) != shape {
            return Err(Error::ingestion(&path, format!("image is {c}x{h}x{w}, spec expects {shape}")));
        }
        for ch in 0..c {
            raw.extend((0..plane).map(|px| body[px * c + ch]));
        }
        labels.push(label);
    }
    let images = normalize(RawPixels::Bytes(&raw), spec)?;
    DatasetHandle::from_normalized(spec.clone(), images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_fixture_size_and_balance() {
        let h = make_toy_dataset(2, 8, ImageShape::new(1, 8, 8), 10.0, 0).unwrap();
        assert_eq!(h.len(), 16);
        assert_eq!(h.class_indices(0).len(), 8);
        assert_eq!(h.class_indices(1).len(), 8);
        assert!(h.image(3).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn same_seed_same_bits() {
        let s = ImageShape::new(3, 8, 8);
        let a = make_toy_dataset(3, 4, s, 2.0, 9).unwrap();
        let b = make_toy_dataset(3, 4, s, 2.0, 9).unwrap();
        let c = make_toy_dataset(3, 4, s, 2.0, 10).unwrap();
        let bits = |h: &DatasetHandle| (0..h.len()).flat_map(|i| h.image(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn zero_separation_has_no_class_signal() {
        let p = ToyParams::new(2, 1, ImageShape::new(1, 4, 4), 0.0, 0);
        assert_eq!(p.amplitude(), 0.0);
        assert!(ToyParams::new(2, 0, ImageShape::new(1, 4, 4), 1.0, 0).validate().is_err());
        assert!(ToyParams::new(2, 1, ImageShape::new(1, 4, 4), -1.0, 0).validate().is_err());
    }

    #[test]
    fn export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let h = make_toy_dataset(3, 2, ImageShape::new(channels, 8, 8), 5.0, 1).unwrap();
            let sub = dir.path().join(format!("c{channels}"));
            export_image_dir(&h, &sub).unwrap();
            let back = load_image_dir(&sub, h.spec()).unwrap();
            assert_eq!(back.labels(), h.labels());
            for i in 0..h.len() {
                for (x, y) in h.image(i).iter().zip(back.image(i)) {
                    // 8-bit quantization: half a level in [0, 1] is 1/510, doubled by the [-1, 1] map.
                    assert!((x - y).abs() <= 1.0 / 255.0 + 1e-6);
                }
            }
        }
    }
}
