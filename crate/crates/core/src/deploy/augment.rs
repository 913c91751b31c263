//! Siamese-style image augmentation on normalized NCHW batches.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledImageBatch;
use crate::error::{config_err, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Crop,
    Cutout,
    Flip,
    Scale,
    Rotate,
    ColorBrightness,
    ColorSaturation,
    ColorContrast,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 8] = [
        AugmentOp::Crop,
        AugmentOp::Cutout,
        AugmentOp::Flip,
        AugmentOp::Scale,
        AugmentOp::Rotate,
        AugmentOp::ColorBrightness,
        AugmentOp::ColorSaturation,
        AugmentOp::ColorContrast,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentOp::Crop => "crop",
            AugmentOp::Cutout => "cutout",
            AugmentOp::Flip => "flip",
            AugmentOp::Scale => "scale",
            AugmentOp::Rotate => "rotate",
            AugmentOp::ColorBrightness => "color_brightness",
            AugmentOp::ColorSaturation => "color_saturation",
            AugmentOp::ColorContrast => "color_contrast",
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.as_str() == key)
            .ok_or_else(|| config_err!("unknown augmentation op {s:?}"))
    }
}

/// The default deployment policy: every op is eligible.
pub fn default_policy() -> Vec<AugmentOp> {
    AugmentOp::ALL.to_vec()
}

pub fn parse_policy(names: &[String]) -> Result<Vec<AugmentOp>> {
    names.iter().map(|n| n.parse()).collect()
}

const CROP_RATIO: f64 = 0.125;
const CUTOUT_RATIO: f64 = 0.5;
const SCALE_RATIO: f64 = 1.2;
const ROTATE_DEGREES: f64 = 15.0;
const BRIGHTNESS: f64 = 1.0;
const SATURATION: f64 = 2.0;
const CONTRAST: f64 = 0.5;

struct Images {
    data: Vec<f32>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Images {
    fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self { data, n, c, h, w })
    }

    fn at(&self, i: usize, ch: usize, y: usize, x: usize) -> f32 {
        self.data[((i * self.c + ch) * self.h + y) * self.w + x]
    }

    /// Zero outside the image, bilinear inside.
    fn bilinear(&self, i: usize, ch: usize, y: f64, x: f64) -> f32 {
        let (y0, x0) = (y.floor(), x.floor());
        let (dy, dx) = ((y - y0) as f32, (x - x0) as f32);
        let get = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= self.h as f64 || xx >= self.w as f64 {
                0.0
            } else {
                self.at(i, ch, yy as usize, xx as usize)
            }
        };
        get(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + get(y0, x0 + 1.0) * (1.0 - dy) * dx
            + get(y0 + 1.0, x0) * dy * (1.0 - dx)
            + get(y0 + 1.0, x0 + 1.0) * dy * dx
    }

    /// Resamples every image through an inverse affine map around the image center.
    fn warp(&self, maps: &[[f64; 4]]) -> Vec<f32> {
        let mut out = vec![0f32; self.data.len()];
        let (cy, cx) = ((self.h as f64 - 1.0) / 2.0, (self.w as f64 - 1.0) / 2.0);
        for (i, m) in maps.iter().enumerate() {
            for ch in 0..self.c {
                for y in 0..self.h {
                    for x in 0..self.w {
                        let (u, v) = (y as f64 - cy, x as f64 - cx);
                        let sy = m[0] * u + m[1] * v + cy;
                        let sx = m[2] * u + m[3] * v + cx;
                        out[((i * self.c + ch) * self.h + y) * self.w + x] = self.bilinear(i, ch, sy, sx);
                    }
                }
            }
        }
        out
    }
}

/// Applies `op` with parameters drawn from `rng`, one draw per image.
pub fn apply_op(batch: &LabeledImageBatch, op: AugmentOp, rng: &mut ChaCha8Rng) -> Result<LabeledImageBatch> {
    let img = Images::from_tensor(&batch.images)?;
    let (n, c, h, w) = (img.n, img.c, img.h, img.w);
    let plane = h * w;
    let mut out = img.data.clone();
    match op {
        AugmentOp::Flip => {
            for i in 0..n {
                if rng.random::<bool>() {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                out[((i * c + ch) * h + y) * w + x] = img.at(i, ch, y, w - 1 - x);
                            }
                        }
                    }
                }
            }
        }
        AugmentOp::Crop => {
            let (my, mx) = ((h as f64 * CROP_RATIO).round() as i64, (w as f64 * CROP_RATIO).round() as i64);
            for i in 0..n {
                let ty = rng.random_range(-my..=my);
                let tx = rng.random_range(-mx..=mx);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = (y as i64 + ty, x as i64 + tx);
                            let v = if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                0.0
                            } else {
                                img.at(i, ch, sy as usize, sx as usize)
                            };
                            out[((i * c + ch) * h + y) * w + x] = v;
                        }
                    }
                }
            }
        }
        AugmentOp::Cutout => {
            let (ch_, cw) = ((h as f64 * CUTOUT_RATIO).round() as i64, (w as f64 * CUTOUT_RATIO).round() as i64);
            for i in 0..n {
                let oy = rng.random_range(0..h as i64);
                let ox = rng.random_range(0..w as i64);
                let (y0, y1) = ((oy - ch_ / 2).max(0), (oy - ch_ / 2 + ch_).min(h as i64));
                let (x0, x1) = ((ox - cw / 2).max(0), (ox - cw / 2 + cw).min(w as i64));
                for ch in 0..c {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            out[((i * c + ch) * h + y as usize) * w + x as usize] = 0.0;
                        }
                    }
                }
            }
        }
        AugmentOp::Scale => {
            let maps: Vec<[f64; 4]> = (0..n)
                .map(|_| {
                    let sy = rng.random_range(1.0 / SCALE_RATIO..SCALE_RATIO);
                    let sx = rng.random_range(1.0 / SCALE_RATIO..SCALE_RATIO);
                    [1.0 / sy, 0.0, 0.0, 1.0 / sx]
                })
                .collect();
            out = img.warp(&maps);
        }
        AugmentOp::Rotate => {
            let maps: Vec<[f64; 4]> = (0..n)
                .map(|_| {
                    let t = rng.random_range(-ROTATE_DEGREES..ROTATE_DEGREES).to_radians();
                    [t.cos(), t.sin(), -t.sin(), t.cos()]
                })
                .collect();
            out = img.warp(&maps);
        }
        AugmentOp::ColorBrightness => {
            for i in 0..n {
                let b = (rng.random::<f64>() - 0.5) * BRIGHTNESS;
                for v in &mut out[i * c * plane..(i + 1) * c * plane] {
                    *v += b as f32;
                }
            }
        }
        AugmentOp::ColorSaturation => {
            for i in 0..n {
                let s = (rng.random::<f64>() * SATURATION) as f32;
                for p in 0..plane {
                    let mean = (0..c).map(|ch| img.data[(i * c + ch) * plane + p]).sum::<f32>() / c as f32;
                    for ch in 0..c {
                        let k = (i * c + ch) * plane + p;
                        out[k] = mean + (img.data[k] - mean) * s;
                    }
                }
            }
        }
        AugmentOp::ColorContrast => {
            for i in 0..n {
                let s = (rng.random::<f64>() + CONTRAST) as f32;
                let slice = &img.data[i * c * plane..(i + 1) * c * plane];
                let mean = slice.iter().sum::<f32>() / slice.len() as f32;
                for (o, &v) in out[i * c * plane..(i + 1) * c * plane].iter_mut().zip(slice) {
                    *o = mean + (v - mean) * s;
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, 1.0);
    }
    let images = Tensor::from_vec(out, (n, c, h, w), batch.images.device())?.to_dtype(batch.images.dtype())?;
    LabeledImageBatch::new(images, batch.labels.clone())
}

/// Samples one op from `policy` and applies it; an empty policy returns the batch unchanged.
pub fn dsa_augment(batch: &LabeledImageBatch, policy: &[AugmentOp], aug_seed: u64) -> Result<LabeledImageBatch> {
    if policy.is_empty() {
        return Ok(batch.clone());
    }
    let mut rng = seed::rng(aug_seed, &[seed::stream::AUGMENT]);
    let op = policy[rng.random_range(0..policy.len())];
    apply_op(batch, op, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::LabelVector;
    use candle_core::Device;

    fn batch() -> LabeledImageBatch {
        let v: Vec<f32> = (0..2 * 3 * 8 * 8).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let t = Tensor::from_vec(v, (2, 3, 8, 8), &Device::Cpu).unwrap();
        LabeledImageBatch::new(t, LabelVector::new(vec![0, 1], 2).unwrap()).unwrap()
    }

    fn values(b: &LabeledImageBatch) -> Vec<f32> {
        b.images.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn names_roundtrip() {
        for op in AugmentOp::ALL {
            assert_eq!(op.as_str().parse::<AugmentOp>().unwrap(), op);
        }
        assert!(matches!("blur".parse::<AugmentOp>(), Err(e) if e.is_config()));
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let b = batch();
        let img = Images::from_tensor(&b.images).unwrap();
        assert_eq!(img.warp(&[[1.0, 0.0, 0.0, 1.0]; 2]), values(&b));
    }

    #[test]
    fn every_op_keeps_labels_shape_and_range() {
        let b = batch();
        for op in AugmentOp::ALL {
            let mut rng = seed::rng(3, &[]);
            let a = apply_op(&b, op, &mut rng).unwrap();
            assert_eq!(a.images.dims(), b.images.dims(), "{op}");
            assert_eq!(a.labels, b.labels);
            assert!(a.max_abs().unwrap() <= 1.0);
        }
    }
}
