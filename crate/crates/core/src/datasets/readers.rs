//! Decoders for the on-disk formats of the canonical datasets.
//!
//! Each reader returns raw NCHW bytes plus labels in `[0, 10)`.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{DatasetName, DatasetSpec, Split};
use crate::error::{Error, Result};

type Raw = (Vec<u8>, Vec<usize>);

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::ingestion(path, format!("gzip stream is corrupt: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// First existing path among `dirs × names`, or an ingestion error naming the first candidate.
fn locate(root: &Path, dirs: &[&str], names: &[String]) -> Result<PathBuf> {
    for d in dirs {
        for n in names {
            let p = root.join(d).join(n);
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::ingestion(
        root.join(dirs[0]).join(&names[0]),
        "file not found".to_string(),
    ))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub(super) fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0000_0803 {
        return Err(Error::ingestion(path, "not an IDX image file (bad magic)"));
    }
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(Error::ingestion(
            path,
            format!("IDX header promises {want} bytes, file has {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub(super) fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0000_0801 {
        return Err(Error::ingestion(path, "not an IDX label file (bad magic)"));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::ingestion(
            path,
            format!("IDX header promises {n} labels, file has {}", bytes.len() - 8),
        ));
    }
    let labels: Vec<usize> = bytes[8..].iter().map(|&b| b as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::ingestion(path, format!("label {bad} outside [0, 10)")));
    }
    Ok(labels)
}

pub(super) fn read_idx(spec: &DatasetSpec) -> Result<Raw> {
    let dirs: &[&str] = match spec.name {
        DatasetName::Mnist => &["", "mnist", "MNIST/raw", "MNIST"],
        _ => &["", "fashionmnist", "fashion-mnist", "FashionMNIST/raw", "FashionMNIST"],
    };
    let prefix = match spec.split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let names = |kind: &str| {
        vec![
            format!("{prefix}-{kind}"),
            format!("{prefix}-{kind}.gz"),
            format!("{prefix}-{}", kind.replace("-idx", ".idx")),
        ]
    };
    let img_path = locate(&spec.root_path, dirs, &names("images-idx3-ubyte"))?;
    let lbl_path = locate(&spec.root_path, dirs, &names("labels-idx1-ubyte"))?;
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(&img_path)?, &img_path)?;
    if (rows, cols) != (28, 28) {
        return Err(Error::ingestion(&img_path, format!("images are {rows}x{cols}, expected 28x28")));
    }
    let labels = parse_idx_labels(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if labels.len() != n {
        return Err(Error::ingestion(
            &lbl_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    Ok((pixels, labels))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub(super) fn parse_cifar_batch(bytes: &[u8], path: &Path, out: &mut Raw) -> Result<()> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::ingestion(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::ingestion(path, format!("label {label} outside [0, 10)")));
        }
        out.1.push(label);
        out.0.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

pub(super) fn read_cifar10(spec: &DatasetSpec) -> Result<Raw> {
    let dirs = ["cifar-10-batches-bin", "cifar10/cifar-10-batches-bin", "cifar10", ""];
    let files: Vec<String> = match spec.split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut out = (Vec::new(), Vec::new());
    for f in &files {
        let path = locate(&spec.root_path, &dirs, std::slice::from_ref(f))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        parse_cifar_batch(&bytes, &path, &mut out)?;
    }
    Ok(out)
}

/// Decodes an SVHN cropped-digit archive: `X` is 32×32×3×N uint8 in column-major order,
/// `y` holds labels 1..=10 with 10 standing for digit 0.
pub(super) fn parse_svhn(bytes: &[u8], path: &Path) -> Result<Raw> {
    let mat = matfile::MatFile::parse(bytes)
        .map_err(|e| Error::ingestion(path, format!("cannot parse MAT file: {e}")))?;
    let x = mat
        .find_by_name("X")
        .ok_or_else(|| Error::ingestion(path, "MAT file has no array X"))?;
    let y = mat
        .find_by_name("y")
        .ok_or_else(|| Error::ingestion(path, "MAT file has no array y"))?;
    let size = x.size();
    if size.len() != 4 || size[0] != 32 || size[1] != 32 || size[2] != 3 {
        return Err(Error::ingestion(path, format!("X has shape {size:?}, expected [32, 32, 3, N]")));
    }
    let n = size[3];
    let xs: Vec<u8> = match x.data() {
        matfile::NumericData::UInt8 { real, .. } => real.clone(),
        matfile::NumericData::Double { real, .. } => real.iter().map(|&v| v.clamp(0.0, 255.0) as u8).collect(),
        _ => return Err(Error::ingestion(path, "X must be uint8")),
    };
    let ys: Vec<f64> = match y.data() {
        matfile::NumericData::Double { real, .. } => real.clone(),
        matfile::NumericData::UInt8 { real, .. } => real.iter().map(|&v| v as f64).collect(),
        _ => return Err(Error::ingestion(path, "y must be numeric")),
    };
    if ys.len() != n || xs.len() != n * 3072 {
        return Err(Error::ingestion(path, format!("{} labels for {n} images", ys.len())));
    }
    let mut pixels = vec![0u8; n * 3072];
    for i in 0..n {
        for c in 0..3 {
            for h in 0..32 {
                for w in 0..32 {
                    pixels[i * 3072 + c * 1024 + h * 32 + w] = xs[h + 32 * w + 1024 * c + 3072 * i];
                }
            }
        }
    }
    let labels = ys
        .iter()
        .map(|&v| {
            let l = v.round() as i64;
            match l {
                10 => Ok(0),
                0..=9 => Ok(l as usize),
                _ => Err(Error::ingestion(path, format!("label {v} outside 1..=10"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((pixels, labels))
}

pub(super) fn read_svhn(spec: &DatasetSpec) -> Result<Raw> {
    let name = match spec.split {
        Split::Train => "train_32x32.mat",
        Split::Test => "test_32x32.mat",
    };
    let path = locate(&spec.root_path, &["svhn", "SVHN", ""], &[name.to_string()])?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    parse_svhn(&bytes, &path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x803u32, n, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_roundtrip_and_corruption() {
        let p = Path::new("x");
        let px: Vec<u8> = (0..2 * 784).map(|i| (i % 251) as u8).collect();
        let (n, r, c, got) = parse_idx_images(&idx_images(2, &px), p).unwrap();
        assert_eq!((n, r, c), (2, 28, 28));
        assert_eq!(got, px);
        let truncated = idx_images(3, &px);
        assert!(matches!(parse_idx_images(&truncated, p), Err(Error::Ingestion { .. })));
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 2];
        labels.extend([3, 9]);
        assert_eq!(parse_idx_labels(&labels, p).unwrap(), vec![3, 9]);
        labels[9] = 11;
        assert!(parse_idx_labels(&labels, p).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![7u8];
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
        let mut out = (Vec::new(), Vec::new());
        parse_cifar_batch(&bytes, Path::new("b"), &mut out).unwrap();
        assert_eq!(out.1, vec![7]);
        assert_eq!(out.0.len(), 3072);
        assert!(parse_cifar_batch(&bytes[..100], Path::new("b"), &mut out).is_err());
    }
}
