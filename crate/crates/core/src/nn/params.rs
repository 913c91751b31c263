//! Named parameter storage with seeded initialization and a flat binary format.

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Param,
    Buffer,
}

#[derive(Clone)]
pub struct Entry {
    pub name: String,
    pub role: Role,
    pub var: Var,
}

/// Shape record used by manifests; framework agnostic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub role: Role,
    pub shape: Vec<usize>,
}

/// Ordered collection of trainable parameters and non-trainable buffers.
///
/// Registration order is the serialization order.
#[derive(Clone)]
pub struct ParamStore {
    entries: Vec<Entry>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            entries: Vec::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Param)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Param)
            .map(|e| e.var.elem_count())
            .sum()
    }

    pub fn records(&self) -> Vec<TensorRecord> {
        self.entries
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                role: e.role,
                shape: e.var.dims().to_vec(),
            })
            .collect()
    }

    fn push(&mut self, name: String, role: Role, values: Vec<f32>, shape: &[usize]) -> Result<Var> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(validation_err!("duplicate parameter name {name}"));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.push(Entry {
            name,
            role,
            var: var.clone(),
        });
        Ok(var)
    }

    /// Little-endian dump of every entry in registration order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for e in &self.entries {
            let flat = e.var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Overwrites every entry from a blob written by [`ParamStore::to_bytes`].
    pub fn load_bytes(&self, bytes: &[u8]) -> Result<()> {
        let width = if self.dtype == DType::F64 { 8 } else { 4 };
        let total: usize = self.entries.iter().map(|e| e.var.elem_count()).sum();
        if bytes.len() != total * width {
            return Err(validation_err!(
                "parameter blob has {} bytes, expected {}",
                bytes.len(),
                total * width
            ));
        }
        let mut offset = 0;
        for e in &self.entries {
            let n = e.var.elem_count();
            let chunk = &bytes[offset..offset + n * width];
            let t = if width == 8 {
                let v: Vec<f64> = chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, e.var.shape(), &self.device)?
            } else {
                let v: Vec<f32> = chunk
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, e.var.shape(), &self.device)?.to_dtype(self.dtype)?
            };
            e.var.set(&t)?;
            offset += n * width;
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Copies values from another store with identical layout.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        if self.records() != other.records() {
            return Err(validation_err!("parameter layouts differ"));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            a.var.set(&b.var.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Sets every entry, parameters and buffers alike, to zero.
    pub fn zero_all(&self) -> Result<()> {
        for e in &self.entries {
            e.var.set(&e.var.zeros_like()?)?;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference to another store with identical layout.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        if self.records() != other.records() {
            return Err(validation_err!("parameter layouts differ"));
        }
        let mut worst = 0f64;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            let d = (a.var.as_tensor() - b.var.as_tensor())?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            worst = worst.max(d);
        }
        Ok(worst)
    }
}

/// Little-endian dump of loose tensors (f64 stays f64, everything else is written as f32).
pub fn tensors_to_bytes(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in tensors {
        let flat = t.flatten_all()?;
        if t.dtype() == DType::F64 {
            for v in flat.to_vec1::<f64>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        } else {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tensors_to_bytes`] given the shapes and dtype; returns the tensors and bytes consumed.
pub fn tensors_from_bytes(bytes: &[u8], shapes: &[Vec<usize>], dtype: DType, device: &Device) -> Result<(Vec<Tensor>, usize)> {
    let width = if dtype == DType::F64 { 8 } else { 4 };
    let mut offset = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n: usize = shape.iter().product();
        let chunk = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| validation_err!("tensor blob is truncated"))?;
        let t = if width == 8 {
            let v: Vec<f64> = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape.as_slice(), device)?
        } else {
            let v: Vec<f32> = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape.as_slice(), device)?.to_dtype(dtype)?
        };
        out.push(t);
        offset += n * width;
    }
    Ok((out, offset))
}

/// Registers parameters into a store while drawing initial values from one RNG.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// U(-bound, bound) with bound = 1/sqrt(fan_in).
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        let name = self.full_name(name);
        self.store.push(name, Role::Param, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        let name = self.full_name(name);
        self.store.push(name, Role::Param, vec![value; n], shape)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        let name = self.full_name(name);
        self.store.push(name, Role::Buffer, vec![value; n], shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = crate::seed::rng(seed, &[]);
        let mut init = Init::new(&mut s, &mut rng);
        init.sub("a").uniform_fan_in("w", &[3, 4], 4).unwrap();
        init.sub("a").buffer("mean", &[3], 0.0).unwrap();
        init.constant("b", &[2], 1.0).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = store(1);
        let b = store(2);
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        b.load_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
    }

    #[test]
    fn names_and_roles() {
        let s = store(0);
        let names: Vec<_> = s.records().into_iter().map(|r| (r.name, r.role)).collect();
        assert_eq!(
            names,
            vec![
                ("a.w".to_string(), Role::Param),
                ("a.mean".to_string(), Role::Buffer),
                ("b".to_string(), Role::Param)
            ]
        );
        assert_eq!(s.num_parameters(), 14);
        assert!(s.load_bytes(&[0u8; 3]).is_err());
    }
}
