use candle_core::DType;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::classifier::{build_classifier_with, Arch, Classifier, ClassifierConfig};
use crate::datasets::ImageShape;
use crate::error::{config_err, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitPolicy {
    /// New random weights at every selection.
    FreshEachSelection,
    /// One set of random weights per pool entry, reused across selections.
    FixedWeights,
}

/// Serializable description of a models pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub entries: Vec<Arch>,
    pub reinit_policy: ReinitPolicy,
    /// Channel width override applied to every entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            entries: vec![Arch::Convnet3, Arch::Resnet10, Arch::Resnet18],
            reinit_policy: ReinitPolicy::FreshEachSelection,
            width: None,
        }
    }
}

impl PoolSpec {
    pub fn single(arch: Arch) -> Self {
        Self {
            entries: vec![arch],
            ..Self::default()
        }
    }
}

/// Ordered classifier constructors with a seeded, epoch-keyed selection policy.
#[derive(Debug, Clone)]
pub struct ModelsPool {
    spec: PoolSpec,
    num_classes: usize,
    image_shape: ImageShape,
    seed: u64,
    dtype: DType,
}

/// The classifier chosen for one epoch.
pub struct Selection {
    pub index: usize,
    pub classifier: Classifier,
}

impl ModelsPool {
    pub fn new(spec: PoolSpec, num_classes: usize, image_shape: ImageShape, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, num_classes, image_shape, seed, DType::F32)
    }

    pub fn with_dtype(
        spec: PoolSpec,
        num_classes: usize,
        image_shape: ImageShape,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        if spec.entries.is_empty() {
            return Err(config_err!("models pool is empty"));
        }
        let pool = Self {
            spec,
            num_classes,
            image_shape,
            seed,
            dtype,
        };
        for i in 0..pool.len() {
            pool.entry_config(i).validate()?;
        }
        Ok(pool)
    }

    pub fn spec(&self) -> &PoolSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.entries.is_empty()
    }

    pub fn entry_config(&self, index: usize) -> ClassifierConfig {
        let mut cfg = ClassifierConfig::new(self.spec.entries[index], self.num_classes, self.image_shape);
        cfg.width = self.spec.width;
        cfg
    }

    /// Entry index for an epoch: uniform over the pool, a pure function of (seed, epoch).
    pub fn select_index(&self, epoch: usize) -> usize {
        let mut rng = seed::rng(self.seed, &[seed::stream::POOL_CHOICE, epoch as u64]);
        rng.random_range(0..self.len())
    }

    /// Weight seed for the classifier returned at `epoch` with entry `index`.
    pub fn weight_seed(&self, epoch: usize, index: usize) -> u64 {
        match self.spec.reinit_policy {
            ReinitPolicy::FreshEachSelection => seed::derive(self.seed, &[seed::stream::POOL_WEIGHTS, epoch as u64]),
            ReinitPolicy::FixedWeights => {
                seed::derive(self.seed, &[seed::stream::POOL_WEIGHTS, u64::MAX, index as u64])
            }
        }
    }
}

/// Classifier used for every iteration of `epoch_index`.
pub fn pool_select(pool: &ModelsPool, epoch_index: usize) -> Result<Selection> {
    let index = pool.select_index(epoch_index);
    let classifier = build_classifier_with(&pool.entry_config(index), pool.weight_seed(epoch_index, index), pool.dtype)?;
    Ok(Selection { index, classifier })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(entries: Vec<Arch>, policy: ReinitPolicy) -> ModelsPool {
        let spec = PoolSpec {
            entries,
            reinit_policy: policy,
            width: Some(4),
        };
        ModelsPool::new(spec, 3, ImageShape::new(1, 8, 8), 11).unwrap()
    }

    #[test]
    fn degenerate_pool_always_returns_its_entry() {
        let p = pool(vec![Arch::Resnet10], ReinitPolicy::FreshEachSelection);
        for e in 0..20 {
            assert_eq!(pool_select(&p, e).unwrap().classifier.arch(), Arch::Resnet10);
        }
    }

    #[test]
    fn selection_is_pure_in_seed_and_epoch() {
        let p = pool(vec![Arch::Convnet3, Arch::Resnet10, Arch::Resnet18], ReinitPolicy::FreshEachSelection);
        let a = pool_select(&p, 5).unwrap();
        let b = pool_select(&p, 5).unwrap();
        assert_eq!(a.index, b.index);
        assert_eq!(a.classifier.store().digest().unwrap(), b.classifier.store().digest().unwrap());
    }

    #[test]
    fn reinit_policies() {
        let fresh = pool(vec![Arch::Convnet3], ReinitPolicy::FreshEachSelection);
        let fixed = pool(vec![Arch::Convnet3], ReinitPolicy::FixedWeights);
        let d = |p: &ModelsPool, e| pool_select(p, e).unwrap().classifier.store().digest().unwrap();
        assert_ne!(d(&fresh, 0), d(&fresh, 1));
        assert_eq!(d(&fixed, 0), d(&fixed, 1));
    }

    #[test]
    fn empty_pool_rejected() {
        let spec = PoolSpec {
            entries: vec![],
            ..PoolSpec::default()
        };
        assert!(ModelsPool::new(spec, 10, ImageShape::new(3, 32, 32), 0).is_err());
    }
}
