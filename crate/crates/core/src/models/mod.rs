//! Conditional generator, conditional discriminator, classifier zoo and models pool.

mod classifier;
mod discriminator;
mod generator;
mod pool;
mod snapshot;

pub use classifier::{build_classifier, build_classifier_with, forward_logits, Arch, Classifier, ClassifierConfig};
pub use discriminator::{build_discriminator, build_discriminator_with, Discriminator, DiscriminatorConfig};
pub use generator::{build_generator, build_generator_with, generate, Generator, GeneratorConfig, NoiseBatch, UPSAMPLE};
pub use pool::{pool_select, ModelsPool, PoolSpec, ReinitPolicy, Selection};
pub use snapshot::{
    load_classifier, load_generator, save_classifier, save_generator, ModelDescriptor, SnapshotManifest,
    SNAPSHOT_VERSION,
};
