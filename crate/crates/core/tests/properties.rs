use candle_core::{DType, Device, Tensor};
use dim_core::datasets::{
    denormalize, make_toy_dataset, normalize, DatasetSpec, ImageShape, LabelVector, LabeledImageBatch, RawPixels,
    Split, ToyParams,
};
use dim_core::deploy::{apply_op, dsa_augment, epoch_batches, AugmentOp, DeployConfig};
use dim_core::matching::{logits_matching_loss, total_loss};
use dim_core::models::{build_generator_with, Arch, GeneratorConfig, ModelsPool, PoolSpec};
use dim_core::nn::functional::scalar;
use dim_core::seed;
use proptest::prelude::*;

fn toy_spec(channels: usize) -> DatasetSpec {
    DatasetSpec::toy(ToyParams::new(2, 1, ImageShape::new(channels, 4, 4), 10.0, 0), Split::Train)
}

fn toy_batch(n: usize, seed: u64) -> LabeledImageBatch {
    let h = make_toy_dataset(4, n.div_ceil(4), ImageShape::new(3, 8, 8), 2.0, seed).unwrap();
    h.batch(&(0..n).collect::<Vec<_>>()).unwrap()
}

fn values(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

fn op_strategy() -> impl Strategy<Value = AugmentOp> {
    prop::sample::select(AugmentOp::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalization_roundtrips(channels in 1usize..=3, pixels in prop::collection::vec(0.0f32..=1.0, 16..=16)) {
        let spec = toy_spec(channels);
        let raw: Vec<f32> = pixels.iter().cycle().take(16 * channels).copied().collect();
        let z = normalize(RawPixels::Unit(&raw), &spec).unwrap();
        prop_assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = denormalize(&z, &spec).unwrap();
        for (a, b) in raw.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn balanced_labels_have_equal_counts(per_class in 1usize..20, classes in 1usize..12) {
        let l = LabelVector::balanced(per_class, classes).unwrap();
        prop_assert_eq!(l.len(), per_class * classes);
        for c in 0..classes {
            prop_assert_eq!(l.as_slice().iter().filter(|&&x| x == c).count(), per_class);
        }
    }

    #[test]
    fn augmentation_keeps_labels_shape_and_range(op in op_strategy(), n in 1usize..6, s in any::<u64>()) {
        let batch = toy_batch(n, 3);
        let out = dsa_augment(&batch, &[op], s).unwrap();
        prop_assert_eq!(out.images.dims(), batch.images.dims());
        prop_assert_eq!(&out.labels, &batch.labels);
        prop_assert!(values(&out.images).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn flip_is_an_involution(n in 1usize..6, s in any::<u64>()) {
        let batch = toy_batch(n, 4);
        let once = apply_op(&batch, AugmentOp::Flip, &mut seed::rng(s, &[])).unwrap();
        let twice = apply_op(&once, AugmentOp::Flip, &mut seed::rng(s, &[])).unwrap();
        prop_assert_eq!(values(&twice.images), values(&batch.images));
    }

    #[test]
    fn pool_index_is_in_range_and_repeatable(s in any::<u64>(), epoch in 0usize..10_000, k in 1usize..5) {
        let spec = PoolSpec {
            entries: [Arch::Convnet3, Arch::Resnet10, Arch::Resnet18, Arch::Resnet34][..k].to_vec(),
            ..PoolSpec::default()
        };
        let a = ModelsPool::new(spec.clone(), 10, ImageShape::new(3, 32, 32), s).unwrap();
        let b = ModelsPool::new(spec, 10, ImageShape::new(3, 32, 32), s).unwrap();
        prop_assert!(a.select_index(epoch) < k);
        prop_assert_eq!(a.select_index(epoch), b.select_index(epoch));
        prop_assert_eq!(a.weight_seed(epoch, 0), b.weight_seed(epoch, 0));
    }

    #[test]
    fn total_loss_is_linear(lg in -10.0f64..10.0, lm in 0.0f64..10.0, lambda in 0.0f64..5.0) {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let got = scalar(&total_loss(&t(lg), &t(lm), lambda).unwrap()).unwrap();
        prop_assert!((got - (lg + lambda * lm)).abs() <= 1e-9);
    }

    #[test]
    fn logits_loss_is_nonnegative_and_zero_on_equal(a in prop::collection::vec(-20.0f64..20.0, 12), b in prop::collection::vec(-20.0f64..20.0, 12)) {
        let ta = Tensor::from_vec(a, (3, 4), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b, (3, 4), &Device::Cpu).unwrap();
        prop_assert!(scalar(&logits_matching_loss(&ta, &tb).unwrap()).unwrap() >= 0.0);
        prop_assert_eq!(scalar(&logits_matching_loss(&ta, &ta).unwrap()).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn deployment_budget_is_exact(inpc in 1usize..8, batch in 1usize..20, epoch in 0usize..5, fresh in any::<bool>()) {
        let g = build_generator_with(
            &GeneratorConfig { noise_dim: 4, num_classes: 3, image_shape: ImageShape::new(1, 8, 8), base_width: 4, seed: 1 },
            DType::F32,
        ).unwrap();
        let mut cfg = DeployConfig::new(inpc, Arch::Convnet3);
        cfg.batch_size = batch;
        cfg.fresh_noise = fresh;
        let batches = epoch_batches(&g, &cfg, epoch).unwrap();
        prop_assert!(batches.iter().all(|b| b.len() <= batch && !b.is_empty()));
        let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.as_slice().to_vec()).collect();
        prop_assert_eq!(labels.len(), cfg.images_per_epoch(3));
        for c in 0..3 {
            prop_assert_eq!(labels.iter().filter(|&&l| l == c).count(), inpc);
        }
    }
}
