use avtta::data::{gen_dataset, DatasetSpec};
use avtta::experiment::{prepare_bench, ExperimentConfig};
use avtta::model::{train_source, InputShape, Model, ModelConfig, VideoClip};
use avtta::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_source_model_reaches_clean_baseline() {
    let cfg = ExperimentConfig::default();
    let bench = prepare_bench(&cfg, 0).unwrap();
    let acc = bench.clean_test_accuracy().unwrap();
    assert!(acc >= 0.95, "clean test accuracy {acc}");
    assert!(bench.train_report.final_accuracy >= 0.95);
}

/// Class 0 is dark and class 1 is bright; a single channel mean separates them.
fn separable(n: usize, rng: &mut ChaCha8Rng) -> Vec<VideoClip> {
    (0..n)
        .map(|i| {
            let y = i % 2;
            let base = if y == 0 { 0.3 } else { 0.7 };
            let data = (0..16 * 4 * 4 * 2).map(|_| base + rng.random_range(-0.15..0.15)).collect();
            VideoClip::new(Tensor::new(vec![16, 4, 4, 2], data).unwrap(), format!("s{i}"), Some(y)).unwrap()
        })
        .collect()
}

#[test]
fn separable_two_class_set_is_learned_within_fifty_epochs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = separable(24, &mut rng);
    let mut model = Model::new(ModelConfig {
        num_classes: 2,
        layer_widths: vec![4],
        input_shape: InputShape { t: 16, h: 4, w: 4, c_in: 2 },
        patch: 2,
        seed: 3,
    })
    .unwrap();
    let report = train_source(&mut model, &data, 50, 0.01, &mut rng).unwrap();
    assert_eq!(report.epochs, 50);
    assert!(report.final_accuracy >= 0.95, "train accuracy {}", report.final_accuracy);
}

#[test]
fn training_is_seed_deterministic() {
    let spec = DatasetSpec { num_classes: 3, train_per_class: 3, test_per_class: 1, ..DatasetSpec::default() };
    let ds = gen_dataset(&spec).unwrap();
    let run = || {
        let mut model = Model::new(ModelConfig {
            num_classes: 3,
            layer_widths: vec![4],
            input_shape: InputShape { t: 16, h: 8, w: 8, c_in: 3 },
            patch: 2,
            seed: 5,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        train_source(&mut model, &ds.train, 2, 0.01, &mut rng).unwrap();
        model.fingerprint()
    };
    assert_eq!(run(), run());
}
