use lasnet::autodiff::Tape;
use lasnet::config::{Ablation, NetworkConfig};
use lasnet::data::synth::{synth_fixture, SceneSpec};
use lasnet::losses::class_weights_from_freq;
use lasnet::net::{forward, param_layout, Mode, Model};
use lasnet::params::ParamStore;
use lasnet::tensor::{Shape, Tensor};
use lasnet::train::{loss_and_grads, Batch};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::random_uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut r),
        Tensor::random_uniform(Shape::new(1, 1, h, w), 0.0, 1.0, &mut r),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn head_shapes_follow_input(hm in 1usize..4, wm in 1usize..4, classes in 2usize..10, row in 1usize..=8) {
        let (h, w) = (32 * hm, 32 * wm);
        let config = NetworkConfig::desk()
            .with_classes(classes)
            .with_ablation(Ablation::from_study_row(row).unwrap());
        let model = Model::init(config.clone(), 1).unwrap();
        let (rgb, tir) = inputs(h, w, 2);
        let tape = Tape::new();
        let bp = model.params.bind(&tape);
        let p = forward(&bp, tape.leaf(rgb), tape.leaf(tir), &config, Mode::Training { seed: 3 }).unwrap().predictions;
        prop_assert_eq!(p.sem.shape(), Shape::new(1, classes, h, w));
        prop_assert_eq!(p.sem2.shape(), Shape::new(1, classes, h / 4, w / 4));
        prop_assert_eq!(p.loc.shape(), Shape::new(1, 1, h / 32, w / 32));
        prop_assert_eq!(p.edge.shape(), Shape::new(1, 1, h / 2, w / 2));
    }
}

#[test]
fn rejects_sizes_off_the_grid() {
    let model = Model::init(NetworkConfig::desk(), 0).unwrap();
    let (rgb, tir) = inputs(40, 64, 0);
    assert!(model.predict(&rgb, &tir).is_err());
    let (rgb, _) = inputs(32, 64, 0);
    let (_, tir) = inputs(64, 64, 0);
    assert!(model.predict(&rgb, &tir).is_err());
}

#[test]
fn disabled_modules_own_no_parameters() {
    let names = |a: Ablation| -> Vec<String> {
        param_layout(&NetworkConfig::desk().with_ablation(a)).into_iter().map(|d| d.name).collect()
    };
    let full = names(Ablation::full());
    let base = names(Ablation::baseline());
    assert!(full.iter().all(|n| !n.starts_with("base.")));
    assert!(base.iter().all(|n| !(n.starts_with("clm.") || n.starts_with("cam") || n.starts_with("esm."))));
    for prefix in ["clm.", "cam2.", "cam3.", "cam4.", "esm."] {
        assert!(full.iter().any(|n| n.starts_with(prefix)), "{prefix}");
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let scene = synth_fixture(
        &SceneSpec {
            height: 64,
            width: 64,
            ..SceneSpec::default()
        },
        4,
    )
    .unwrap();
    let model = Model::init(NetworkConfig::desk(), 9).unwrap();
    let batch = Batch::new(&[scene.sample], 1).unwrap();
    let weights = class_weights_from_freq(&[&batch.gt.sem], 9).unwrap();
    let (loss, grads) = loss_and_grads(&model, &batch, &weights, Mode::Inference).unwrap();
    assert!(loss.total.is_finite());
    assert_eq!(grads.len(), model.params.len());
    for (name, g) in &grads {
        assert!(g.all_finite(), "{name}");
        assert!(g.max_abs() > 0.0, "{name} gets no gradient");
    }
}

#[test]
fn parameters_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    let model = Model::init(NetworkConfig::desk().with_classes(4), 12).unwrap();
    model.params.save(&path).unwrap();
    let loaded = Model::new(model.config.clone(), ParamStore::load(&path).unwrap()).unwrap();
    let (rgb, tir) = inputs(32, 64, 5);
    assert_eq!(model.logits(&rgb, &tir).unwrap(), loaded.logits(&rgb, &tir).unwrap());
    // A store for another class count is refused.
    assert!(Model::new(NetworkConfig::desk(), loaded.params.clone()).is_err());
}

#[test]
fn predictions_are_valid_labels() {
    let model = Model::init(NetworkConfig::desk().with_classes(5), 3).unwrap();
    let (rgb, tir) = inputs(64, 96, 6);
    let labels = model.predict(&rgb, &tir).unwrap();
    assert_eq!((labels.height(), labels.width()), (64, 96));
    assert!(labels.data().iter().all(|&v| v < 5));
}
