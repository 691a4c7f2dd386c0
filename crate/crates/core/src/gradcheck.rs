//! Finite-difference checks of the full objective, shared by the CLI and tests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{all_coordinates, grad_check, grad_check_smooth, random_coordinates, GradCheckReport, Var};
use crate::config::NetworkConfig;
use crate::data::synth::{synth_fixture, SceneSpec};
use crate::error::Result;
use crate::labels::LabelMap;
use crate::losses::{class_weights_from_freq, total_loss, GroundTruthSet};
use crate::net::{forward, init_params, Mode, PredictionSet};
use crate::params::BoundParams;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-4;
/// Failure threshold used by the command-line check.
pub const FAIL_THRESHOLD: f64 = 1e-3;
/// Relative disagreement between step `eps` and `eps / 2` differences that
/// marks a coordinate as sitting next to a kink.
pub const KINK_TOLERANCE: f64 = 1e-6;

/// Checks the total loss of the whole network on a `size × size` synthetic
/// sample against central differences at `coords` random parameter entries.
/// Dropout runs with a fixed mask so every evaluation sees the same function.
/// Coordinates within `eps` of a relu, max or sort kink are replaced by
/// fresh ones, so `coords` entries are compared where the loss is smooth.
pub fn network_check(config: &NetworkConfig, size: usize, coords: usize, eps: f64, seed: u64) -> Result<GradCheckReport> {
    config.validate()?;
    config.check_input_size(size, size)?;
    let spec = SceneSpec {
        height: size,
        width: size,
        shapes: 2.min(config.num_classes - 1),
        num_classes: config.num_classes,
        noise: 0.05,
    };
    let sample = synth_fixture(&spec, seed)?.sample;
    let gt = GroundTruthSet::from_semantic(sample.gt_sem.clone(), 1);
    let weights = class_weights_from_freq(&[&gt.sem], config.num_classes)?;
    let store = init_params(config, seed)?;
    let names: Vec<&str> = store.names().collect();
    let mut params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    // Kaiming init leaves gains at zero, which would hide the attention
    // branches from the check; move every parameter off its initial point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for p in &mut params {
        let jitter = Tensor::random_uniform(p.shape(), -0.05, 0.05, &mut rng);
        p.accumulate(&jitter);
    }
    let mut candidates = random_coordinates(&params, coords.saturating_mul(4), &mut rng);
    candidates.shuffle(&mut rng);
    grad_check_smooth(&params, &candidates, coords, eps, KINK_TOLERANCE, |tape, vars| {
        let bp = BoundParams::from_vars(names.iter().copied().zip(vars.iter().copied()));
        let pass = forward(
            &bp,
            tape.leaf(sample.rgb.clone()),
            tape.leaf(sample.tir.clone()),
            config,
            Mode::Training { seed },
        )?;
        Ok(total_loss(&pass.predictions, &gt, &weights, config.lambda_loc)?.0)
    })
}

/// Checks the total loss alone with random prediction maps as the inputs
/// (2×3 labels, three classes) over every coordinate.
pub fn losses_check(lambda_loc: f64, eps: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sem = LabelMap::new(2, 3, vec![0, 1, 1, 2, 0, 1])?;
    let gt = GroundTruthSet::from_semantic(sem, 1);
    let weights = class_weights_from_freq(&[&gt.sem], 3)?;
    let shapes = [
        Shape::new(1, 3, 2, 3),
        Shape::new(1, 3, 1, 2),
        Shape::new(1, 1, 1, 1),
        Shape::new(1, 1, 1, 2),
    ];
    let params: Vec<Tensor> = shapes
        .iter()
        .map(|&s| Tensor::random_uniform(s, -2.0, 2.0, &mut rng))
        .collect();
    grad_check(&params, &all_coordinates(&params), eps, |_, v: &[Var<'_>]| {
        let preds = PredictionSet {
            sem: v[0],
            sem2: v[1],
            loc: v[2],
            edge: v[3],
        };
        Ok(total_loss(&preds, &gt, &weights, lambda_loc)?.0)
    })
}
