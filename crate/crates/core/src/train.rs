//! Memorisation runs on a handful of samples, used to show the objective and
//! its gradients drive the whole network.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::RgbtSample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{class_weights_from_freq, total_loss, GroundTruthSet, LossBreakdown};
use crate::net::{forward, Mode, Model};
use crate::optim::Adam;
use crate::tensor::{concat_channels, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub edge_radius: usize,
    /// Draw fresh dropout masks each step. Off by default so the trace is a
    /// pure function of the parameters.
    pub dropout: bool,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        OverfitOptions {
            steps: 300,
            lr: 1e-3,
            seed: 0,
            edge_radius: 1,
            dropout: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverfitReport {
    /// Loss before each update.
    pub trace: Vec<LossBreakdown>,
    /// Loss after the last update.
    pub final_loss: LossBreakdown,
    /// Fraction of pixels predicted correctly after training, in [0, 1].
    pub pixel_accuracy: f64,
}

impl OverfitReport {
    pub fn initial_total(&self) -> f64 {
        self.trace.first().map_or(self.final_loss.total, |b| b.total)
    }
}

/// Samples stacked along the batch axis.
pub struct Batch {
    pub rgb: Tensor,
    pub tir: Tensor,
    pub gt: GroundTruthSet,
}

impl Batch {
    pub fn new(samples: &[RgbtSample], edge_radius: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("batch", "no samples"));
        }
        let stack = |f: fn(&RgbtSample) -> &Tensor| -> Result<Tensor> {
            // Concatenating along channels and reshaping keeps batch order.
            let parts: Vec<&Tensor> = samples.iter().map(f).collect();
            let s = parts[0].shape();
            let joined = concat_channels(&parts)?;
            joined.reshape(crate::tensor::Shape::new(samples.len(), s.c, s.h, s.w))
        };
        let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.gt_sem).collect();
        Ok(Batch {
            rgb: stack(|s| &s.rgb)?,
            tir: stack(|s| &s.tir)?,
            gt: GroundTruthSet::from_semantic(LabelMap::stack(&labels)?, edge_radius),
        })
    }
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    class_weights: &[f64],
    mode: Mode,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let bp = model.params.bind(&tape);
    let pass = forward(&bp, tape.leaf(batch.rgb.clone()), tape.leaf(batch.tir.clone()), &model.config, mode)?;
    let (loss, breakdown) = total_loss(&pass.predictions, &batch.gt, class_weights, model.config.lambda_loc)?;
    let grads = tape.backward(loss)?;
    let out = bp.iter().map(|(name, v)| (name.to_owned(), grads.get(v))).collect();
    Ok((breakdown, out))
}

pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let hits = pred.data().iter().zip(gt.data()).filter(|(a, b)| a == b).count();
    hits as f64 / gt.len().max(1) as f64
}

/// Runs `opts.steps` Adam updates on `samples` without augmentation.
/// `on_step` sees the loss measured before each update.
pub fn overfit(
    model: &mut Model,
    samples: &[RgbtSample],
    opts: &OverfitOptions,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<OverfitReport> {
    let batch = Batch::new(samples, opts.edge_radius)?;
    batch.gt.sem.check_classes(model.config.num_classes)?;
    let weights = class_weights_from_freq(&[&batch.gt.sem], model.config.num_classes)?;
    let mut adam = Adam::new(opts.lr);
    let mut trace = Vec::with_capacity(opts.steps);
    let mode = |step: usize| {
        if opts.dropout {
            Mode::Training {
                seed: opts.seed.wrapping_add(step as u64),
            }
        } else {
            Mode::Inference
        }
    };
    for step in 0..opts.steps {
        let (breakdown, grads) = loss_and_grads(model, &batch, &weights, mode(step))?;
        on_step(step, &breakdown);
        trace.push(breakdown);
        adam.step(&mut model.params, &grads)?;
    }
    let (final_loss, _) = loss_and_grads(model, &batch, &weights, Mode::Inference)?;
    let pred = model.predict(&batch.rgb, &batch.tir)?;
    Ok(OverfitReport {
        trace,
        final_loss,
        pixel_accuracy: pixel_accuracy(&pred, &batch.gt.sem),
    })
}
