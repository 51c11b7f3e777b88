use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{Mode, Sample};
use crate::error::{ensure, Result};
use crate::rng::derive_seed;
use crate::scalar::Real;
use crate::tensor_core::{batch_gradients, epoch_batches, optimizer_step, OptimizerState, Schedule};

use super::config::ModelKind;
use super::detection::{match_detections, targets_of};
use super::model::{argmax, detections_from_pred, ForwardModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    /// Task metric on the validation samples after the last epoch.
    pub final_metric: f64,
}

pub fn expected_mode(kind: ModelKind) -> Mode {
    match kind {
        ModelKind::Vit => Mode::Classification,
        ModelKind::Detr => Mode::Detection,
    }
}

/// Task metric for one sample: `(hits, total)`. The classifier counts top-1
/// hits; the detector counts matched queries whose argmax equals the object
/// class.
pub fn task_hits<T: Real>(model: &ForwardModel<T>, sample: &Sample<T>) -> Result<(usize, usize)> {
    let (acts, logits) = model.forward(&sample.image)?;
    hits_from_outputs(model.kind(), sample, &logits, acts.pred.as_ref())
}

pub(crate) fn hits_from_outputs<T: Real>(
    kind: ModelKind,
    sample: &Sample<T>,
    logits: &crate::tensor_core::Tensor<T>,
    pred: Option<&crate::tensor_core::Tensor<T>>,
) -> Result<(usize, usize)> {
    match kind {
        ModelKind::Vit => {
            let label = sample.label().unwrap_or(usize::MAX);
            Ok((usize::from(argmax(logits.data()) == label), 1))
        }
        ModelKind::Detr => {
            let dets = detections_from_pred(pred.expect("detector PRED"));
            let targets = targets_of(sample);
            let a = match_detections(&dets, &targets)?;
            let hits = a.iter().zip(&targets).filter(|(&q, t)| dets[q].class() == t.class).count();
            Ok((hits, targets.len()))
        }
    }
}

/// Accuracy (classifier) or matched-class accuracy (detector).
pub fn evaluate_task<T: Real>(model: &ForwardModel<T>, samples: &[Sample<T>]) -> Result<f64> {
    let counts: Result<Vec<(usize, usize)>> = samples.par_iter().map(|s| task_hits(model, s)).collect();
    let (h, n) = counts?.into_iter().fold((0, 0), |(a, b), (h, n)| (a + h, b + n));
    Ok(if n == 0 { 0.0 } else { h as f64 / n as f64 })
}

/// Trains `θ` on `L_OBJ` for a fixed number of epochs.
pub fn train_forward_model<T: Real>(
    model: &mut ForwardModel<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainingReport> {
    let mode = expected_mode(model.kind());
    ensure!(!train.is_empty(), "empty training set");
    ensure!(
        train.iter().chain(val).all(|s| s.mode() == mode),
        "dataset mode does not match a {:?} model",
        model.kind()
    );
    let val = &val[..schedule.max_val.map_or(val.len(), |m| m.min(val.len()))];
    let mut opt = OptimizerState::new(&model.params, schedule.adam);
    let mut epochs = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut loss_sum = 0.0;
        let batches = epoch_batches(train.len(), schedule.batch_size, derive_seed(seed, "forward-epoch", epoch as u64));
        for batch in &batches {
            let m = &*model;
            let (grads, loss) = batch_gradients(&[&m.params], batch, |g, binds, i| {
                let s = &train[i];
                let img = g.constant(s.image.clone());
                let vars = m.record(g, &mut binds[0], img)?;
                m.record_task_loss(g, &vars, s)
            })?;
            loss_sum += loss * batch.len() as f64;
            optimizer_step(&mut model.params, &grads[0], &mut opt)?;
        }
        let val_metric = if val.is_empty() { f64::NAN } else { evaluate_task(model, val)? };
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_metric });
    }
    let final_metric = epochs.last().map_or(f64::NAN, |e| e.val_metric);
    Ok(TrainingReport { epochs, final_metric })
}
