use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model_zoo::{ForwardModel, Stage};
use crate::rng::derive_seed;
use crate::scalar::Real;
use crate::tensor_core::{batch_gradients, epoch_batches, optimizer_step, OptimizerState, Schedule};

use super::component::{InverseComponent, InverseSpec, Variant};
use super::stack::{ActivationCache, PairSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseTrainingReport {
    pub epochs: Vec<InverseEpoch>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Mean MSE of the component's outputs against the targets.
pub fn pair_mse<T: Real>(c: &InverseComponent<T>, pairs: &PairSet<'_, T>) -> Result<f64> {
    ensure!(!pairs.is_empty(), "no pairs to evaluate");
    let errs = (0..pairs.len())
        .into_par_iter()
        .map(|i| {
            let y = c.apply(pairs.inputs[i], pairs.pos)?;
            ensure!(y.len() == pairs.targets[i].len(), "inverse output has {} values, target {}", y.len(), pairs.targets[i].len());
            Ok(y.data().iter().zip(pairs.targets[i].data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>()
                / y.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Minimizes the mean squared error between targets and the component's
/// outputs. Keeps the parameters of the best validation epoch and stops
/// early once `schedule.patience` epochs pass without improvement.
pub fn fit_component<T: Real>(
    c: &mut InverseComponent<T>,
    train: &PairSet<'_, T>,
    val: &PairSet<'_, T>,
    schedule: &Schedule,
    seed: u64,
) -> Result<InverseTrainingReport> {
    ensure!(!train.is_empty(), "empty training set");
    let out_len = c.output_len();
    ensure!(
        train.targets.iter().chain(&val.targets).all(|t| t.len() == out_len),
        "targets do not match the inverse output size {out_len}"
    );
    let mut opt = OptimizerState::new(&c.params, schedule.adam);
    let mut best = (f64::INFINITY, 0usize, c.params.clone());
    let mut epochs = Vec::new();
    let mut stale = 0;
    for epoch in 0..schedule.epochs {
        let mut sum = 0.0;
        for batch in epoch_batches(train.len(), schedule.batch_size, derive_seed(seed, "inverse-epoch", epoch as u64)) {
            let comp = &*c;
            let (grads, loss) = batch_gradients(&[&comp.params], &batch, |g, b, i| {
                let x = g.constant(train.inputs[i].clone());
                let pos = g.constant(train.pos.clone());
                let y = comp.record(g, &mut b[0], x, pos)?;
                let t = g.constant(train.targets[i].clone());
                Ok(g.mse(y, t))
            })?;
            sum += loss * batch.len() as f64;
            optimizer_step(&mut c.params, &grads[0], &mut opt)?;
        }
        let val_mse = if val.is_empty() { sum / train.len() as f64 } else { pair_mse(c, val)? };
        epochs.push(InverseEpoch { epoch, train_mse: sum / train.len() as f64, val_mse });
        if val_mse < best.0 {
            best = (val_mse, epoch, c.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if schedule.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    c.params = best.2;
    Ok(InverseTrainingReport { epochs, best_epoch: best.1, best_val_mse: best.0 })
}

fn val_slice<T: Real>(val: &ActivationCache<T>, schedule: &Schedule) -> ActivationCache<T> {
    val.truncated(schedule.max_val.unwrap_or(usize::MAX))
}

/// Trains `N⁻¹_{j:j−1}` against the frozen model's cached activations.
/// The forward model is only read, so `θ` cannot change.
pub fn train_inverse_component<T: Real>(
    model: &ForwardModel<T>,
    stage: Stage,
    variant: Variant,
    train: &ActivationCache<T>,
    val: &ActivationCache<T>,
    schedule: &Schedule,
    seed: u64,
) -> Result<(InverseComponent<T>, InverseTrainingReport)> {
    let spec = InverseSpec::modular(&model.config, stage, variant, seed)?;
    let target = spec.target;
    let mut c = InverseComponent::new(spec)?;
    let val = val_slice(val, schedule);
    let report = fit_component(&mut c, &train.pairs(stage, target)?, &val.pairs(stage, target)?, schedule, seed)?;
    Ok((c, report))
}

/// Trains the classic inverse `N⁻¹_{j:0}` mapping stage `j` straight to the image.
pub fn train_full_path_inverse<T: Real>(
    model: &ForwardModel<T>,
    stage: Stage,
    train: &ActivationCache<T>,
    val: &ActivationCache<T>,
    schedule: &Schedule,
    seed: u64,
) -> Result<(InverseComponent<T>, InverseTrainingReport)> {
    let mut c = InverseComponent::full_path(&model.config, stage, seed)?;
    let val = val_slice(val, schedule);
    let report = fit_component(&mut c, &train.pairs(stage, None)?, &val.pairs(stage, None)?, schedule, seed)?;
    Ok((c, report))
}
