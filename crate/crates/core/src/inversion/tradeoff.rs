use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::Sample;
use crate::error::{ensure, Error, Result};
use crate::model_zoo::{hits_from_outputs, ForwardModel, Stage, StageVars};
use crate::rng::derive_seed;
use crate::scalar::Real;
use crate::tensor_core::{
    batch_gradients, epoch_batches, optimizer_step, Binding, Graph, OptimizerState, Schedule, Var,
};

use super::component::InverseComponent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradeoffConfig {
    pub lambda: f64,
    pub stage: Stage,
    pub schedule: Schedule,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffEpoch {
    pub epoch: usize,
    /// `λ·L_MSE + (1−λ)·L_OBJ + L_MSE`, averaged over training samples.
    pub train_total: f64,
    pub train_mse: f64,
    pub train_obj: f64,
    pub val_metric: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TradeoffResult<T> {
    pub model: ForwardModel<T>,
    pub inverse: InverseComponent<T>,
    pub epochs: Vec<TradeoffEpoch>,
}

struct Terms {
    mse: Var,
    obj: Var,
}

/// Records forward, task loss and full-path reconstruction of one sample.
/// The stage activation and the positional side input reach the inverse
/// through a gradient gate of weight `λ`, so `θ` sees `λ·∂L_MSE`.
fn record_terms<T: Real>(
    g: &mut Graph<T>,
    model: &ForwardModel<T>,
    theta: &mut Binding<'_, T>,
    inverse: &InverseComponent<T>,
    phi: &mut Binding<'_, T>,
    stage: Stage,
    lambda: T,
    sample: &Sample<T>,
) -> Result<(Terms, StageVars)> {
    let img = g.constant(sample.image.clone());
    let vars = model.record(g, theta, img)?;
    let x = vars.stage(stage).ok_or_else(|| Error::Contract(format!("model has no stage {stage}")))?;
    let x = g.grad_scale(x, lambda);
    let pos = g.grad_scale(vars.pos, lambda);
    let recon = inverse.record(g, phi, x, pos)?;
    let mse = g.mse(recon, img);
    let obj = model.record_task_loss(g, &vars, sample)?;
    Ok((Terms { mse, obj }, vars))
}

fn check_pair<T: Real>(model: &ForwardModel<T>, inverse: &InverseComponent<T>, stage: Stage) -> Result<()> {
    ensure!(inverse.spec.model == model.config, "inverse was built for another model");
    ensure!(inverse.source() == stage && inverse.spec.target.is_none(), "trade-off needs a full-path inverse from {stage}");
    Ok(())
}

/// Task metric and mean image MSE of `inverse ∘ model_{0:j}` over `samples`.
pub fn evaluate_tradeoff<T: Real>(
    model: &ForwardModel<T>,
    inverse: &InverseComponent<T>,
    stage: Stage,
    samples: &[Sample<T>],
) -> Result<(f64, f64)> {
    check_pair(model, inverse, stage)?;
    let rows = samples
        .par_iter()
        .map(|s| {
            let (acts, logits) = model.forward(&s.image)?;
            let hits = hits_from_outputs(model.kind(), s, &logits, acts.pred.as_ref())?;
            let x = acts.stage(stage).ok_or_else(|| Error::Contract(format!("model has no stage {stage}")))?;
            let recon = inverse.apply(x, &acts.pos)?;
            Ok((hits, recon.mse(&s.image)?.as_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (h, n) = rows.iter().fold((0, 0), |(a, b), ((h, n), _)| (a + h, b + n));
    let mse = rows.iter().map(|r| r.1).sum::<f64>() / rows.len().max(1) as f64;
    Ok((if n == 0 { 0.0 } else { h as f64 / n as f64 }, mse))
}

/// Jointly fine-tunes `θ` and a full-path inverse `φ_{j:0}` on
/// `λ·L_MSE(θ) + (1−λ)·L_OBJ(θ) + L_MSE(φ)`.
pub fn finetune_tradeoff<T: Real>(
    model: &ForwardModel<T>,
    inverse: &InverseComponent<T>,
    config: &TradeoffConfig,
    train: &[Sample<T>],
    val: &[Sample<T>],
) -> Result<TradeoffResult<T>> {
    ensure!((0.0..=1.0).contains(&config.lambda), "lambda {} outside [0, 1]", config.lambda);
    check_pair(model, inverse, config.stage)?;
    ensure!(!train.is_empty(), "empty training set");
    let lambda = T::lit(config.lambda);
    let obj_weight = T::one() - lambda;
    let val = &val[..config.schedule.max_val.map_or(val.len(), |m| m.min(val.len()))];
    let mut model = model.clone();
    let mut inverse = inverse.clone();
    let mut opt_theta = OptimizerState::new(&model.params, config.schedule.adam);
    let mut opt_phi = OptimizerState::new(&inverse.params, config.schedule.adam);
    let mut epochs = Vec::new();
    for epoch in 0..config.schedule.epochs {
        let (mut mse_sum, mut obj_sum) = (0.0, 0.0);
        let batches =
            epoch_batches(train.len(), config.schedule.batch_size, derive_seed(config.seed, "tradeoff-epoch", epoch as u64));
        for batch in &batches {
            let (m, inv) = (&model, &inverse);
            let parts = std::sync::Mutex::new(vec![(0.0, 0.0); batch.len()]);
            let (grads, _) = batch_gradients(&[&m.params, &inv.params], batch, |g, b, i| {
                let (theta, phi) = b.split_at_mut(1);
                let (terms, _) = record_terms(g, m, &mut theta[0], inv, &mut phi[0], config.stage, lambda, &train[i])?;
                let slot = batch.iter().position(|&k| k == i).expect("in batch");
                parts.lock().expect("no poisoning")[slot] =
                    (g.value(terms.mse).data()[0].as_f64(), g.value(terms.obj).data()[0].as_f64());
                let obj = g.scale(terms.obj, obj_weight);
                Ok(g.add(terms.mse, obj))
            })?;
            for (a, b) in parts.into_inner().expect("no poisoning") {
                mse_sum += a;
                obj_sum += b;
            }
            optimizer_step(&mut model.params, &grads[0], &mut opt_theta)?;
            optimizer_step(&mut inverse.params, &grads[1], &mut opt_phi)?;
        }
        let n = train.len() as f64;
        let (train_mse, train_obj) = (mse_sum / n, obj_sum / n);
        let (val_metric, val_mse) =
            if val.is_empty() { (f64::NAN, f64::NAN) } else { evaluate_tradeoff(&model, &inverse, config.stage, val)? };
        epochs.push(TradeoffEpoch {
            epoch,
            train_total: config.lambda * train_mse + (1.0 - config.lambda) * train_obj + train_mse,
            train_mse,
            train_obj,
            val_metric,
            val_mse,
        });
    }
    Ok(TradeoffResult { model, inverse, epochs })
}

/// Largest absolute gradient that the reconstruction term alone sends into
/// `θ` for one sample at trade-off weight `λ`.
pub fn reconstruction_gradient_into_theta<T: Real>(
    model: &ForwardModel<T>,
    inverse: &InverseComponent<T>,
    stage: Stage,
    lambda: f64,
    sample: &Sample<T>,
) -> Result<f64> {
    check_pair(model, inverse, stage)?;
    let mut g = Graph::new();
    let mut theta = Binding::trainable(&model.params);
    let mut phi = Binding::trainable(&inverse.params);
    let (terms, _) = record_terms(&mut g, model, &mut theta, inverse, &mut phi, stage, T::lit(lambda), sample)?;
    let grads = g.evaluate_with_gradients(terms.mse)?;
    let mut buf = crate::tensor_core::GradBuffer::zeros_like(&model.params);
    theta.accumulate(&grads, &mut buf, T::one());
    Ok(buf.grads.iter().flat_map(|t| t.data()).map(|v| v.as_f64().abs()).fold(0.0, f64::max))
}
