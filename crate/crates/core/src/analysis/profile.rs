use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{mean_image, Mask, Sample};
use crate::error::{ensure, Error, Result};
use crate::inversion::{reconstruct, reconstruct_from, Inverter, Reconstruction};
use crate::model_zoo::{Component, ForwardModel, LayerAddress, Stage, StageActivations};
use crate::scalar::Real;
use crate::tensor_core::Tensor;

use super::color::{apply_color_filter, ColorFilter};

/// Mean per-pixel MSE over all unordered pairs of `images`.
pub fn mean_pairwise_mse<T: Real>(images: &[Tensor<T>]) -> Result<f64> {
    ensure!(images.len() >= 2, "need at least two images");
    let mut sum = 0.0;
    let mut pairs = 0;
    for a in 0..images.len() {
        for b in a + 1..images.len() {
            sum += images[a].mse(&images[b])?.as_f64();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Applies every filter in `filters` to `image` (within `mask`),
/// reconstructs each perturbed input from `stage` (or keeps the raw
/// perturbed images when `stage` is `None`) and returns their mean
/// pairwise MSE.
pub fn pairwise_reconstruction_divergence<T: Real, I: Inverter<T>>(
    image: &Tensor<T>,
    mask: &Mask,
    filters: &[ColorFilter],
    model: &ForwardModel<T>,
    stack: &I,
    stage: Option<Stage>,
) -> Result<f64> {
    let perturbed = filters.iter().map(|&f| apply_color_filter(image, mask, f)).collect::<Result<Vec<_>>>()?;
    let images = match stage {
        None => perturbed,
        Some(s) => {
            ensure!(stack.plan().contains(&s), "stack does not cover stage {s}");
            perturbed
                .iter()
                .map(|p| {
                    let (acts, _) = model.forward(p)?;
                    Ok(reconstruct(stack, &acts, s)?.image)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    mean_pairwise_mse(&images)
}

/// Mean image MSE per stage of the plan plus the mean-image baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stages: Vec<(Stage, f64)>,
    /// MSE of each test image against the training-set mean image.
    pub baseline: f64,
}

impl StageProfile {
    pub fn get(&self, s: Stage) -> Option<f64> {
        self.stages.iter().find(|(x, _)| *x == s).map(|&(_, v)| v)
    }
}

/// Reconstructs every test image from every stage of the plan.
pub fn stage_mse_profile<T: Real, I: Inverter<T>>(
    model: &ForwardModel<T>,
    stack: &I,
    train: &[Sample<T>],
    test: &[Sample<T>],
) -> Result<StageProfile> {
    ensure!(!test.is_empty(), "empty test set");
    let mean = mean_image(train).ok_or_else(|| Error::Contract("empty training set".into()))?;
    let plan = stack.plan().to_vec();
    let rows = test
        .par_iter()
        .map(|s| {
            let (acts, _) = model.forward(&s.image)?;
            let per = plan
                .iter()
                .map(|&st| Ok(reconstruct(stack, &acts, st)?.image.mse(&s.image)?.as_f64()))
                .collect::<Result<Vec<f64>>>()?;
            Ok((per, mean.mse(&s.image)?.as_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let stages = plan.iter().enumerate().map(|(k, &st)| (st, rows.iter().map(|r| r.0[k]).sum::<f64>() / n)).collect();
    Ok(StageProfile { stages, baseline: rows.iter().map(|r| r.1).sum::<f64>() / n })
}

/// Feeds layer-`ℓ` activations into the inverse trained on the component's
/// final output and composes down to the image.
pub fn invert_intermediate<T: Real, I: Inverter<T>>(
    model: &ForwardModel<T>,
    addr: LayerAddress,
    stack: &I,
    activations: &StageActivations<T>,
) -> Result<Reconstruction<T>> {
    let depth = model.config.depth(addr.component);
    ensure!(depth > 0 && addr.layer <= depth, "layer {} outside 0..={depth} of {:?}", addr.layer, addr.component);
    let x = activations
        .layer(addr)
        .ok_or_else(|| Error::Contract(format!("activations lack layer {} of {:?}", addr.layer, addr.component)))?;
    let stage = addr.stage();
    let want = model.config.stage_shape(stage).ok_or_else(|| Error::Contract(format!("model has no stage {stage}")))?;
    ensure!(x.shape() == want, "layer shape {:?} differs from stage {stage} input {want:?}", x.shape());
    reconstruct_from(stack, stage, x, &activations.pos)
}

/// Mean image MSE of [`invert_intermediate`] for every layer `0..=depth`.
pub fn intermediate_mse_profile<T: Real, I: Inverter<T>>(
    model: &ForwardModel<T>,
    component: Component,
    stack: &I,
    samples: &[Sample<T>],
) -> Result<Vec<f64>> {
    ensure!(!samples.is_empty(), "no samples");
    let depth = model.config.depth(component);
    let rows = samples
        .par_iter()
        .map(|s| {
            let (acts, _) = model.forward(&s.image)?;
            (0..=depth)
                .map(|l| {
                    let addr = LayerAddress { component, layer: l };
                    Ok(invert_intermediate(model, addr, stack, &acts)?.image.mse(&s.image)?.as_f64())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=depth).map(|l| rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64).collect())
}
