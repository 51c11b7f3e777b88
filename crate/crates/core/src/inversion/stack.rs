use std::sync::Arc;

use rayon::prelude::*;

use crate::data_io::Sample;
use crate::error::{ensure, Error, Result};
use crate::model_zoo::{ForwardModel, ModelConfig, Stage, StageActivations};
use crate::scalar::Real;
use crate::tensor_core::Tensor;

use super::component::InverseComponent;

/// Anything that can invert single stages of a forward model's plan.
pub trait Inverter<T: Real>: Sync {
    /// Stage plan `P` of the inverted model.
    fn plan(&self) -> &[Stage];

    fn image_size(&self) -> usize;

    /// Maps stage-`source` activations to the previous stage, or to the image
    /// (flat `[S*S x 3]` or `[S x S x 3]`) for the first stage.
    fn invert(&self, source: Stage, x: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>>;
}

/// One hop `x̂_{j:j−1}` of a reconstruction; `target == None` is the image.
#[derive(Clone, Debug, PartialEq)]
pub struct Hop<T> {
    pub source: Stage,
    pub target: Option<Stage>,
    pub value: Tensor<T>,
}

/// `x̂_{j:0}` together with every intermediate hop. Values are never clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<T> {
    pub from: Stage,
    /// `[S x S x 3]`.
    pub image: Tensor<T>,
    pub hops: Vec<Hop<T>>,
}

/// Applies the inverses from `from` down to the image, starting at `x`.
pub fn reconstruct_from<T: Real, I: Inverter<T> + ?Sized>(
    stack: &I,
    from: Stage,
    x: &Tensor<T>,
    pos: &Tensor<T>,
) -> Result<Reconstruction<T>> {
    let plan = stack.plan();
    let top = plan
        .iter()
        .position(|&s| s == from)
        .ok_or_else(|| Error::Contract(format!("stage {from} not in the stage plan")))?;
    let mut hops: Vec<Hop<T>> = Vec::with_capacity(top + 1);
    for k in (0..=top).rev() {
        let input = hops.last().map_or(x, |h| &h.value);
        let value = stack.invert(plan[k], input, pos)?;
        hops.push(Hop { source: plan[k], target: k.checked_sub(1).map(|j| plan[j]), value });
    }
    let s = stack.image_size();
    let image = hops.last().expect("at least one hop").value.clone().reshape([s, s, 3])?;
    Ok(Reconstruction { from, image, hops })
}

/// `x̂_{j:0} = (N⁻¹_{1:0} ∘ … ∘ N⁻¹_{j:j−1})(x_j)`.
pub fn reconstruct<T: Real, I: Inverter<T> + ?Sized>(
    stack: &I,
    activations: &StageActivations<T>,
    from: Stage,
) -> Result<Reconstruction<T>> {
    let x = activations
        .stage(from)
        .ok_or_else(|| Error::Contract(format!("activations lack stage {from}")))?;
    reconstruct_from(stack, from, x, &activations.pos)
}

/// One trained modular component per stage of the plan.
#[derive(Clone, Debug)]
pub struct InverseStack<T> {
    pub model: ModelConfig,
    components: Vec<InverseComponent<T>>,
}

impl<T: Real> InverseStack<T> {
    pub fn new(model: &ModelConfig, components: Vec<InverseComponent<T>>) -> Result<Self> {
        let mut sorted: Vec<Option<InverseComponent<T>>> = vec![None; model.stages().len()];
        for c in components {
            ensure!(c.spec.model == *model, "component for {} was built for another model", c.source());
            ensure!(
                c.spec.target == model.previous_stage(c.source()),
                "component from {} is not a single-stage inverse",
                c.source()
            );
            let k = model.stages().iter().position(|&s| s == c.source()).expect("validated");
            ensure!(sorted[k].is_none(), "two components for stage {}", c.source());
            sorted[k] = Some(c);
        }
        let components = sorted
            .into_iter()
            .zip(model.stages())
            .map(|(c, s)| c.ok_or_else(|| Error::Contract(format!("no inverse component for stage {s}"))))
            .collect::<Result<_>>()?;
        Ok(Self { model: model.clone(), components })
    }

    pub fn get(&self, stage: Stage) -> Option<&InverseComponent<T>> {
        self.components.iter().find(|c| c.source() == stage)
    }

    pub fn components(&self) -> &[InverseComponent<T>] {
        &self.components
    }

    /// Copy with the component for `c.source()` replaced.
    pub fn with_component(&self, c: InverseComponent<T>) -> Result<Self> {
        let mut all: Vec<InverseComponent<T>> =
            self.components.iter().filter(|x| x.source() != c.source()).cloned().collect();
        all.push(c);
        Self::new(&self.model, all)
    }

    pub fn parameter_count(&self) -> usize {
        self.components.iter().map(InverseComponent::parameter_count).sum()
    }
}

impl<T: Real> Inverter<T> for InverseStack<T> {
    fn plan(&self) -> &[Stage] {
        self.model.stages()
    }

    fn image_size(&self) -> usize {
        self.model.image_size
    }

    fn invert(&self, source: Stage, x: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
        self.get(source)
            .ok_or_else(|| Error::Contract(format!("no inverse component for stage {source}")))?
            .apply(x, pos)
    }
}

/// Frozen stage activations (per-layer captures dropped) and images of a
/// sample set, shared by every inverse trained against one forward model.
#[derive(Clone, Debug)]
pub struct ActivationCache<T> {
    pub activations: Vec<StageActivations<T>>,
    pub images: Vec<Tensor<T>>,
    pub pos: Arc<Tensor<T>>,
}

impl<T: Real> ActivationCache<T> {
    pub fn build(model: &ForwardModel<T>, samples: &[Sample<T>]) -> Result<Self> {
        let activations = samples
            .par_iter()
            .map(|s| model.forward(&s.image).map(|(a, _)| a.compact()))
            .collect::<Result<Vec<_>>>()?;
        let pos = Arc::new(model.positional_embedding().clone());
        Ok(Self { activations, images: samples.iter().map(|s| s.image.clone()).collect(), pos })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { activations: self.activations[..n].to_vec(), images: self.images[..n].to_vec(), pos: self.pos.clone() }
    }

    /// Training pairs `(x_source, x_target)`; `target == None` pairs with the image.
    pub fn pairs(&self, source: Stage, target: Option<Stage>) -> Result<PairSet<'_, T>> {
        let mut inputs = Vec::with_capacity(self.len());
        let mut targets = Vec::with_capacity(self.len());
        for (a, img) in self.activations.iter().zip(&self.images) {
            inputs.push(a.stage(source).ok_or_else(|| Error::Contract(format!("cache lacks stage {source}")))?);
            targets.push(match target {
                Some(t) => a.stage(t).ok_or_else(|| Error::Contract(format!("cache lacks stage {t}")))?,
                None => img,
            });
        }
        Ok(PairSet { inputs, targets, pos: &self.pos })
    }
}

/// Input/target pairs plus the positional side input.
#[derive(Clone, Debug)]
pub struct PairSet<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub targets: Vec<&'a Tensor<T>>,
    pub pos: &'a Tensor<T>,
}

impl<T> PairSet<'_, T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
