use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::scalar::Real;

use super::graph::{Gradients, Graph, Var};
use super::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Scaled-uniform (Glorot) weight matrix `[fan_in x fan_out]`.
    pub fn glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn([fan_in, fan_out], |_| T::lit(rng.gen_range(-limit..limit)));
        self.push(name, t)
    }

    /// Glorot-initialised matrix with an explicit shape (embeddings, tokens).
    pub fn glorot_shaped(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        self.glorot(name, rows, cols, rng)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.push(name, Tensor::full(shape.to_vec(), T::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Replaces every tensor by the same-named entry of `named`.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        ensure!(
            named.len() == self.tensors.len(),
            "expected {} tensors, found {}",
            self.tensors.len(),
            named.len()
        );
        for (name, t) in named {
            let id = self
                .find(name)
                .ok_or_else(|| crate::Error::Contract(format!("unknown parameter {name}")))?;
            ensure!(
                self.tensors[id.0].shape() == t.shape(),
                "parameter {name}: shape {:?} vs stored {:?}",
                t.shape(),
                self.tensors[id.0].shape()
            );
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

/// Lazily places a store's parameters into one graph.
pub struct Binding<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a, T: Real> Binding<'a, T> {
    /// Parameters become differentiable leaves.
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self { store, vars: vec![None; store.len()], trainable: true }
    }

    /// Parameters become constants; no gradient ever reaches them.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self { store, vars: vec![None; store.len()], trainable: false }
    }

    /// Uses already-created leaves, one per parameter in store order.
    pub fn preset(store: &'a ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "preset binding needs one var per parameter");
        Self { store, vars: vars.iter().copied().map(Some).collect(), trainable: true }
    }

    pub fn get(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars[id.0] = Some(v);
        v
    }

    /// Adds this binding's gradients into `acc`, scaled by `weight`.
    pub fn accumulate(&self, grads: &Gradients<T>, acc: &mut GradBuffer<T>, weight: T) {
        for (i, v) in self.vars.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                let dst = acc.grads[i].data_mut();
                for (d, &s) in dst.iter_mut().zip(g.data()) {
                    *d += s * weight;
                }
            }
        }
    }
}

/// Gradient buffers congruent with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> GradBuffer<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self { grads: store.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect() }
    }

    pub fn add(&mut self, other: &GradBuffer<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    pub fn norm(&self) -> T {
        self.grads.iter().flat_map(|g| g.data()).map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}
