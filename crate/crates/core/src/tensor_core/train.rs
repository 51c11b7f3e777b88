//! Mini-batch plumbing shared by every training loop: per-sample graphs,
//! gradients reduced in sample order so results do not depend on threading.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scalar::Real;

use super::graph::{Graph, Var};
use super::optim::AdamConfig;
use super::params::{Binding, GradBuffer, ParamStore};

/// Epoch budget and optimizer settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Cap on validation samples evaluated per epoch.
    #[serde(default)]
    pub max_val: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, adam: AdamConfig::default(), patience: Some(5), max_val: None }
    }
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean loss and mean gradients over `batch` for every store in `stores`.
///
/// `f` records the loss of one sample; the bindings it receives are
/// trainable and ordered like `stores`.
pub fn batch_gradients<T, F>(stores: &[&ParamStore<T>], batch: &[usize], f: F) -> Result<(Vec<GradBuffer<T>>, f64)>
where
    T: Real,
    F: Fn(&mut Graph<T>, &mut [Binding<'_, T>], usize) -> Result<Var> + Sync,
{
    let weight = T::one() / T::lit(batch.len().max(1) as f64);
    let per_sample: Vec<Result<(Vec<GradBuffer<T>>, f64)>> = batch
        .par_iter()
        .map(|&i| {
            let mut g = Graph::new();
            let mut binds: Vec<Binding<'_, T>> = stores.iter().map(|s| Binding::trainable(s)).collect();
            let loss = f(&mut g, &mut binds, i)?;
            let grads = g.evaluate_with_gradients(loss)?;
            let bufs = binds
                .iter()
                .zip(stores)
                .map(|(b, s)| {
                    let mut buf = GradBuffer::zeros_like(s);
                    b.accumulate(&grads, &mut buf, weight);
                    buf
                })
                .collect();
            Ok((bufs, g.value(loss).data()[0].as_f64()))
        })
        .collect();
    let mut total: Vec<GradBuffer<T>> = stores.iter().map(|s| GradBuffer::zeros_like(s)).collect();
    let mut loss = 0.0;
    for r in per_sample {
        let (bufs, l) = r?;
        for (t, b) in total.iter_mut().zip(&bufs) {
            t.add(b);
        }
        loss += l;
    }
    for (t, s) in total.iter().zip(stores) {
        if !t.is_finite() {
            return Err(Error::NumericFault {
                node: 0,
                op: "gradient",
                detail: format!("non-finite gradient for a store of {} tensors", s.len()),
            });
        }
    }
    Ok((total, loss / batch.len().max(1) as f64))
}
