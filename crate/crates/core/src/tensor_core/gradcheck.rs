//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::Result;
use crate::rng::seeded;
use crate::scalar::Real;

use super::graph::{Graph, Var};
use super::Tensor;

/// Which coordinates to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// `count` coordinates drawn without replacement across all points.
    Random { count: usize, seed: u64 },
}

/// Maximum over probed coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` records a scalar-valued computation on a fresh graph given one leaf
/// per entry of `points`.
pub fn finite_difference_check<T, F>(f: F, points: &[Tensor<T>], h: T, probe: Probe) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    crate::error::ensure!(h > T::zero(), "finite-difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.evaluate_with_gradients(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let total: usize = points.iter().map(Tensor::len).sum();
    let coords: Vec<usize> = match probe {
        Probe::All => (0..total).collect(),
        Probe::Random { count, seed } => {
            let mut rng = seeded(seed);
            let mut c = sample(&mut rng, total, count.min(total)).into_vec();
            c.sort_unstable();
            c
        }
    };

    let eval = |pts: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.constant(p.clone())).collect();
        let l = f(&mut g, &vars)?;
        g.check_finite(l)?;
        Ok(g.value(l).data()[0])
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = points.to_vec();
    for flat in coords {
        let (mut pi, mut off) = (0, flat);
        while off >= points[pi].len() {
            off -= points[pi].len();
            pi += 1;
        }
        let orig = work[pi].data()[off];
        work[pi].data_mut()[off] = orig + h;
        let up = eval(&work)?;
        work[pi].data_mut()[off] = orig - h;
        let down = eval(&work)?;
        work[pi].data_mut()[off] = orig;
        let numeric = (up - down) / (T::lit(2.0) * h);
        let a = analytic[pi].data()[off];
        let err = (a - numeric).abs() / T::one().max(a.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
