//! Set-prediction loss: Hungarian matching of ground truth to queries,
//! class cross-entropy with a down-weighted no-object term, and L1 boxes.

use std::sync::Arc;

use crate::data_io::Sample;
use crate::error::{ensure, Result};
use crate::scalar::Real;
use crate::tensor_core::{Graph, Tensor, Var};

use super::model::Detection;

pub const NO_OBJECT_WEIGHT: f64 = 0.1;
pub const BOX_WEIGHT: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub bbox: [f64; 4],
}

pub fn targets_of<T: Real>(sample: &Sample<T>) -> Vec<Target> {
    sample.objects().iter().map(|o| Target { class: o.class, bbox: o.bbox }).collect()
}

/// Minimum-cost injective assignment for a `[Q x G]` cost matrix, returned
/// as `assignment[gt] = query`.
pub fn bipartite_match(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let q = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    ensure!(cost.iter().all(|r| r.len() == g), "cost matrix rows have different lengths");
    ensure!(g <= q, "{g} ground-truth objects exceed {q} queries");
    ensure!(cost.iter().flatten().all(|c| c.is_finite()), "cost matrix has non-finite entries");
    if g == 0 {
        return Ok(vec![]);
    }
    // Shortest augmenting paths with potentials; rows are ground truth
    // (1-based), columns are queries.
    let a = |i: usize, j: usize| cost[j - 1][i - 1];
    let (n, m) = (g, q);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn l1(a: &[f64], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Matching cost `[Q x G]`. Besides the class and box terms it subtracts the
/// query's own down-weighted no-object term, so the cheapest assignment is
/// exactly the one with the smallest [`detection_loss`].
pub fn matching_cost(logits: &[Vec<f64>], boxes: &[[f64; 4]], targets: &[Target]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .zip(boxes)
        .map(|(lg, bx)| {
            let ls = log_softmax(lg);
            let no_obj = lg.len() - 1;
            targets
                .iter()
                .map(|t| -ls[t.class] + BOX_WEIGHT * l1(bx, &t.bbox) + NO_OBJECT_WEIGHT * ls[no_obj])
                .collect()
        })
        .collect()
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Assignment for logits `[Q x (C+1)]` and boxes `[Q x 4]`.
pub fn match_queries<T: Real>(logits: &Tensor<T>, boxes: &Tensor<T>, targets: &[Target]) -> Result<Vec<usize>> {
    let lg = rows_f64(logits);
    let bx: Vec<[f64; 4]> = rows_f64(boxes).into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
    bipartite_match(&matching_cost(&lg, &bx, targets))
}

pub fn match_detections<T: Real>(dets: &[Detection<T>], targets: &[Target]) -> Result<Vec<usize>> {
    let lg: Vec<Vec<f64>> = dets.iter().map(|d| d.logits.iter().map(|v| v.as_f64()).collect()).collect();
    let bx: Vec<[f64; 4]> = dets.iter().map(|d| d.bbox.map(|v| v.as_f64())).collect();
    bipartite_match(&matching_cost(&lg, &bx, targets))
}

fn check_assignment(assignment: &[usize], targets: usize, queries: usize) -> Result<Vec<Option<usize>>> {
    ensure!(assignment.len() == targets, "assignment covers {} of {targets} objects", assignment.len());
    let mut owner = vec![None; queries];
    for (gi, &q) in assignment.iter().enumerate() {
        ensure!(q < queries, "assignment uses query {q} of {queries}");
        ensure!(owner[q].is_none(), "query {q} assigned twice");
        owner[q] = Some(gi);
    }
    Ok(owner)
}

/// `L_OBJ` for one image: cross-entropy of every query (matched queries to
/// their object's class, the rest to no-object with weight 0.1) plus
/// `BOX_WEIGHT` times the L1 box error of matched pairs.
pub fn detection_loss<T: Real>(dets: &[Detection<T>], targets: &[Target], assignment: &[usize]) -> Result<f64> {
    let owner = check_assignment(assignment, targets.len(), dets.len())?;
    let mut loss = 0.0;
    for (d, o) in dets.iter().zip(&owner) {
        let lg: Vec<f64> = d.logits.iter().map(|v| v.as_f64()).collect();
        let ls = log_softmax(&lg);
        match o {
            Some(gi) => {
                let t = &targets[*gi];
                loss -= ls[t.class];
                loss += BOX_WEIGHT * l1(&d.bbox.map(|v| v.as_f64()), &t.bbox);
            }
            None => loss -= NO_OBJECT_WEIGHT * ls[lg.len() - 1],
        }
    }
    Ok(loss)
}

/// Graph form of [`detection_loss`] for a fixed assignment.
pub fn record_detection_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    boxes: Var,
    targets: &[Target],
    assignment: &[usize],
) -> Var {
    let (q, c1) = (g.value(logits).rows(), g.value(logits).cols());
    let owner = check_assignment(assignment, targets.len(), q).expect("assignment from match_queries");
    let mut classes = vec![c1 - 1; q];
    let mut weights = vec![T::lit(NO_OBJECT_WEIGHT); q];
    for (gi, &qi) in assignment.iter().enumerate() {
        classes[qi] = targets[gi].class;
        weights[qi] = T::one();
    }
    debug_assert_eq!(owner.iter().flatten().count(), targets.len());
    let ce = g.cross_entropy(logits, &classes, &weights);
    if targets.is_empty() {
        return ce;
    }
    let index: Arc<[u32]> = assignment.iter().flat_map(|&qi| (0..4).map(move |k| (qi * 4 + k) as u32)).collect();
    let picked = g.gather(boxes, index, &[targets.len(), 4]);
    let gt = Tensor::from_fn([targets.len(), 4], |i| T::lit(targets[i / 4].bbox[i % 4]));
    let gt = g.constant(gt);
    let diff = g.sub(picked, gt);
    let a = g.abs(diff);
    let s = g.sum(a);
    let l1 = g.scale(s, T::lit(BOX_WEIGHT));
    g.add(ce, l1)
}
