use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::Sample;
use crate::error::{ensure, Error, Result};
use crate::inversion::{reconstruct, Inverter};
use crate::model_zoo::{ForwardModel, ModelConfig, Stage, StageActivations};
use crate::rng::seeded;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenManipulation {
    pub stage: Stage,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub add_positional: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_fraction() -> f64 {
    0.2
}

impl TokenManipulation {
    pub fn new(stage: Stage, add_positional: bool, seed: u64) -> Self {
        Self { stage, fraction: default_fraction(), add_positional, seed }
    }
}

/// Number of tokens replaced: `fraction * tokens`, rounded half up.
pub fn selected_count(fraction: f64, tokens: usize) -> usize {
    ((fraction * tokens as f64) + 0.5).floor() as usize
}

/// Replaces a random subset of image tokens at `m.stage` by one shared
/// noise vector (uniform in `[-1, 1]`, scaled by the stage activation's
/// standard deviation), plus each token's positional embedding when
/// `m.add_positional`. The class token is never selected. Returns the new
/// activations and the selected row indices in ascending order.
pub fn manipulate_tokens<T: Real>(
    config: &ModelConfig,
    activations: &StageActivations<T>,
    m: &TokenManipulation,
) -> Result<(StageActivations<T>, Vec<usize>)> {
    ensure!((0.0..=1.0).contains(&m.fraction), "fraction {} outside [0, 1]", m.fraction);
    ensure!(matches!(m.stage, Stage::Bb | Stage::Enc), "token manipulation applies to BB and ENC tokens");
    if m.add_positional && m.stage != Stage::Bb {
        return Err(Error::Contract(format!(
            "stage {} has no explicit positional encoding to preserve",
            m.stage
        )));
    }
    let mut out = activations.clone();
    let x = out.stage_mut(m.stage).ok_or_else(|| Error::Contract(format!("activations lack stage {}", m.stage)))?;
    let first = config.first_image_token();
    let tokens = config.image_tokens();
    ensure!(x.rows() == first + tokens, "stage {} has {} rows, expected {}", m.stage, x.rows(), first + tokens);
    let count = selected_count(m.fraction, tokens);
    if count == 0 {
        return Ok((out, vec![]));
    }
    let mut rng = seeded(m.seed);
    let mut rows: Vec<usize> = sample(&mut rng, tokens, count).into_iter().map(|i| i + first).collect();
    rows.sort_unstable();
    let scale = x.std();
    let noise: Vec<T> = (0..x.cols()).map(|_| T::lit(rng.gen_range(-1.0..=1.0)) * scale).collect();
    for &r in &rows {
        let row = x.row_mut(r);
        row.copy_from_slice(&noise);
        if m.add_positional {
            for (v, &p) in row.iter_mut().zip(activations.pos.row(r)) {
                *v += p;
            }
        }
    }
    Ok((out, rows))
}

/// Reconstruction differences split by patch ownership.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalityScore {
    /// Mean squared difference on pixels of manipulated tokens' patches.
    pub manipulated_mse: f64,
    /// Mean squared difference on all other pixels.
    pub untouched_mse: f64,
    /// Largest MSE between any two manipulated patches of one reconstruction.
    pub max_manipulated_pair_mse: f64,
}

impl LocalityScore {
    pub fn ratio(&self) -> f64 {
        self.manipulated_mse / self.untouched_mse
    }
}

/// Compares reconstructions from manipulated and clean activations over
/// `samples`, with a fresh token selection per sample (seed `m.seed + i`).
pub fn locality_score<T: Real, I: Inverter<T>>(
    model: &ForwardModel<T>,
    stack: &I,
    m: &TokenManipulation,
    samples: &[Sample<T>],
) -> Result<LocalityScore> {
    let c = &model.config;
    let (side, p, grid) = (c.image_size, c.total_stride(), c.grid());
    let per = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (acts, _) = model.forward(&s.image)?;
            let clean = reconstruct(stack, &acts, m.stage)?.image;
            let mi = TokenManipulation { seed: m.seed.wrapping_add(i as u64), ..m.clone() };
            let (bad, rows) = manipulate_tokens(c, &acts, &mi)?;
            let dirty = reconstruct(stack, &bad, m.stage)?.image;
            let mut owned = vec![false; grid * grid];
            for r in &rows {
                owned[r - c.first_image_token()] = true;
            }
            let (mut se_m, mut n_m, mut se_u, mut n_u) = (0.0, 0usize, 0.0, 0usize);
            for y in 0..side {
                for x in 0..side {
                    let tok = (y / p) * grid + x / p;
                    for ch in 0..3 {
                        let k = (y * side + x) * 3 + ch;
                        let d = (dirty.data()[k] - clean.data()[k]).as_f64().powi(2);
                        if owned[tok] {
                            se_m += d;
                            n_m += 1;
                        } else {
                            se_u += d;
                            n_u += 1;
                        }
                    }
                }
            }
            let patch = |tok: usize| -> Vec<f64> {
                let (ty, tx) = (tok / grid, tok % grid);
                let mut v = Vec::with_capacity(p * p * 3);
                for y in ty * p..(ty + 1) * p {
                    for x in tx * p..(tx + 1) * p {
                        v.extend((0..3).map(|ch| dirty.data()[(y * side + x) * 3 + ch].as_f64()));
                    }
                }
                v
            };
            let patches: Vec<Vec<f64>> = rows.iter().map(|r| patch(r - c.first_image_token())).collect();
            let mut worst = 0.0f64;
            for a in 0..patches.len() {
                for b in a + 1..patches.len() {
                    let mse = patches[a].iter().zip(&patches[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
                        / patches[a].len() as f64;
                    worst = worst.max(mse);
                }
            }
            Ok((se_m, n_m, se_u, n_u, worst))
        })
        .collect::<Result<Vec<_>>>()?;
    let (se_m, n_m, se_u, n_u, worst) = per.into_iter().fold((0.0, 0, 0.0, 0, 0.0f64), |a, b| {
        (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3, a.4.max(b.4))
    });
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(LocalityScore {
        manipulated_mse: mean(se_m, n_m),
        untouched_mse: mean(se_u, n_u),
        max_manipulated_pair_mse: worst,
    })
}
