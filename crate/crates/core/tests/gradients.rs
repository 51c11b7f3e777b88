use std::sync::Arc;

use mfil::data_io::{generate_shapes_sample, Mode, Sample};
use mfil::model_zoo::{ForwardModel, ModelConfig};
use mfil::rng::seeded;
use mfil::tensor_core::nn::{conv_index, deconv_index};
use mfil::tensor_core::{
    finite_difference_check, multi_head_attention, AttentionVars, Binding, Graph, Probe, Tensor, Var,
};
use rand::Rng;

const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum with fixed pseudo-random weights turns any tensor into a
/// scalar whose gradient exercises every output coordinate.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = random(g.value(y).shape(), seed);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

fn check(points: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    finite_difference_check(|g, v| Ok(f(g, v)), points, H, Probe::All).unwrap()
}

#[test]
fn softmax_cross_entropy_example() {
    let logits = Tensor::from_f64([1, 3], &[0.2, -0.1, 0.5]).unwrap();
    let err = check(&[logits], |g, v| g.cross_entropy(v[0], &[2], &[1.0]));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_of_eight_vector() {
    let pts = [random(&[1, 8], 1), random(&[8], 2), random(&[8], 3)];
    let err = check(&pts, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        readout(g, y, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_and_structural_ops() {
    let a = random(&[3, 4], 10);
    let b = random(&[3, 4], 11);
    let row = random(&[4], 12);
    type Case = (&'static str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", Box::new(|g, v| g.scale(v[0], -1.7))),
        ("grad_scale", Box::new(|g, v| {
            let y = g.mul(v[0], v[1]);
            g.grad_scale(y, 1.0)
        })),
        ("gelu", Box::new(|g, v| g.gelu(v[0]))),
        ("sigmoid", Box::new(|g, v| g.sigmoid(v[0]))),
        ("relu", Box::new(|g, v| g.relu(v[0]))),
        ("abs", Box::new(|g, v| g.abs(v[0]))),
        ("softmax_rows", Box::new(|g, v| g.softmax_rows(v[0]))),
        ("slice_rows", Box::new(|g, v| g.slice_rows(v[0], 1, 2))),
        ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 2))),
        ("concat_rows", Box::new(|g, v| g.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", Box::new(|g, v| g.concat_cols(&[v[1], v[0]]))),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        ("matmul_nt", Box::new(|g, v| g.matmul_nt(v[0], v[1]))),
        ("mean", Box::new(|g, v| g.mean(v[0]))),
        ("mse", Box::new(|g, v| g.mse(v[0], v[1]))),
    ];
    for (name, f) in cases {
        let err = check(&[a.clone(), b.clone()], |g, v| {
            let y = f(g, v);
            readout(g, y, 13)
        });
        assert!(err < 1e-4, "{name}: {err}");
    }
    let err = check(&[a.clone(), row], |g, v| {
        let y = g.add_row(v[0], v[1]);
        readout(g, y, 14)
    });
    assert!(err < 1e-4, "add_row: {err}");
    let err = check(&[a, random(&[4, 5], 15)], |g, v| {
        let y = g.matmul(v[0], v[1]);
        readout(g, y, 16)
    });
    assert!(err < 1e-4, "matmul: {err}");
}

#[test]
fn weighted_cross_entropy_over_rows() {
    let logits = random(&[4, 5], 20);
    let err = check(&[logits], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 4], &[1.0, 0.1, 1.0, 0.1]));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gather_and_scatter_via_conv_maps() {
    let x = random(&[6 * 6, 2], 30);
    let idx = conv_index(6, 6, 2);
    let err = check(&[x], |g, v| {
        let y = g.gather(v[0], idx.clone(), &[9, 18]);
        readout(g, y, 31)
    });
    assert!(err < 1e-4, "gather: {err}");
    let cols = random(&[9, 9 * 2], 32);
    let idx: Arc<[u32]> = deconv_index(3, 3, 2);
    let err = check(&[cols], |g, v| {
        let y = g.scatter_add(v[0], idx.clone(), &[36, 2]);
        readout(g, y, 33)
    });
    assert!(err < 1e-4, "scatter_add: {err}");
}

#[test]
fn attention_gradients() {
    let d = 4;
    let pts: Vec<Tensor<f64>> = (0..11)
        .map(|i| match i {
            0 => random(&[2, d], 40),
            1 => random(&[3, d], 41),
            k if k % 2 == 0 => random(&[d, d], 40 + k as u64),
            k => random(&[d], 40 + k as u64),
        })
        .collect();
    let err = check(&pts, |g, v| {
        let w = AttentionVars { wq: v[2], bq: v[3], wk: v[4], bk: v[5], wv: v[6], bv: v[7], wo: v[8], bo: v[9] };
        let out = multi_head_attention(g, v[0], v[1], v[1], &w, 2).unwrap();
        readout(g, out.output, 50)
    });
    assert!(err < 1e-4, "{err}");
}

/// Plain-loop attention used as an independent oracle.
fn naive_attention(q: &[Vec<f64>], kv: &[Vec<f64>], w: &[Vec<Vec<f64>>; 4], b: &[Vec<f64>; 4], heads: usize) -> Vec<Vec<f64>> {
    let proj = |x: &[Vec<f64>], k: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| (0..row.len()).map(|j| b[k][j] + (0..row.len()).map(|i| row[i] * w[k][i][j]).sum::<f64>()).collect())
            .collect()
    };
    let (qp, kp, vp) = (proj(q, 0), proj(kv, 1), proj(kv, 2));
    let d = q[0].len();
    let dh = d / heads;
    let mut cat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (r, qr) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kr| (0..dh).map(|c| qr[h * dh + c] * kr[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[r][h * dh + c] = e.iter().zip(&vp).map(|(p, vr)| p / z * vr[h * dh + c]).sum();
            }
        }
    }
    proj(&cat, 3)
}

#[test]
fn attention_matches_dense_oracle() {
    let d = 4;
    let to_rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> { (0..t.rows()).map(|r| t.row(r).to_vec()).collect() };
    let q = random(&[2, d], 60);
    let kv = random(&[3, d], 61);
    let ws: Vec<Tensor<f64>> = (0..4).map(|k| random(&[d, d], 62 + k)).collect();
    let bs: Vec<Tensor<f64>> = (0..4).map(|k| random(&[d], 70 + k)).collect();
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kvv = g.constant(kv.clone());
    let wv: Vec<Var> = ws.iter().map(|t| g.constant(t.clone())).collect();
    let bv: Vec<Var> = bs.iter().map(|t| g.constant(t.clone())).collect();
    let w = AttentionVars { wq: wv[0], bq: bv[0], wk: wv[1], bk: bv[1], wv: wv[2], bv: bv[2], wo: wv[3], bo: bv[3] };
    let out = multi_head_attention(&mut g, qv, kvv, kvv, &w, 2).unwrap();
    let wm = [to_rows(&ws[0]), to_rows(&ws[1]), to_rows(&ws[2]), to_rows(&ws[3])];
    let bm = [bs[0].data().to_vec(), bs[1].data().to_vec(), bs[2].data().to_vec(), bs[3].data().to_vec()];
    let oracle = naive_attention(&to_rows(&q), &to_rows(&kv), &wm, &bm, 2);
    for (r, row) in oracle.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!((g.value(out.output).row(r)[c] - v).abs() < 1e-10);
        }
    }
    for p in &out.weights {
        for r in 0..2 {
            let row = g.value(*p).row(r);
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn model_loss_error(config: ModelConfig, mode: Mode, seed: u64) -> f64 {
    let model = ForwardModel::<f64>::new(config.clone(), seed).unwrap();
    let sample: Sample<f64> = generate_shapes_sample(seed, mode, config.image_size);
    let points = model.params.tensors().to_vec();
    finite_difference_check(
        |g, vars| {
            let mut bind = Binding::preset(&model.params, vars);
            let img = g.constant(sample.image.clone());
            let v = model.record(g, &mut bind, img)?;
            model.record_task_loss(g, &v, &sample)
        },
        &points,
        H,
        Probe::Random { count: 20, seed },
    )
    .unwrap()
}

#[test]
fn micro_vit_loss_gradient() {
    let err = model_loss_error(ModelConfig::micro_vit(), Mode::Classification, 3);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn micro_detr_loss_gradient() {
    let err = model_loss_error(ModelConfig::micro_detr(), Mode::Detection, 4);
    assert!(err < 1e-4, "{err}");
}
