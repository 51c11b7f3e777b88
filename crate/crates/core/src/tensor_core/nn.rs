//! Layers built from graph operations. Each layer stores [`ParamId`]s into a
//! caller-owned [`ParamStore`] and binds them on every forward call.

use std::sync::Arc;


use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::scalar::Real;

use super::graph::{Graph, Var, NO_INDEX};
use super::params::{Binding, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(s: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = s.glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = s.zeros(format!("{name}.b"), &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    /// Zero weights and bias, so the layer starts out emitting zeros.
    pub fn zeroed<T: Real>(s: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = s.zeros(format!("{name}.w"), &[fan_in, fan_out]);
        let b = s.zeros(format!("{name}.b"), &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var) -> Var {
        let w = bind.get(g, self.w);
        let b = bind.get(g, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(s: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self { gamma: s.ones(format!("{name}.gamma"), &[d]), beta: s.zeros(format!("{name}.beta"), &[d]) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var) -> Var {
        let gamma = bind.get(g, self.gamma);
        let beta = bind.get(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(s, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(s, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, bind, x);
        let h = g.gelu(h);
        self.fc2.forward(g, bind, h)
    }
}

/// Bound projection weights for [`multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head attention weights `[T_q x T_k]`.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` column groups with learned
/// input and output projections.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    queries: Var,
    keys: Var,
    values: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<AttentionOutput> {
    let (tq, d) = (g.value(queries).rows(), g.value(queries).cols());
    let (tk, dk) = (g.value(keys).rows(), g.value(keys).cols());
    ensure!(heads > 0 && d % heads == 0, "model width {d} not divisible by {heads} heads");
    ensure!(tq >= 1 && tk >= 1, "attention needs at least one query and one key");
    ensure!(dk == d, "key width {dk} differs from query width {d}");
    ensure!(
        g.value(values).rows() == tk && g.value(values).cols() == d,
        "values shape {:?} does not match keys [{tk} x {d}]",
        g.value(values).shape()
    );
    for (name, v, shape) in [
        ("wq", w.wq, [d, d]),
        ("wk", w.wk, [d, d]),
        ("wv", w.wv, [d, d]),
        ("wo", w.wo, [d, d]),
    ] {
        ensure!(g.value(v).shape() == shape, "{name} must be [{d} x {d}], got {:?}", g.value(v).shape());
    }
    let q = g.matmul(queries, w.wq);
    let q = g.add_row(q, w.bq);
    let k = g.matmul(keys, w.wk);
    let k = g.add_row(k, w.bk);
    let v = g.matmul(values, w.wv);
    let v = g.add_row(v, w.bv);
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
        };
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let p = g.softmax_rows(s);
        weights.push(p);
        outs.push(g.matmul(p, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let o = g.matmul(cat, w.wo);
    let output = g.add_row(o, w.bo);
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(s: &mut ParamStore<T>, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            q: Linear::new(s, &format!("{name}.q"), d, d, rng),
            k: Linear::new(s, &format!("{name}.k"), d, d, rng),
            v: Linear::new(s, &format!("{name}.v"), d, d, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>) -> AttentionVars {
        AttentionVars {
            wq: bind.get(g, self.q.w),
            bq: bind.get(g, self.q.b),
            wk: bind.get(g, self.k.w),
            bk: bind.get(g, self.k.b),
            wv: bind.get(g, self.v.w),
            bv: bind.get(g, self.v.b),
            wo: bind.get(g, self.o.w),
            bo: bind.get(g, self.o.b),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binding<'_, T>,
        queries: Var,
        memory: Var,
    ) -> Var {
        let w = self.bind(g, bind);
        multi_head_attention(g, queries, memory, memory, &w, self.heads)
            .expect("attention shapes fixed at construction")
            .output
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            attn: Attention::new(s, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
            mlp: Mlp::new(s, &format!("{name}.mlp"), d, hidden, d, rng),
        }
    }

    /// With `summary_only`, only row 0 (the class token) attends; every other
    /// row is updated by its own MLP path alone.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var, summary_only: bool) -> Var {
        let h = self.ln1.forward(g, bind, x);
        let x = if summary_only {
            let rows = g.value(x).rows();
            let q = g.slice_rows(h, 0, 1);
            let a = self.attn.forward(g, bind, q, h);
            let head = g.slice_rows(x, 0, 1);
            let head = g.add(head, a);
            let tail = g.slice_rows(x, 1, rows - 1);
            g.concat_rows(&[head, tail])
        } else {
            let a = self.attn.forward(g, bind, h, h);
            g.add(x, a)
        };
        let h = self.ln2.forward(g, bind, x);
        let m = self.mlp.forward(g, bind, h);
        g.add(x, m)
    }
}

/// Pre-norm transformer decoder layer: self-attention, cross-attention, MLP.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub ln2: LayerNorm,
    pub cross_attn: Attention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), d),
            self_attn: Attention::new(s, &format!("{name}.self_attn"), d, heads, rng),
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), d),
            cross_attn: Attention::new(s, &format!("{name}.cross_attn"), d, heads, rng),
            ln3: LayerNorm::new(s, &format!("{name}.ln3"), d),
            mlp: Mlp::new(s, &format!("{name}.mlp"), d, hidden, d, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, tgt: Var, memory: Var) -> Var {
        let h = self.ln1.forward(g, bind, tgt);
        let a = self.self_attn.forward(g, bind, h, h);
        let tgt = g.add(tgt, a);
        let h = self.ln2.forward(g, bind, tgt);
        let a = self.cross_attn.forward(g, bind, h, memory);
        let tgt = g.add(tgt, a);
        let h = self.ln3.forward(g, bind, tgt);
        let m = self.mlp.forward(g, bind, h);
        g.add(tgt, m)
    }
}

/// Output extent of a 3x3, stride-2, pad-1 convolution.
pub fn conv_out(extent: usize) -> usize {
    extent.div_ceil(2)
}

/// im2col gather map for a 3x3, stride-2, pad-1 convolution over a
/// channel-last `[h*w x c]` feature map. Output is `[oh*ow x 9*c]`.
pub fn conv_index(h: usize, w: usize, c: usize) -> Arc<[u32]> {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut idx = Vec::with_capacity(oh * ow * 9 * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    for ch in 0..c {
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            idx.push(NO_INDEX);
                        } else {
                            idx.push(((iy as usize * w + ix as usize) * c + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// col2im scatter map for the transposed convolution that exactly doubles a
/// `[h*w]` grid: the adjoint of [`conv_index`] on a `[2h x 2w]` grid.
/// Input columns are `[h*w x 9*c_out]`; output is `[2h*2w x c_out]`.
pub fn deconv_index(h: usize, w: usize, c_out: usize) -> Arc<[u32]> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(h * w * 9 * c_out);
    for iy in 0..h {
        for ix in 0..w {
            for ky in 0..3 {
                for kx in 0..3 {
                    let oy = (2 * iy + ky) as isize - 1;
                    let ox = (2 * ix + kx) as isize - 1;
                    for ch in 0..c_out {
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            idx.push(NO_INDEX);
                        } else {
                            idx.push(((oy as usize * ow + ox as usize) * c_out + ch) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// 3x3 stride-2 convolution over channel-last maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,

    index: Option<Arc<[u32]>>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        in_h: usize,
        in_w: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = s.glorot(format!("{name}.w"), 9 * c_in, c_out, rng);
        let b = s.zeros(format!("{name}.b"), &[c_out]);
        Self { w, b, in_h, in_w, c_in, c_out, index: Some(conv_index(in_h, in_w, c_in)) }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (conv_out(self.in_h), conv_out(self.in_w))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var) -> Var {
        let (oh, ow) = self.out_hw();
        let index = self.index.clone().unwrap_or_else(|| conv_index(self.in_h, self.in_w, self.c_in));
        let cols = g.gather(x, index, &[oh * ow, 9 * self.c_in]);
        let w = bind.get(g, self.w);
        let b = bind.get(g, self.b);
        let y = g.matmul(cols, w);
        g.add_row(y, b)
    }
}

/// 3x3 stride-2 transposed convolution doubling each spatial extent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,

    index: Option<Arc<[u32]>>,
}

impl Deconv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        s: &mut ParamStore<T>,
        name: &str,
        in_h: usize,
        in_w: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = s.glorot(format!("{name}.w"), c_in, 9 * c_out, rng);
        let b = s.zeros(format!("{name}.b"), &[c_out]);
        Self { w, b, in_h, in_w, c_in, c_out, index: Some(deconv_index(in_h, in_w, c_out)) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var) -> Var {
        let w = bind.get(g, self.w);
        let cols = g.matmul(x, w);
        let index = self.index.clone().unwrap_or_else(|| deconv_index(self.in_h, self.in_w, self.c_out));
        let y = g.scatter_add(cols, index, &[4 * self.in_h * self.in_w, self.c_out]);
        let b = bind.get(g, self.b);
        g.add_row(y, b)
    }
}

/// Gather map cutting a channel-last `[side*side x 3]` image into
/// row-major `patch x patch` tokens of `patch*patch*3` values.
pub fn patchify_index(side: usize, patch: usize) -> Arc<[u32]> {
    let grid = side / patch;
    let mut idx = Vec::with_capacity(side * side * 3);
    for ty in 0..grid {
        for tx in 0..grid {
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        idx.push((((ty * patch + py) * side + tx * patch + px) * 3 + c) as u32);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Inverse permutation of [`patchify_index`].
pub fn unpatchify_index(side: usize, patch: usize) -> Arc<[u32]> {
    let fwd = patchify_index(side, patch);
    let mut inv = vec![0u32; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src as usize] = i as u32;
    }
    inv.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::Tensor;

    fn identity(d: usize) -> Tensor<f64> {
        Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    fn identity_vars(g: &mut Graph<f64>, d: usize) -> AttentionVars {
        let mut m = || g.constant(identity(d));
        let (wq, wk, wv, wo) = (m(), m(), m(), m());
        let mut z = || g.constant(Tensor::zeros([d]));
        let (bq, bk, bv, bo) = (z(), z(), z(), z());
        AttentionVars { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::new();
        let w = identity_vars(&mut g, 4);
        let q = g.constant(Tensor::from_f64([3, 4], &[0.1, 0.2, 0.3, 0.4, 1., 2., 3., 4., -1., 0., 1., 0.]).unwrap());
        let k = g.constant(Tensor::from_f64([1, 4], &[0.5, -0.5, 0.25, 1.0]).unwrap());
        let v = g.constant(Tensor::from_f64([1, 4], &[7.0, -3.0, 0.5, 2.0]).unwrap());
        let out = multi_head_attention(&mut g, q, k, v, &w, 2).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(out.output).row(r), &[7.0, -3.0, 0.5, 2.0]);
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let w = identity_vars(&mut g, 2);
        let q = g.constant(Tensor::from_f64([1, 2], &[0.3, -0.8]).unwrap());
        let k = g.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = g.constant(Tensor::from_f64([2, 2], &[1.0, 0.0, 3.0, 4.0]).unwrap());
        let out = multi_head_attention(&mut g, q, k, v, &w, 1).unwrap();
        let o = g.value(out.output).data();
        assert!((o[0] - 2.0).abs() < 1e-15 && (o[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_bad_heads_and_shapes() {
        let mut g = Graph::new();
        let w = identity_vars(&mut g, 4);
        let q = g.constant(Tensor::zeros([2, 4]));
        let k = g.constant(Tensor::zeros([3, 4]));
        let v = g.constant(Tensor::zeros([2, 4]));
        assert!(multi_head_attention(&mut g, q, k, k, &w, 3).is_err());
        assert!(multi_head_attention(&mut g, q, k, v, &w, 2).is_err());
    }

    #[test]
    fn deconv_map_is_adjoint_of_conv_map() {
        // <conv(x), y> == <x, deconv(y)> for the bare index maps.
        let (h, w, c) = (4, 6, 2);
        let ci = conv_index(2 * h, 2 * w, c);
        let di = deconv_index(h, w, c);
        // conv column (o, k, ch) reads input (i, ch); deconv column (o, k, ch)
        // writes output (i, ch). Same pairs, so the multisets of pairs agree.
        let mut a: Vec<(usize, u32)> = ci.iter().enumerate().filter(|(_, &s)| s != NO_INDEX).map(|(i, &s)| (i, s)).collect();
        let mut b: Vec<(usize, u32)> = di.iter().enumerate().filter(|(_, &s)| s != NO_INDEX).map(|(i, &s)| (i, s)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn patchify_round_trip() {
        let fwd = patchify_index(8, 4);
        let inv = unpatchify_index(8, 4);
        for (i, &j) in inv.iter().enumerate() {
            assert_eq!(fwd[j as usize] as usize, i);
        }
    }
}
