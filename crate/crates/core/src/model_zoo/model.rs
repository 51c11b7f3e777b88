use std::sync::Arc;

use crate::data_io::{checkpoint::Checkpoint, Sample};
use crate::error::{ensure, Error, Result};
use crate::rng::{seeded, Rng};
use crate::scalar::Real;
use crate::tensor_core::nn::{patchify_index, Conv, DecoderBlock, EncoderBlock, LayerNorm, Linear, Mlp};
use crate::tensor_core::{Binding, Graph, ParamId, ParamStore, Tensor, Var};

use super::config::{Component, LayerAddress, ModelConfig, ModelKind, Stage};

#[derive(Clone, Debug)]
struct VitArch {
    patch_index: Arc<[u32]>,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    head_ln: LayerNorm,
    head: Linear,
}

#[derive(Clone, Debug)]
struct DetrArch {
    convs: Vec<Conv>,
    proj: Linear,
    pos: ParamId,
    encoder: Vec<EncoderBlock>,
    memory_ln: LayerNorm,
    queries: ParamId,
    decoder: Vec<DecoderBlock>,
    final_ln: LayerNorm,
    class_head: Linear,
    box_head: Mlp,
}

#[derive(Clone, Debug)]
enum Arch {
    Vit(VitArch),
    Detr(DetrArch),
}

/// Graph handles for every captured activation of one forward pass.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub pos: Var,
    pub bb: Var,
    /// Layer 0 is `bb`; the last entry is the ENC stage.
    pub encoder: Vec<Var>,
    /// Layer 0 is the learned queries; the last entry is the DEC stage.
    pub decoder: Vec<Var>,
    /// ViT: `[1 x C]` from the class token. Detector: `[Q x (C+1)]`.
    pub logits: Var,
    pub boxes: Option<Var>,
    pub pred: Option<Var>,
}

impl StageVars {
    pub fn stage(&self, s: Stage) -> Option<Var> {
        match s {
            Stage::Bb => Some(self.bb),
            Stage::Enc => self.encoder.last().copied(),
            Stage::Dec => self.decoder.last().copied(),
            Stage::Pred => self.pred,
        }
    }
}

/// Captured activations `x_j` of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct StageActivations<T> {
    pub bb: Tensor<T>,
    pub enc: Tensor<T>,
    pub dec: Option<Tensor<T>>,
    pub pred: Option<Tensor<T>>,
    /// Per-layer encoder activations `0..=depth`; empty once compacted.
    pub encoder_layers: Vec<Tensor<T>>,
    /// Per-layer decoder activations `0..=depth`; empty once compacted.
    pub decoder_layers: Vec<Tensor<T>>,
    /// Positional embedding added at BB.
    pub pos: Arc<Tensor<T>>,
}

impl<T: Real> StageActivations<T> {
    pub fn stage(&self, s: Stage) -> Option<&Tensor<T>> {
        match s {
            Stage::Bb => Some(&self.bb),
            Stage::Enc => Some(&self.enc),
            Stage::Dec => self.dec.as_ref(),
            Stage::Pred => self.pred.as_ref(),
        }
    }

    pub fn stage_mut(&mut self, s: Stage) -> Option<&mut Tensor<T>> {
        match s {
            Stage::Bb => Some(&mut self.bb),
            Stage::Enc => Some(&mut self.enc),
            Stage::Dec => self.dec.as_mut(),
            Stage::Pred => self.pred.as_mut(),
        }
    }

    pub fn layer(&self, addr: LayerAddress) -> Option<&Tensor<T>> {
        match addr.component {
            Component::Encoder => self.encoder_layers.get(addr.layer),
            Component::Decoder => self.decoder_layers.get(addr.layer),
        }
    }

    /// Drops per-layer captures, keeping only the stage tensors.
    pub fn compact(mut self) -> Self {
        self.encoder_layers = Vec::new();
        self.decoder_layers = Vec::new();
        self
    }
}

/// One query's output: logits over `C` classes plus no-object (index `C`),
/// and a `(cx, cy, w, h)` box in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection<T> {
    pub logits: Vec<T>,
    pub bbox: [T; 4],
}

impl<T: Real> Detection<T> {
    /// Argmax over all logits, no-object included.
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Splits a PRED tensor `[Q x (C+5)]` into per-query detections.
pub fn detections_from_pred<T: Real>(pred: &Tensor<T>) -> Vec<Detection<T>> {
    let c1 = pred.cols() - 4;
    (0..pred.rows())
        .map(|q| {
            let row = pred.row(q);
            Detection { logits: row[..c1].to_vec(), bbox: [row[c1], row[c1 + 1], row[c1 + 2], row[c1 + 3]] }
        })
        .collect()
}

/// A staged forward network `N` with parameters `θ`.
#[derive(Clone, Debug)]
pub struct ForwardModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub seed: u64,
    arch: Arch,
}

impl<T: Real> ForwardModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut s = ParamStore::new();
        let arch = match config.kind {
            ModelKind::Vit => Arch::Vit(build_vit(&config, &mut s, &mut rng)),
            ModelKind::Detr => Arch::Detr(build_detr(&config, &mut s, &mut rng)),
        };
        Ok(Self { config, params: s, seed, arch })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Parameters belonging to the components that produce `stage` from
    /// the previous one.
    pub fn stage_parameter_count(&self, stage: Stage) -> usize {
        let prefixes: &[&str] = match (self.kind(), stage) {
            (ModelKind::Vit, Stage::Bb) => &["patch_embed.", "cls", "pos"],
            (ModelKind::Vit, Stage::Enc) => &["enc."],
            (ModelKind::Detr, Stage::Bb) => &["conv", "proj.", "pos"],
            (ModelKind::Detr, Stage::Enc) => &["enc."],
            (ModelKind::Detr, Stage::Dec) => &["memory_ln.", "queries", "dec."],
            (ModelKind::Detr, Stage::Pred) => &["final_ln.", "class_head.", "box_head."],
            _ => &[],
        };
        prefixes.iter().map(|p| self.params.count_prefix(p)).sum()
    }

    /// Positional embedding `[T x d]` added at BB.
    pub fn positional_embedding(&self) -> &Tensor<T> {
        match &self.arch {
            Arch::Vit(a) => self.params.get(a.pos),
            Arch::Detr(a) => self.params.get(a.pos),
        }
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let s = self.config.image_size;
        ensure!(image.shape() == [s, s, 3], "image shape {:?}, model expects [{s}, {s}, 3]", image.shape());
        Ok(())
    }

    /// Records the forward pass of `image` (a `[S x S x 3]` value) into `g`.
    pub fn record(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, image: Var) -> Result<StageVars> {
        let s = self.config.image_size;
        ensure!(g.value(image).len() == s * s * 3, "image has {} values, model expects {s}x{s}x3", g.value(image).len());
        Ok(match &self.arch {
            Arch::Vit(a) => self.record_vit(a, g, bind, image),
            Arch::Detr(a) => self.record_detr(a, g, bind, image),
        })
    }

    fn record_vit(&self, a: &VitArch, g: &mut Graph<T>, bind: &mut Binding<'_, T>, image: Var) -> StageVars {
        let c = &self.config;
        let p = c.patch;
        let patches = g.gather(image, a.patch_index.clone(), &[c.image_tokens(), p * p * 3]);
        let emb = a.patch_embed.forward(g, bind, patches);
        let cls = bind.get(g, a.cls);
        let tokens = g.concat_rows(&[cls, emb]);
        let pos = bind.get(g, a.pos);
        let bb = g.add(tokens, pos);
        let mut encoder = vec![bb];
        for b in &a.blocks {
            let x = *encoder.last().expect("non-empty");
            encoder.push(b.forward(g, bind, x, c.cross_attention_only));
        }
        let enc = *encoder.last().expect("non-empty");
        let cls_out = g.slice_rows(enc, 0, 1);
        let h = a.head_ln.forward(g, bind, cls_out);
        let logits = a.head.forward(g, bind, h);
        StageVars { pos, bb, encoder, decoder: vec![], logits, boxes: None, pred: None }
    }

    fn record_detr(&self, a: &DetrArch, g: &mut Graph<T>, bind: &mut Binding<'_, T>, image: Var) -> StageVars {
        let mut x = image;
        for conv in &a.convs {
            let y = conv.forward(g, bind, x);
            x = g.gelu(y);
        }
        let tokens = a.proj.forward(g, bind, x);
        let pos = bind.get(g, a.pos);
        let bb = g.add(tokens, pos);
        let mut encoder = vec![bb];
        for b in &a.encoder {
            let x = *encoder.last().expect("non-empty");
            encoder.push(b.forward(g, bind, x, false));
        }
        let enc = *encoder.last().expect("non-empty");
        let memory = a.memory_ln.forward(g, bind, enc);
        let queries = bind.get(g, a.queries);
        let mut decoder = vec![queries];
        for b in &a.decoder {
            let t = *decoder.last().expect("non-empty");
            decoder.push(b.forward(g, bind, t, memory));
        }
        let dec = *decoder.last().expect("non-empty");
        let h = a.final_ln.forward(g, bind, dec);
        let logits = a.class_head.forward(g, bind, h);
        let raw = a.box_head.forward(g, bind, h);
        let boxes = g.sigmoid(raw);
        let pred = g.concat_cols(&[logits, boxes]);
        StageVars { pos, bb, encoder, decoder, logits, boxes: Some(boxes), pred: Some(pred) }
    }

    /// Frozen forward pass returning all captured activations and the logits
    /// (`[1 x C]` for the ViT, `[Q x (C+1)]` for the detector).
    pub fn forward(&self, image: &Tensor<T>) -> Result<(StageActivations<T>, Tensor<T>)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let img = g.constant(image.clone());
        let v = self.record(&mut g, &mut bind, img)?;
        let last = v.pred.unwrap_or(v.logits);
        g.check_finite(last)?;
        let take = |x: Var| g.value(x).clone();
        let acts = StageActivations {
            bb: take(v.bb),
            enc: take(*v.encoder.last().expect("non-empty")),
            dec: v.decoder.last().map(|&x| take(x)),
            pred: v.pred.map(take),
            encoder_layers: v.encoder.iter().map(|&x| take(x)).collect(),
            decoder_layers: v.decoder.iter().map(|&x| take(x)).collect(),
            pos: Arc::new(take(v.pos)),
        };
        Ok((acts, take(v.logits)))
    }

    /// Task loss `L_OBJ` for one sample, recorded into `g`.
    pub fn record_task_loss(&self, g: &mut Graph<T>, vars: &StageVars, sample: &Sample<T>) -> Result<Var> {
        match self.kind() {
            ModelKind::Vit => {
                let label = sample
                    .label()
                    .ok_or_else(|| Error::Contract("classifier needs a classification sample".into()))?;
                ensure!(label < self.config.classes, "label {label} out of range");
                Ok(g.cross_entropy(vars.logits, &[label], &[T::one()]))
            }
            ModelKind::Detr => {
                ensure!(sample.label().is_none(), "detector needs a detection sample");
                let targets = super::detection::targets_of(sample);
                let boxes = vars.boxes.expect("detector records boxes");
                let assignment = super::detection::match_queries(g.value(vars.logits), g.value(boxes), &targets)?;
                Ok(super::detection::record_detection_loss(g, vars.logits, boxes, &targets, &assignment))
            }
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint::from_store(
            format!("forward:{}", serde_json::to_string(&self.kind())?.trim_matches('"')),
            self.seed,
            serde_json::to_string(&self.config)?,
            &self.params,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ensure!(ckpt.kind.starts_with("forward:"), "checkpoint kind {:?} is not a forward model", ckpt.kind);
        let config: ModelConfig = serde_json::from_str(&ckpt.config)?;
        let mut m = Self::new(config, ckpt.seed)?;
        m.params.load_named(&ckpt.tensors)?;
        Ok(m)
    }
}

fn build_vit<T: Real>(c: &ModelConfig, s: &mut ParamStore<T>, rng: &mut Rng) -> VitArch {
    let d = c.d_model;
    let patch_embed = Linear::new(s, "patch_embed", c.patch * c.patch * 3, d, rng);
    let cls = s.zeros("cls", &[1, d]);
    let pos = s.glorot_shaped("pos", c.tokens(), d, rng);
    let blocks = (0..c.enc_depth).map(|l| EncoderBlock::new(s, &format!("enc.{l}"), d, c.heads, c.mlp_hidden, rng)).collect();
    let head_ln = LayerNorm::new(s, "head_ln", d);
    let head = Linear::new(s, "head", d, c.classes, rng);
    VitArch { patch_index: patchify_index(c.image_size, c.patch), patch_embed, cls, pos, blocks, head_ln, head }
}

fn build_detr<T: Real>(c: &ModelConfig, s: &mut ParamStore<T>, rng: &mut Rng) -> DetrArch {
    let d = c.d_model;
    let mut convs = Vec::new();
    let (mut side, mut ch) = (c.image_size, 3);
    for (i, &out) in c.conv_channels.iter().enumerate() {
        convs.push(Conv::new(s, &format!("conv{i}"), side, side, ch, out, rng));
        side = side.div_ceil(2);
        ch = out;
    }
    let proj = Linear::new(s, "proj", ch, d, rng);
    let pos = s.glorot_shaped("pos", c.tokens(), d, rng);
    let encoder = (0..c.enc_depth).map(|l| EncoderBlock::new(s, &format!("enc.{l}"), d, c.heads, c.mlp_hidden, rng)).collect();
    let memory_ln = LayerNorm::new(s, "memory_ln", d);
    let queries = s.glorot_shaped("queries", c.queries, d, rng);
    let decoder = (0..c.dec_depth).map(|l| DecoderBlock::new(s, &format!("dec.{l}"), d, c.heads, c.mlp_hidden, rng)).collect();
    let final_ln = LayerNorm::new(s, "final_ln", d);
    let class_head = Linear::new(s, "class_head", d, c.classes + 1, rng);
    let box_head = Mlp::new(s, "box_head", d, d, 4, rng);
    DetrArch { convs, proj, pos, encoder, memory_ln, queries, decoder, final_ln, class_head, box_head }
}

/// Forward pass of the classifier: activations at BB, every encoder layer
/// and ENC, plus class logits `[C]`.
pub fn vit_forward<T: Real>(image: &Tensor<T>, model: &ForwardModel<T>) -> Result<(StageActivations<T>, Vec<T>)> {
    ensure!(model.kind() == ModelKind::Vit, "vit_forward needs a ViT model");
    let (acts, logits) = model.forward(image)?;
    Ok((acts, logits.into_data()))
}

/// Forward pass of the detector: activations at every stage and layer plus
/// exactly `Q` detections.
pub fn detr_forward<T: Real>(image: &Tensor<T>, model: &ForwardModel<T>) -> Result<(StageActivations<T>, Vec<Detection<T>>)> {
    ensure!(model.kind() == ModelKind::Detr, "detr_forward needs a detector model");
    let (acts, _) = model.forward(image)?;
    let dets = detections_from_pred(acts.pred.as_ref().expect("detector records PRED"));
    Ok((acts, dets))
}
