use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data_io::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::model_zoo::{ModelConfig, ModelKind, Stage};
use crate::rng::{seeded, Rng};
use crate::scalar::Real;
use crate::tensor_core::nn::{unpatchify_index, Deconv, DecoderBlock, EncoderBlock, LayerNorm, Linear, Mlp};
use crate::tensor_core::{Binding, Graph, ParamId, ParamStore, Tensor, Var};

/// Structural variant of an inverse component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Mirrors the forward component. At BB this is the deconvolution stack
    /// for the detector and the per-token decoder for the ViT.
    Mirror,
    /// Decodes every image patch from its own token only.
    LocalBackbone,
    /// Prediction inverse fed the full class-logit distribution.
    PredFd,
    /// Prediction inverse fed a one-hot argmax encoding.
    PredOh,
    /// Decoder inverse whose learned blank tokens attend to the decoder output.
    BlankTokenDecoder,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mirror => "mirror",
            Variant::LocalBackbone => "local_backbone",
            Variant::PredFd => "pred_fd",
            Variant::PredOh => "pred_oh",
            Variant::BlankTokenDecoder => "blank_token_decoder",
        }
    }

    /// Canonical variant for `stage`, mapping the generic `mirror` tag onto
    /// each stage's mirrored design.
    pub fn resolve(self, config: &ModelConfig, stage: Stage) -> Result<Variant> {
        ensure!(config.has_stage(stage), "stage {stage} not in the {:?} stage plan", config.kind);
        let v = match (stage, self) {
            (Stage::Bb, Variant::Mirror | Variant::LocalBackbone) => self,
            (Stage::Enc, Variant::Mirror) => self,
            (Stage::Dec, Variant::Mirror | Variant::BlankTokenDecoder) => Variant::BlankTokenDecoder,
            (Stage::Pred, Variant::Mirror | Variant::PredFd) => Variant::PredFd,
            (Stage::Pred, Variant::PredOh) => self,
            _ => return Err(Error::Contract(format!("variant {} does not apply to stage {stage}", self.name()))),
        };
        Ok(v)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mirror" => Ok(Variant::Mirror),
            "local_backbone" => Ok(Variant::LocalBackbone),
            "pred_fd" => Ok(Variant::PredFd),
            "pred_oh" => Ok(Variant::PredOh),
            "blank_token_decoder" => Ok(Variant::BlankTokenDecoder),
            _ => Err(Error::Contract(format!("unknown variant {s:?}"))),
        }
    }
}

/// Everything needed to rebuild an inverse component's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseSpec {
    pub model: ModelConfig,
    pub source: Stage,
    /// `None` targets the image (a full-path inverse when `source` is not BB).
    pub target: Option<Stage>,
    /// One resolved variant per hop, from `source` downwards.
    pub variants: Vec<Variant>,
    pub seed: u64,
}

impl InverseSpec {
    /// Spec of the modular component `N⁻¹_{j:j−1}`.
    pub fn modular(model: &ModelConfig, source: Stage, variant: Variant, seed: u64) -> Result<Self> {
        let v = variant.resolve(model, source)?;
        Ok(Self { model: model.clone(), source, target: model.previous_stage(source), variants: vec![v], seed })
    }

    /// Spec of the full-path inverse `N⁻¹_{j:0}`, built as a chain of the
    /// default mirrored designs.
    pub fn full_path(model: &ModelConfig, source: Stage, seed: u64) -> Result<Self> {
        ensure!(model.has_stage(source), "stage {source} not in the stage plan");
        let plan = model.stages();
        let top = plan.iter().position(|&s| s == source).expect("checked");
        let variants = plan[..=top].iter().rev().map(|&s| Variant::Mirror.resolve(model, s)).collect::<Result<_>>()?;
        Ok(Self { model: model.clone(), source, target: None, variants, seed })
    }

    /// Stages visited, from `source` downwards, one per hop.
    pub fn hop_stages(&self) -> Vec<Stage> {
        let plan = self.model.stages();
        let top = plan.iter().position(|&s| s == self.source).expect("validated source");
        plan[..=top].iter().rev().copied().take(self.variants.len()).collect()
    }

    pub fn is_full_path(&self) -> bool {
        self.target.is_none() && self.source != Stage::Bb
    }

    pub fn kind_tag(&self) -> String {
        let target = self.target.map_or("image", Stage::name);
        format!("inverse:{}:{}:{}", self.source, target, self.variants[0])
    }
}

#[derive(Clone, Debug)]
enum Block {
    Deconv { unproj: Linear, layers: Vec<Deconv> },
    Local { mlp: Mlp, skip_cls: bool, index: Arc<[u32]>, image_tokens: usize, patch_values: usize },
    Encoder { skip: Linear, ln_in: LayerNorm, blocks: Vec<EncoderBlock>, ln: LayerNorm, out: Linear },
    Decoder { blank: ParamId, blocks: Vec<DecoderBlock>, ln: LayerNorm, out: Linear },
    Pred { mlp: Mlp, offset: ParamId, one_hot: bool, classes: usize },
}

/// A trained approximate inverse `N⁻¹_{j:i}` with its own parameters `φ`.
#[derive(Clone, Debug)]
pub struct InverseComponent<T> {
    pub spec: InverseSpec,
    pub params: ParamStore<T>,
    blocks: Vec<Block>,
}

fn build_block<T: Real>(c: &ModelConfig, stage: Stage, v: Variant, hop: usize, s: &mut ParamStore<T>, rng: &mut Rng) -> Block {
    let d = c.d_model;
    let name = |part: &str| format!("h{hop}.{part}");
    match (stage, v) {
        (Stage::Bb, Variant::Mirror) if c.kind == ModelKind::Detr => {
            let chans = &c.conv_channels;
            let last = *chans.last().expect("validated");
            let unproj = Linear::new(s, &name("unproj"), d, last, rng);
            let mut layers = Vec::new();
            let mut side = c.grid();
            for k in (0..chans.len()).rev() {
                let c_out = if k == 0 { 3 } else { chans[k - 1] };
                layers.push(Deconv::new(s, &name(&format!("deconv{}", layers.len())), side, side, chans[k], c_out, rng));
                side *= 2;
            }
            Block::Deconv { unproj, layers }
        }
        (Stage::Bb, _) => {
            let p = c.total_stride();
            let patch_values = p * p * 3;
            let hidden = c.mlp_hidden.max(patch_values);
            Block::Local {
                mlp: Mlp::new(s, &name("local"), d, hidden, patch_values, rng),
                skip_cls: c.kind == ModelKind::Vit,
                index: unpatchify_index(c.image_size, p),
                image_tokens: c.image_tokens(),
                patch_values,
            }
        }
        (Stage::Enc, _) => Block::Encoder {
            skip: Linear::zeroed(s, &name("skip"), d, d),
            ln_in: LayerNorm::new(s, &name("ln_in"), d),
            blocks: (0..c.enc_depth)
                .map(|l| EncoderBlock::new(s, &name(&format!("enc.{l}")), d, c.heads, c.mlp_hidden, rng))
                .collect(),
            ln: LayerNorm::new(s, &name("ln"), d),
            out: Linear::zeroed(s, &name("out"), d, d),
        },
        (Stage::Dec, _) => Block::Decoder {
            blank: s.glorot_shaped(name("blank"), c.tokens(), d, rng),
            blocks: (0..c.dec_depth)
                .map(|l| DecoderBlock::new(s, &name(&format!("dec.{l}")), d, c.heads, c.mlp_hidden, rng))
                .collect(),
            ln: LayerNorm::new(s, &name("ln"), d),
            out: Linear::new(s, &name("out"), d, d, rng),
        },
        (Stage::Pred, v) => Block::Pred {
            mlp: Mlp::new(s, &name("pred"), c.pred_width(), c.mlp_hidden, d, rng),
            offset: s.zeros(name("offset"), &[c.queries, d]),
            one_hot: v == Variant::PredOh,
            classes: c.classes,
        },
    }
}

/// One-hot class encoding of PRED rows: argmax over the real classes, except
/// that queries whose overall argmax is no-object stay no-object. Box
/// columns pass through unchanged.
pub fn one_hot_pred<T: Real>(pred: &Tensor<T>, classes: usize) -> Tensor<T> {
    let mut out = pred.clone();
    for q in 0..pred.rows() {
        let row = pred.row(q);
        let overall = crate::model_zoo::argmax(&row[..=classes]);
        let hot = if overall == classes { classes } else { crate::model_zoo::argmax(&row[..classes]) };
        for (c, v) in out.row_mut(q)[..=classes].iter_mut().enumerate() {
            *v = if c == hot { T::one() } else { T::zero() };
        }
    }
    out
}

impl<T: Real> InverseComponent<T> {
    pub fn new(spec: InverseSpec) -> Result<Self> {
        spec.model.validate()?;
        ensure!(!spec.variants.is_empty(), "inverse needs at least one hop");
        let stages = spec.hop_stages();
        ensure!(stages.len() == spec.variants.len(), "more hops than stages below {}", spec.source);
        let expected_target = spec.model.previous_stage(*stages.last().expect("non-empty"));
        ensure!(expected_target == spec.target, "hops from {} do not end at the target", spec.source);
        let mut rng = seeded(spec.seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        for (hop, (&stage, &v)) in stages.iter().zip(&spec.variants).enumerate() {
            ensure!(v.resolve(&spec.model, stage)? == v, "variant {v} is not canonical for stage {stage}");
            blocks.push(build_block(&spec.model, stage, v, hop, &mut params, &mut rng));
        }
        Ok(Self { spec, params, blocks })
    }

    pub fn modular(model: &ModelConfig, source: Stage, variant: Variant, seed: u64) -> Result<Self> {
        Self::new(InverseSpec::modular(model, source, variant, seed)?)
    }

    pub fn full_path(model: &ModelConfig, source: Stage, seed: u64) -> Result<Self> {
        Self::new(InverseSpec::full_path(model, source, seed)?)
    }

    pub fn source(&self) -> Stage {
        self.spec.source
    }

    pub fn variant(&self) -> Variant {
        self.spec.variants[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn input_shape(&self) -> [usize; 2] {
        self.spec.model.stage_shape(self.spec.source).expect("validated source")
    }

    pub fn output_len(&self) -> usize {
        match self.spec.target {
            Some(t) => self.spec.model.stage_shape(t).expect("validated target").iter().product(),
            None => self.spec.model.image_size * self.spec.model.image_size * 3,
        }
    }

    /// Records the inverse applied to `x` with the BB positional embedding
    /// `pos` as side input.
    pub fn record(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var, pos: Var) -> Result<Var> {
        let [rows, cols] = self.input_shape();
        let shape = g.value(x).shape();
        ensure!(
            shape.len() == 2 && shape[0] == rows && shape[1] == cols,
            "inverse from {} expects [{rows} x {cols}], got {shape:?}",
            self.spec.source
        );
        let mut h = x;
        for b in &self.blocks {
            h = record_block(b, g, bind, h, pos);
        }
        Ok(h)
    }

    /// Frozen application to a tensor; images come back as `[S x S x 3]`.
    pub fn apply(&self, x: &Tensor<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut bind = Binding::frozen(&self.params);
        let xv = g.constant(x.clone());
        let pv = g.constant(pos.clone());
        let y = self.record(&mut g, &mut bind, xv, pv)?;
        g.check_finite(y)?;
        let out = g.value(y).clone();
        Ok(match self.spec.target {
            Some(_) => out,
            None => {
                let s = self.spec.model.image_size;
                out.reshape([s, s, 3])?
            }
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint::from_store(self.spec.kind_tag(), self.spec.seed, serde_json::to_string(&self.spec)?, &self.params))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ensure!(ckpt.kind.starts_with("inverse:"), "checkpoint kind {:?} is not an inverse component", ckpt.kind);
        let spec: InverseSpec = serde_json::from_str(&ckpt.config)?;
        let mut c = Self::new(spec)?;
        c.params.load_named(&ckpt.tensors)?;
        Ok(c)
    }
}

fn record_block<T: Real>(b: &Block, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var, pos: Var) -> Var {
    match b {
        Block::Deconv { unproj, layers } => {
            let x = g.sub(x, pos);
            let h = unproj.forward(g, bind, x);
            let mut h = g.gelu(h);
            for (i, l) in layers.iter().enumerate() {
                h = l.forward(g, bind, h);
                if i + 1 < layers.len() {
                    h = g.gelu(h);
                }
            }
            h
        }
        Block::Local { mlp, skip_cls, index, image_tokens, patch_values } => {
            let x = g.sub(x, pos);
            let x = if *skip_cls { g.slice_rows(x, 1, *image_tokens) } else { x };
            let patches = mlp.forward(g, bind, x);
            let n = image_tokens * patch_values;
            g.gather(patches, index.clone(), &[n / 3, 3])
        }
        Block::Encoder { skip, ln_in, blocks, ln, out } => {
            let h = ln_in.forward(g, bind, x);
            let mut h = g.add(h, pos);
            for blk in blocks {
                h = blk.forward(g, bind, h, false);
            }
            let h = ln.forward(g, bind, h);
            let y = out.forward(g, bind, h);
            let s = skip.forward(g, bind, x);
            g.add(s, y)
        }
        Block::Decoder { blank, blocks, ln, out } => {
            let b = bind.get(g, *blank);
            let mut t = g.add(b, pos);
            for blk in blocks {
                t = blk.forward(g, bind, t, x);
            }
            let t = ln.forward(g, bind, t);
            out.forward(g, bind, t)
        }
        Block::Pred { mlp, offset, one_hot, classes } => {
            let x = if *one_hot {
                let hot = one_hot_pred(g.value(x), *classes);
                g.constant(hot)
            } else {
                x
            };
            let h = mlp.forward(g, bind, x);
            let o = bind.get(g, *offset);
            g.add(h, o)
        }
    }
}
