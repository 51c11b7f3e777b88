use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vit,
    Detr,
}

/// Processing stage of a forward model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bb,
    Enc,
    Dec,
    Pred,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Bb => "bb",
            Stage::Enc => "enc",
            Stage::Dec => "dec",
            Stage::Pred => "pred",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bb" => Ok(Stage::Bb),
            "enc" => Ok(Stage::Enc),
            "dec" => Ok(Stage::Dec),
            "pred" => Ok(Stage::Pred),
            _ => Err(Error::Contract(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Decoder,
}

/// Intermediate activation address. Layer 0 is the component's input (the
/// BB tokens for the encoder, the learned queries for the decoder); layer
/// `depth` is the component's output stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerAddress {
    pub component: Component,
    pub layer: usize,
}

impl LayerAddress {
    pub fn encoder(layer: usize) -> Self {
        Self { component: Component::Encoder, layer }
    }

    pub fn decoder(layer: usize) -> Self {
        Self { component: Component::Decoder, layer }
    }

    /// The stage whose activations share this layer's shape.
    pub fn stage(self) -> Stage {
        match self.component {
            Component::Encoder => Stage::Enc,
            Component::Decoder => Stage::Dec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub image_size: usize,
    /// Patch side of the ViT projection; ignored by the detector.
    #[serde(default)]
    pub patch: usize,
    /// Output channels of the detector's stride-2 conv layers.
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub enc_depth: usize,
    #[serde(default)]
    pub dec_depth: usize,
    #[serde(default)]
    pub queries: usize,
    pub classes: usize,
    /// ViT ablation: image tokens never attend; only the class token does.
    #[serde(default)]
    pub cross_attention_only: bool,
}

impl ModelConfig {
    pub fn micro_vit() -> Self {
        Self {
            kind: ModelKind::Vit,
            image_size: 32,
            patch: 8,
            conv_channels: vec![],
            d_model: 64,
            heads: 4,
            mlp_hidden: 128,
            enc_depth: 4,
            dec_depth: 0,
            queries: 0,
            classes: 4,
            cross_attention_only: false,
        }
    }

    pub fn micro_detr() -> Self {
        Self {
            kind: ModelKind::Detr,
            image_size: 64,
            patch: 0,
            conv_channels: vec![16, 32, 64],
            d_model: 64,
            heads: 4,
            mlp_hidden: 128,
            enc_depth: 3,
            dec_depth: 3,
            queries: 8,
            classes: 4,
            cross_attention_only: false,
        }
    }

    /// Reduced ViT for smoke runs and tests.
    pub fn tiny_vit() -> Self {
        Self { image_size: 16, patch: 4, d_model: 16, heads: 2, mlp_hidden: 32, enc_depth: 2, ..Self::micro_vit() }
    }

    /// Reduced detector for smoke runs and tests.
    pub fn tiny_detr() -> Self {
        Self {
            image_size: 32,
            conv_channels: vec![8, 16],
            d_model: 16,
            heads: 2,
            mlp_hidden: 32,
            enc_depth: 2,
            dec_depth: 2,
            queries: 6,
            ..Self::micro_detr()
        }
    }

    /// Stage plan `P`.
    pub fn stages(&self) -> &'static [Stage] {
        match self.kind {
            ModelKind::Vit => &[Stage::Bb, Stage::Enc],
            ModelKind::Detr => &[Stage::Bb, Stage::Enc, Stage::Dec, Stage::Pred],
        }
    }

    pub fn has_stage(&self, s: Stage) -> bool {
        self.stages().contains(&s)
    }

    /// Stage preceding `s` in the plan, `None` for the image.
    pub fn previous_stage(&self, s: Stage) -> Option<Stage> {
        let p = self.stages();
        let i = p.iter().position(|&x| x == s)?;
        i.checked_sub(1).map(|j| p[j])
    }

    pub fn depth(&self, c: Component) -> usize {
        match c {
            Component::Encoder => self.enc_depth,
            Component::Decoder => self.dec_depth,
        }
    }

    pub fn total_stride(&self) -> usize {
        match self.kind {
            ModelKind::Vit => self.patch,
            ModelKind::Detr => 1 << self.conv_channels.len(),
        }
    }

    /// Side of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.total_stride()
    }

    /// Image tokens at BB and ENC, excluding any class token.
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Rows of BB/ENC activations: image tokens plus the ViT class token.
    pub fn tokens(&self) -> usize {
        self.image_tokens() + usize::from(self.kind == ModelKind::Vit)
    }

    /// Row index of the first image token.
    pub fn first_image_token(&self) -> usize {
        usize::from(self.kind == ModelKind::Vit)
    }

    /// Width of a PRED row: class logits (incl. no-object) plus four box terms.
    pub fn pred_width(&self) -> usize {
        self.classes + 5
    }

    pub fn stage_shape(&self, s: Stage) -> Option<[usize; 2]> {
        if !self.has_stage(s) {
            return None;
        }
        Some(match s {
            Stage::Bb | Stage::Enc => [self.tokens(), self.d_model],
            Stage::Dec => [self.queries, self.d_model],
            Stage::Pred => [self.queries, self.pred_width()],
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.d_model > 0 && self.heads > 0, "d_model and heads must be positive");
        ensure!(self.d_model.is_multiple_of(self.heads), "d_model {} not divisible by {} heads", self.d_model, self.heads);
        ensure!(self.mlp_hidden > 0 && self.enc_depth > 0, "mlp_hidden and enc_depth must be positive");
        ensure!(self.classes >= 1, "need at least one class");
        match self.kind {
            ModelKind::Vit => {
                ensure!(self.patch > 0 && self.image_size.is_multiple_of(self.patch), "image_size must be a multiple of patch");
                ensure!(self.dec_depth == 0 && self.queries == 0, "the ViT has no decoder");
            }
            ModelKind::Detr => {
                ensure!(!self.conv_channels.is_empty(), "detector needs conv layers");
                ensure!(self.image_size.is_multiple_of(self.total_stride()), "image_size must be a multiple of the conv stride");
                ensure!(self.dec_depth > 0 && self.queries > 0, "detector needs decoder layers and queries");
                ensure!(!self.cross_attention_only, "cross_attention_only applies to the ViT only");
            }
        }
        Ok(())
    }
}
