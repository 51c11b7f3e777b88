use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mfil::analysis::ColorFilter;
use mfil::data_io::{Mode, SplitSizes};
use mfil::inversion::Variant;
use mfil::model_zoo::{expected_mode, ModelConfig, ModelKind, Stage};
use mfil::tensor_core::Schedule;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Token-manipulation settings; the selection seed comes from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSettings {
    pub stage: Stage,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub add_positional: bool,
}

fn default_fraction() -> f64 {
    0.2
}

fn default_instances() -> usize {
    2
}

fn default_report_samples() -> usize {
    4
}

fn default_lambdas() -> Vec<f64> {
    vec![0.0, 0.1, 0.9, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub data: SplitSizes,
    /// Stages reconstructed and profiled; defaults to the model's plan.
    #[serde(default)]
    pub stages: Option<Vec<Stage>>,
    /// Inverse variant per stage; stages not listed use `mirror`.
    #[serde(default)]
    pub variants: BTreeMap<Stage, Variant>,
    pub forward: Schedule,
    pub inverse: Schedule,
    /// Independently seeded instances per inverse component.
    #[serde(default = "default_instances")]
    pub inverse_instances: usize,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    pub tradeoff: Schedule,
    /// Defaults to DEC for the detector and ENC for the classifier.
    #[serde(default)]
    pub tradeoff_stage: Option<Stage>,
    #[serde(default = "all_filters")]
    pub filters: Vec<ColorFilter>,
    pub tokens: TokenSettings,
    #[serde(default = "default_report_samples")]
    pub report_samples: usize,
    /// Cap on test images used by the analyses.
    #[serde(default)]
    pub eval_samples: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn all_filters() -> Vec<ColorFilter> {
    ColorFilter::ALL.to_vec()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.experiment.is_empty() {
            return bad("experiment name is empty".into());
        }
        for s in self.stages() {
            if !self.model.has_stage(s) {
                return bad(format!("stage {s} not in the model's plan"));
            }
        }
        for (&s, &v) in &self.variants {
            v.resolve(&self.model, s).map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.inverse_instances == 0 {
            return bad("inverse_instances must be at least 1".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("lambda {l} outside [0, 1]"));
        }
        if !self.model.has_stage(self.tradeoff_stage()) {
            return bad(format!("trade-off stage {} not in the plan", self.tradeoff_stage()));
        }
        if !(0.0..=1.0).contains(&self.tokens.fraction) {
            return bad(format!("token fraction {} outside [0, 1]", self.tokens.fraction));
        }
        if !matches!(self.tokens.stage, Stage::Bb | Stage::Enc) {
            return bad("token manipulation applies to bb or enc".into());
        }
        for (name, s) in [("forward", &self.forward), ("inverse", &self.inverse), ("tradeoff", &self.tradeoff)] {
            if s.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
        }
        if self.data.train == 0 || self.data.test == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        expected_mode(self.model.kind)
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.stages.clone().unwrap_or_else(|| self.model.stages().to_vec())
    }

    pub fn variant(&self, s: Stage) -> Variant {
        self.variants.get(&s).copied().unwrap_or(Variant::Mirror)
    }

    pub fn tradeoff_stage(&self) -> Stage {
        self.tradeoff_stage.unwrap_or(match self.model.kind {
            ModelKind::Vit => Stage::Enc,
            ModelKind::Detr => Stage::Dec,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.experiment))
    }
}
