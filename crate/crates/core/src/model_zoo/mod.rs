//! Micro forward models: a ViT-style classifier and a DETR-style detector
//! with per-stage activation capture, plus their task objectives.

mod config;
mod detection;
mod model;
mod train;

pub use config::{Component, LayerAddress, ModelConfig, ModelKind, Stage};
pub use detection::{
    bipartite_match, detection_loss, match_detections, match_queries, matching_cost, record_detection_loss,
    targets_of, Target, BOX_WEIGHT, NO_OBJECT_WEIGHT,
};
pub use model::{detections_from_pred, detr_forward, vit_forward, Detection, ForwardModel, StageActivations, StageVars};
pub use train::{evaluate_task, expected_mode, task_hits, train_forward_model, EpochRecord, TrainingReport};
pub(crate) use train::hits_from_outputs;
pub(crate) use model::argmax;
