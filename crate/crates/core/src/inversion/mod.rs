//! Inverse components `N⁻¹`, the per-stage training objective, composition
//! into image reconstructions, the full-path baseline and trade-off
//! fine-tuning.

mod component;
mod stack;
mod tradeoff;
mod train;

pub use component::{one_hot_pred, InverseComponent, InverseSpec, Variant};
pub use stack::{reconstruct, reconstruct_from, ActivationCache, Hop, InverseStack, Inverter, PairSet, Reconstruction};
pub use tradeoff::{
    evaluate_tradeoff, finetune_tradeoff, reconstruction_gradient_into_theta, TradeoffConfig, TradeoffEpoch,
    TradeoffResult,
};
pub use train::{
    fit_component, pair_mse, train_full_path_inverse, train_inverse_component, InverseEpoch, InverseTrainingReport,
};
