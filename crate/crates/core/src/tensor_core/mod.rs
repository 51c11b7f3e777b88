//! Dense tensors, reverse-mode differentiation, layers, optimizer and
//! gradient verification.

mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;
pub mod train;

pub use gradcheck::{finite_difference_check, Probe};
pub use graph::{Gradients, Graph, Var, NO_INDEX};
pub use nn::{multi_head_attention, AttentionOutput, AttentionVars};
pub use optim::{optimizer_step, AdamConfig, OptimizerState};
pub use params::{Binding, GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
pub use train::{batch_gradients, epoch_batches, Schedule};
