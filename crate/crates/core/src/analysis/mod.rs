//! Experiment protocols run on a trained model and inverse stack.

mod budget;
mod color;
mod profile;
mod report;
mod tokens;

pub use budget::{parameter_budget, BudgetResult};
pub use color::{apply_color_filter, hsv_to_rgb, rgb_to_hsv, ColorFilter, LUMA};
pub use profile::{
    intermediate_mse_profile, invert_intermediate, mean_pairwise_mse, pairwise_reconstruction_divergence,
    stage_mse_profile, StageProfile,
};
pub use report::{draw_box, emit_report, montage, ReconstructionReport, ReportInput, ReportRow, Table};
pub use tokens::{locality_score, manipulate_tokens, selected_count, LocalityScore, TokenManipulation};
