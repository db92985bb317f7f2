//! Training, evaluation, checkpoints, the four-variant ablation and
//! attention export.

mod ablation;
mod check;
mod config;
mod export;
mod model;
mod train;

pub use ablation::{run_ablation, run_variants, AblationReport, AblationRow, CSV_HEADER};
pub use check::{grad_check_model, grad_check_setup, GRAD_EPSILON};
pub use config::{AdamConfig, RunConfig, Variant};
pub use export::{
    corrupt_forward_stage, export_attention, matrix_csv, read_matrix_csv, ExportSummary,
    FailurePropagation, FAILURE_FILE, GAT_FILE, GAT_SUMMARY_FILE, TCA_FILE, TCA_SUMMARY_FILE,
};
pub use model::{
    batch_loss_on, check_variant, forward, forward_on, init_model, sample_gradients,
    sample_loss_on, AttentionRecord, Boundaries, ForwardVars, LossVars, Prediction,
};
pub use train::{
    evaluate, evaluate_params, is_head_param, predict, train, Adam, Checkpoint, EpochHook,
    EpochRecord, CHECKPOINT_VERSION,
};
