//! MDD-UNet laboratory: a 2D U-Net segmentation model adapted to an
//! unlabeled target domain with the Margin Disparity Discrepancy minimax
//! objective, plus synthetic domain-shift data, evaluation and tooling.

pub mod adaptation;
pub mod data;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;

pub use adaptation::{
    adapt_step, early_stop_check, pretrain, run_adaptation, AdaptConfig, AdaptError, AdaptOutcome,
    Grl, PretrainConfig, StepReport, StopReason,
};
pub use evaluation::{
    aggregate_runs, dataset_dice, dice, export_curves, run_ablation, volume_dice, AblationSpec,
    EvalError, MetricsRecord,
};
pub use losses::{LossReport, MarginConfig};
pub use model::{build_model, predict, BlockId, ModelSplit, UNetConfig};
pub use nn::Part;

/// Per-pixel, per-class scores of a batch, shape (B, K, H, W).
pub type ScoreMapBatch = ndarray::Array4<f32>;
/// Per-pixel class labels of a batch, shape (B, H, W).
pub type LabelMaskBatch = ndarray::Array3<u8>;
/// Image batch, shape (B, C, H, W).
pub type ImageBatch = ndarray::Array4<f32>;
