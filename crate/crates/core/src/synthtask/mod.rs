//! Synthetic heatmap refinement: Gaussian heatmaps, corruption, losses,
//! argmax decoding and a small training loop over FeatER stacks.

mod heatmap;
mod loss;
mod train;

pub use heatmap::{corrupt_heatmaps, default_sigma, gaussian_heatmap_render, HeatmapSpec};
pub use loss::{decode_argmax_pose, heatmap_mse_loss, l1_pose_loss, mean_joint_error, PoseEstimate};
pub use train::{
    ablate_mask_ratio, ablate_mask_ratio_jobs, ablation_csv, eval_batch, evaluate, sample_batch,
    toy_objective_on, train_toy, AblationRow, EvalMetrics, Optimizer, StepRecord, ToyBatch,
    ToyObjective, ToyParams, ToyVars, TrainConfig, TrainRecord, ABLATION_CSV_HEADER,
    DEFAULT_ADAM_LEARNING_RATE, DEFAULT_SGD_LEARNING_RATE,
};
