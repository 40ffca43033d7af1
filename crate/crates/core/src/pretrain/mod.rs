//! Progressive pretraining and the strategy/ablation matrix.

mod ablation;
mod config;
mod data;
mod gradcheck;
mod model;
mod stage;

pub use ablation::{
    config_id, run_ablation_matrix, strategy_axis, temporal_axis, write_ablation_csv, AblationRow, AxisValue,
    ABLATION_HEADER,
};
pub use config::{
    DataConfig, ModelConfig, PretrainConfig, StageConfig, StageKind, StrategyKind, TrainConfig, SINGLE_TIME_FRACTION,
};
pub use data::{derive_rng, full_view, prepare_sample, Dataset, Sample};
pub use gradcheck::{check_pretrain_gradient, tiny_config};
pub use model::{encode_sample, init_params, masked_targets, sample_loss, Arch, LossVars, ModelState, SeasonFeatures};
pub use stage::{
    arch_for, eval_loss, run_progressive, run_stage, stage_scene_count, steps_per_epoch, write_metrics_csv,
    PretrainRun, StageReport, StepMetrics, METRICS_HEADER,
};
