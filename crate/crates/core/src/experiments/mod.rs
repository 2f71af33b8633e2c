//! Experimental procedures built from the objectives: pipelines, distillation,
//! stability, full-ensemble prediction, lower-bound search and pooling ablation.

mod ablation;
mod early_stop;
mod grid;
mod pipeline;
mod sed;
mod stability;
mod stats;

pub use ablation::{pooling_ablation, PoolingAblation};
pub use early_stop::{run_early_stopping, train_supervised_with_early_stopping, EarlyStopOutcome, SupervisedConfig};
pub use grid::{
    default_bounds, grid_search_lower_bound, BoundSummary, GridCell, GridSearchConfig, GridSearchResult, SELECTION_RULE,
};
pub use pipeline::{
    fit_flow_on_tasks, run_pipeline, run_pipeline_with_config, task_embeddings, CheckpointRecord, DataBundle, Manifest,
    PipelineError, PipelineOutput, PipelineSpec, SeedRecord, Stage,
};
pub use sed::{sed_batch_loss_on_the_fly, sed_batch_loss_var, sed_eval_loss, sed_targets, train_sed, SedConfig};
pub use stability::{full_ensemble_predict, stability_study, StabilityStudy};
pub use stats::{stability_csv, summarize, StabilityReport};

/// Mixes a base seed with a stage index and member index (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stage: u64, member: u64) -> u64 {
    let mut z = base
        .wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(member.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
