//! SFT warm-up, preference optimization and the log-prob analyses.
//!
//! A run is fully determined by the dataset, [`TrainConfig::seed`] and the
//! config: shuffling, probe sampling and batching all derive from the seed,
//! and every reduction runs in a fixed order.

mod adamw;
mod config;
mod eval;
mod run;

pub use adamw::{adamw_step, AdamState};
pub use config::TrainConfig;
pub use eval::{
    eval_preference_accuracy, mean_chosen_logprob, position_profile, save_metrics_csv,
    write_metrics_csv, MetricsRecord, PositionProfile, ProfileEntry,
};
pub use run::{
    probe_indices, run_ablation, run_preference_opt, run_preference_opt_with, run_sft,
    run_sft_with, write_ablation_csv, AblationCell, AblationGrid, PreferenceRun,
    LAST_GOOD_CHECKPOINT,
};

#[cfg(test)]
mod tests;
