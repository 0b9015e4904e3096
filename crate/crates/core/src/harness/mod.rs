//! Experiment orchestration: run configuration, training with early
//! stopping, evaluation metrics and result files.

mod config;
mod experiment;
pub mod metrics;
mod report;

pub use config::{
    apply_synth, synth_spec_from_kv, Ablation, DataSource, LinkSettings, Metric, RunConfig,
};
pub use experiment::{
    ablate, evaluate_model, link_metrics, load_data, node_metrics, run_experiment, run_gradcheck,
    run_model_config, sample_negatives, split_links, LinkSplit,
};
pub use report::{EpochRecord, EvalMetrics, MetricsReport, RunReport, Summary};
