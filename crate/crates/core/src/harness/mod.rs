//! Experiment orchestration: configuration, training and evaluation
//! pipelines, ablations, run directories and the HTTP service.

mod ablation;
mod config;
mod pipeline;
mod runs;
mod server;

pub use ablation::{
    estimate_stats, evaluate_config, run_ablation, varied_keys, AblationCell, AblationReport, AblationSpec,
    CellOverrides, CellRun, CellSummary, Progress, RunOutcome, SeedEstimate,
};
pub use config::{EvalConfig, ExperimentConfig, ScheduleConfig, WorkflowConfig};
pub use pipeline::{
    baseline_config, collect_trace, datasets, evaluate, evaluate_workflow, network_model, resolve_profile,
    trace_timesteps, train_model, CheckpointScore, EvalReport, ProfileSpec, WorkflowReport,
};
pub use runs::{
    run_experiment, write_train_log, RunPlan, RunRecord, RunStatus, CHECKPOINT_FILE, CONFIG_FILE, PROFILE_FILE,
    REPORT_FILE, TRACE_FILE, TRAIN_LOG_FILE,
};
pub use server::{encode_png, router, serve, ApiError, AppState, RegisteredCheckpoint};
