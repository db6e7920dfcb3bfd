//! Experiment runner: spec-driven training sweeps, checkpoint analysis,
//! parameter tables and gradient suites.

pub mod analyze;
pub mod gradsuite;
pub mod params;
pub mod runner;
pub mod spec;

pub use analyze::{analyze, AnalyzeOptions};
pub use params::{format_table, load_configs, param_rows, ParamRow};
pub use runner::{run_experiment, thread_budget, RunSummary};
pub use spec::{Ablation, ExperimentSpec, RunPlan};
