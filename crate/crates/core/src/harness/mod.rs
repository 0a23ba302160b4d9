//! Experiment orchestration: configuration, the end-to-end pipeline,
//! evaluation metrics, openness sweeps, ablations and cross-class
//! validation.

pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod svg;
pub mod sweep;
pub mod xcv;

pub use config::{Architecture, DataSource, ExperimentConfig, KnownnessScore, Method};
pub use metrics::{auroc, macro_f1, openness, ClassScores, F1Summary};
pub use pipeline::{run_experiment, run_in_memory, EvalReport, ExperimentOutcome, ExperimentReport};
pub use sweep::{ablate, sweep_openness, AblationTable, SweepRow};
pub use xcv::{cross_class_validate, XcvOutcome};
