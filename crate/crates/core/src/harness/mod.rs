//! Trace files, experiment configuration, the batch runner and analysis.

pub mod analyze;
pub mod config;
pub mod experiment;
pub mod trace;

pub use analyze::{analyze, AnalysisConfig, AnalysisReport};
pub use config::{AblationGrid, DataSource, ExperimentConfig, GridPoint, MetricKind};
pub use experiment::{run_experiment, ExperimentReport, MentionMatcher, Sample};
pub use trace::{TraceFile, TraceMeta};
