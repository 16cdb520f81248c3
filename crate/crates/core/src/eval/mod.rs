//! Metrics, parameter counts, latency profiling, report files and
//! cross-validation.

pub mod crossval;
pub mod latency;
pub mod metrics;
pub mod report;

pub use crossval::{run_cross_validation, run_cross_validation_on, CrossValReport, FoldResult};
pub use latency::{compare_components, profile_latency, time_runs, LatencyStats, TimingComparison};
pub use metrics::{evaluate, predict, MetricsReport};
pub use report::{count_params, emit_latency, emit_report, emit_timing, read_report, ParamSummary, ReportDocument, ReportFormat};
