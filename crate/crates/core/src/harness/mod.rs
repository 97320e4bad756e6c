//! Experiment driver: training runs, efficiency metrics, ablation grids and
//! report files.

pub mod ablation;
pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod suite;

pub use ablation::{run_ablation_grid, run_variants, GridReport, SpeedupRow, SummaryRow};
pub use config::{Clock, RunConfig, TaskKind};
pub use metrics::{compare, steps_to_reach, wallclock_from_overhead, wallclock_speedup, MetricLog, MetricRow, Speedup};
pub use report::emit_reports;
pub use run::{train_run, RunOutcome, RunStatus, Variant};
