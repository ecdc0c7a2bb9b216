//! Experiment runner behind the `mmpt` binary: configs, sweeps, reports
//! and plots.

mod config;
mod plot;
mod report;
mod run;

pub use config::{DataConfig, ExperimentConfig, RobustnessConfig, ScaleConfig, SweepConfig};
pub use plot::{line_chart, Series};
pub use report::{trend_csv, RunReport, RunRow, TimingReport, TimingRow, TrendRow};
pub use run::{
    aggregate_robustness, length_plot, robustness_plot, robustness_trend, run_pretrain, timing_plot,
    write_robustness, write_run_report, write_timing, Experiment,
};
