//! Experiment harness: configuration, sweeps over seeds and dataset sizes,
//! error aggregation, persistence and plot data.

pub mod aggregate;
pub mod config;
pub mod plot;
pub mod run;

pub use aggregate::{rmse_aggregate, CellSummary};
pub use config::{EstimatorConfig, EstimatorKind, ExperimentConfig, PanelDimension};
pub use plot::emit_plot_data;
pub use run::{run_experiment, CellRecord, ExperimentResult};
