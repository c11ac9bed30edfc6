//! Biweekly rolling-retrain evaluation: schedule, training, scoring,
//! aggregation and report emission.

pub mod evaluate;
pub mod experiment;
pub mod report;
pub mod schedule;
pub mod svg;
pub mod train;

pub use evaluate::{evaluate_point, forecast_mse, OriginScore};
pub use experiment::{
    prepare_point, run_experiment, Dataset, ExperimentOutcome, ExperimentSpec, ForecastRecord, Leaf,
    OriginRecord, PointData, RunFailure, RunSummary,
};
pub use report::{
    aggregate, config_hash, emit_report, relative_change, Aggregates, LeafSet, MetricsReport,
    ModelMean, RelativeChange, ReportMetadata, SeedMean, TargetAggregate,
};
pub use schedule::{build_biweekly_schedule, BacktestSchedule, RetrainPoint, ScheduleWarning};
pub use svg::{emit_forecast_svg, save_forecast_svg, ForecastPlot};
pub use train::{evaluate_objective, run_training, TrainConfig, TrainingTrace};
