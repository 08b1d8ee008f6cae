//! Scenarios and reports.

mod config;
mod metrics;
mod plan;
mod report;
mod run;

pub use config::{
    CityTraffic, ConfigError, DepSafetySetup, FieldIssue, FleetSource, InjectedEdge, ScenarioConfig, REPORT_SCHEMA_VERSION,
};
pub use metrics::{
    check_class_shape, compute_availability, compute_utilization, Availability, CapacityRatios, CitySeries, ClassShapeCheck, HourlyEvictions,
    MetricsReport, RegionUtilization, SeriesPoint, ShapeCheck, UtilizationStats,
};
pub use plan::{plan_overcommit, OvercommitPlan, RegionPlan};
pub use report::{render, write_run_dir, OutputFormat};
pub use run::{
    analyze, build_fleet, compare_baseline, run_failover_certification, run_scenario, strip_overcommit, sweep, AnalysisSummary,
    BaselineComparison, CertificationReport, HarnessError, ScenarioOutcome, ServiceDelta, SweepEntry,
};
