//! Metrics, baselines, cross-country correlation and result tables.

mod baselines;
mod correlation;
mod metrics;
mod report;

pub use baselines::{ar_design_row, fit_ar_exog, seasonal_naive, ArExogModel};
pub use correlation::{correlation_report, parse_shifts, CorrelationReport};
pub use metrics::{r2, rmse};
pub use report::{
    attention_csv, evaluate, forecasts_csv, render_table, report_csv, write_attention,
    write_forecasts, write_report, AttentionRow, EvalReport, Forecaster, MetricRow, NetForecaster,
    Prediction, SeasonalNaive, TraceRow,
};
