//! Detection metrics, thresholding and report tables.

mod metrics;
mod report;

pub use metrics::{
    aupr, auroc, brute_force_auroc, detect, roc_curve, threshold_at_tpr, true_positive_rate, Detection, Positive,
};
pub use report::{aggregate_reports, AggregateRow, AggregateTable, EvalReport, EvalRow, Triple, EVAL_HEADER};
