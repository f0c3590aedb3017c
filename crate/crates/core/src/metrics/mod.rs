//! Classification metrics: confusion-derived rates, ROC and PR curves,
//! DeLong's paired AUC test and k-fold aggregation.

mod classification;
mod curves;
mod delong;
mod report;

pub use classification::{argmax, confusion_metrics, ClassMetrics, ConfusionReport};
pub use curves::{pr_curve, roc_auc, PrCurve, RocCurve};
pub use delong::{delong_test, log10_two_sided_p, DelongResult, LOG10_ALPHA_05};
pub use report::{
    mean_std, stratified_folds, summarize_folds, DelongComparison, KFoldSummary, MeanStd, MetricsReport,
};
