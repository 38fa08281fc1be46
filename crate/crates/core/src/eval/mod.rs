//! Confusion-matrix IoU, model evaluation, cross-validation and reports.

mod confusion;
mod cv;
mod evaluate;
mod report;

pub use confusion::{class_iou, mean_iou, ConfusionMatrix};
pub use cv::{cross_validate, CvOptions, CvResult};
pub use evaluate::{evaluate_model, EvalOptions, Evaluation};
pub use report::{
    display_name, emit_learning_curves, emit_report, format_mean_std, learning_curves_csv, CvSummary, IouReport,
};
