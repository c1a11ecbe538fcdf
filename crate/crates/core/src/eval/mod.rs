//! Classification and alignment metrics, subject-grouped cross-validation,
//! and the window/kernel sweep.

mod cv;
mod metrics;

pub use cv::{
    dataset_windows, evaluate, fit, fold_data, run_cv, run_fold, sweep, sweep_cell_config, windows_for, write_confusion_csv, write_sweep_csv, Fit, FoldData, FoldModel, FoldPlan,
    FoldResult, MeanStd, Metrics, MetricsReport, SweepCell,
};
pub use metrics::{
    alignment_report, confusion, cosine, derangement, macro_f1, rank_of, top1, topk_accuracy, unsupported_classes, AlignmentReport, PairMode,
    SHUFFLE_SEED,
};
