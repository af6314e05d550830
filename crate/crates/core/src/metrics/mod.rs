//! Concept classification metrics and survival evaluation metrics.

mod classification;
mod report;
mod time_to_event;

pub use classification::{average_precision, balanced_accuracy, concept_summary, f1_score, roc_auc, ConceptSummary};
pub use report::{format_cell, ConceptMetricRow, ConceptMetricTable, MeanStd};
pub use time_to_event::{
    brier_score_at, cumulative_dynamic_auc, default_evaluation_grid, dynamic_auc_at, harrell_cindex,
    harrell_cindex_truncated, integrated_brier_score, percentile, uno_cindex_ipcw, BrierCurve, CensoringWeights,
    DynamicAuc, EvaluationGrid, IpcwCIndex, DEFAULT_GRID_POINTS, IPCW_FLOOR,
};
