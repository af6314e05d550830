//! Cross-validated experiments, synthetic studies and result export.

mod config;
mod export;
pub mod folds;
mod pipeline;
mod stratify;
pub mod synth;

pub use config::{CvSection, PipelineConfig};
pub use export::{export_plot_data, AttentionExport, PlotData};
pub use folds::{make_folds, make_folds_stratified, FoldPlan, DEFAULT_FOLDS};
pub use pipeline::{
    binary_design, run_concept_benchmark, run_survival_setting, ConceptBenchmark, ConceptFoldMetrics, CvOptions,
    CvSession, FoldCbm, FoldRisk, FoldSurvival, SettingResult, SurvivalSetting, SurvivalSummary,
};
pub use stratify::{
    fairness_report, stratify_and_test, top_risk_factors, Exclusion, FairnessAttribute, FairnessReport,
    FairnessStratum, RiskFactor, RiskGroups, Stratification, Subgroup, DEFAULT_MIN_GROUP,
};
pub use synth::{synth_generate, SynthConfig, SynthStudy};
