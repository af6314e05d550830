//! Ridge Cox regression, Kaplan-Meier estimation and the log-rank test.

mod cox;
mod km;
pub mod linalg;
mod logrank;
mod select;

pub use cox::{
    fit_coxph, fit_coxph_with, penalized_log_likelihood, predict_risk, predict_survival, predict_survival_matrix,
    CoxModel, CoxOptions,
};
pub use km::{censoring_km, km_fit, KmCurve};
pub use logrank::{logrank_test, risk_sets, LogRankResult, RiskSetRow};
pub use select::{default_lambda_grid, select_lambda, select_lambda_with, LambdaSelection, SelectionRule};
