use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::folds::make_folds;
use crate::ingest::SurvivalRecord;
use crate::metrics::{harrell_cindex, MeanStd};
use crate::nn::DenseMatrix;

use super::cox::{fit_coxph_with, predict_risk, CoxOptions};

/// How the cross-validated C-Index curve is turned into one `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Largest mean held-out C; exact ties go to the larger `λ`.
    MaxMean,
    /// Largest `λ` whose mean is within one standard error of the best.
    #[default]
    OneStdError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean held-out C per grid value, `None` if every fold failed to fit.
    pub cv_cindex: Vec<Option<MeanStd>>,
    pub skipped_folds: usize,
}

/// Default ridge grid, spanning weak to strong shrinkage.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![0.01, 0.1, 1.0, 10.0, 100.0]
}

/// Picks `λ` by `folds`-fold cross-validation on held-out Harrell C.
pub fn select_lambda(
    x: &DenseMatrix,
    records: &[SurvivalRecord],
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<f64> {
    select_lambda_with(x, records, lambda_grid, folds, seed, SelectionRule::default()).map(|s| s.lambda)
}

pub fn select_lambda_with(
    x: &DenseMatrix,
    records: &[SurvivalRecord],
    lambda_grid: &[f64],
    folds: usize,
    seed: u64,
    rule: SelectionRule,
) -> Result<LambdaSelection> {
    if lambda_grid.is_empty() {
        return Err(Error::EmptyInput("lambda grid".into()));
    }
    if lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput("lambda grid values must be finite and >= 0".into()));
    }
    if x.rows() != records.len() {
        return Err(Error::Shape {
            op: "select_lambda",
            detail: format!("{} rows for {} records", x.rows(), records.len()),
        });
    }
    if lambda_grid.len() == 1 {
        return Ok(LambdaSelection {
            lambda: lambda_grid[0],
            grid: lambda_grid.to_vec(),
            cv_cindex: vec![None],
            skipped_folds: 0,
        });
    }
    let plan = make_folds(records.len(), folds, seed)?;
    let names: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    let options = CoxOptions::default();
    let mut per_lambda: Vec<Vec<f64>> = vec![Vec::new(); lambda_grid.len()];
    let mut skipped = 0;
    for f in 0..plan.k() {
        let train = plan.train(f);
        let test = plan.test(f);
        let train_rec: Vec<SurvivalRecord> = train.iter().map(|&i| records[i].clone()).collect();
        let test_rec: Vec<SurvivalRecord> = test.iter().map(|&i| records[i].clone()).collect();
        if !train_rec.iter().any(|r| r.event) || !test_rec.iter().any(|r| r.event) {
            warn!("lambda selection: fold {f} has no events on one side; skipped");
            skipped += 1;
            continue;
        }
        let xtr = x.select_rows(&train);
        let xte = x.select_rows(test);
        for (l, &lambda) in lambda_grid.iter().enumerate() {
            let c = fit_coxph_with(&xtr, &train_rec, lambda, &names, &options)
                .and_then(|m| predict_risk(&m, &xte))
                .and_then(|risk| harrell_cindex(&risk, &test_rec));
            match c {
                Ok(c) => per_lambda[l].push(c),
                Err(e) => warn!("lambda selection: fold {f}, lambda {lambda}: {e}"),
            }
        }
    }
    if skipped == plan.k() {
        return Err(Error::NoEvents);
    }
    let cv_cindex: Vec<Option<MeanStd>> = per_lambda.iter().map(|v| MeanStd::from_values(v)).collect();
    let lambda = choose(lambda_grid, &cv_cindex, rule)
        .ok_or_else(|| Error::Undefined("no lambda could be fitted in any fold".into()))?;
    Ok(LambdaSelection {
        lambda,
        grid: lambda_grid.to_vec(),
        cv_cindex,
        skipped_folds: skipped,
    })
}

fn choose(grid: &[f64], scores: &[Option<MeanStd>], rule: SelectionRule) -> Option<f64> {
    let best = scores
        .iter()
        .zip(grid)
        .filter_map(|(s, &l)| s.map(|s| (s, l)))
        .max_by(|(a, la), (b, lb)| a.mean.total_cmp(&b.mean).then(la.total_cmp(lb)))?;
    let threshold = match rule {
        SelectionRule::MaxMean => best.0.mean,
        SelectionRule::OneStdError => best.0.mean - best.0.std / (best.0.n as f64).sqrt(),
    };
    scores
        .iter()
        .zip(grid)
        .filter_map(|(s, &l)| s.filter(|s| s.mean >= threshold).map(|_| l))
        .max_by(f64::total_cmp)
}
