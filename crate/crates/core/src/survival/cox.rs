use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SurvivalRecord;
use crate::nn::DenseMatrix;

use super::linalg::{cholesky, cholesky_solve};

#[derive(Debug, Clone, PartialEq)]
pub struct CoxOptions {
    pub max_iterations: usize,
    /// Convergence threshold on `max |penalised score|`.
    pub tolerance: f64,
    pub max_halvings: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-7,
            max_halvings: 30,
        }
    }
}

/// Ridge-penalised Cox model with a Breslow baseline cumulative hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    pub ridge_lambda: f64,
    /// `(t, H₀(t))` at each distinct event time, ascending.
    pub baseline_cumhaz: Vec<(f64, f64)>,
    /// Largest observed training time; prediction grids may not exceed it.
    pub max_time: f64,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Penalised objective at the start and after every accepted step.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

impl CoxModel {
    pub fn num_features(&self) -> usize {
        self.beta.len()
    }

    /// `H₀(t)` as a right-continuous step function with `H₀(0) = 0`.
    pub fn baseline_at(&self, t: f64) -> f64 {
        let idx = self.baseline_cumhaz.partition_point(|&(s, _)| s <= t);
        if idx == 0 {
            0.0
        } else {
            self.baseline_cumhaz[idx - 1].1
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Sufficient statistics of the Breslow partial likelihood at one `β`.
struct Evaluation {
    objective: f64,
    score: Vec<f64>,
    /// Negative Hessian of the penalised objective, row-major `p × p`.
    information: Vec<f64>,
}

/// Subjects sorted by ascending time, grouped into runs of equal time.
struct RiskOrder {
    order: Vec<usize>,
    /// `(start, end)` ranges into `order`.
    groups: Vec<(usize, usize)>,
}

impl RiskOrder {
    fn new(records: &[SurvivalRecord]) -> Self {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by(|&a, &b| records[a].time.total_cmp(&records[b].time).then(a.cmp(&b)));
        let mut groups = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let t = records[order[start]].time;
            let mut end = start + 1;
            while end < order.len() && records[order[end]].time == t {
                end += 1;
            }
            groups.push((start, end));
            start = end;
        }
        Self { order, groups }
    }
}

/// Penalised Breslow log partial likelihood `ℓ(β) − (λ/2)‖β‖²`.
pub fn penalized_log_likelihood(
    x: &DenseMatrix,
    records: &[SurvivalRecord],
    beta: &[f64],
    lambda: f64,
) -> Result<f64> {
    check_inputs(x, records)?;
    if beta.len() != x.cols() {
        return Err(Error::Shape {
            op: "penalized_log_likelihood",
            detail: format!("beta has {} entries for {} columns", beta.len(), x.cols()),
        });
    }
    let order = RiskOrder::new(records);
    let eta = linear_predictor(x, beta);
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut risk_sum = 0.0;
    let mut ll = 0.0;
    for &(start, end) in order.groups.iter().rev() {
        for &i in &order.order[start..end] {
            risk_sum += (eta[i] - shift).exp();
        }
        let log_sum = risk_sum.ln() + shift;
        for &i in &order.order[start..end] {
            if records[i].event {
                ll += eta[i] - log_sum;
            }
        }
    }
    Ok(ll - 0.5 * lambda * beta.iter().map(|b| b * b).sum::<f64>())
}

fn linear_predictor(x: &DenseMatrix, beta: &[f64]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
        .collect()
}

fn check_inputs(x: &DenseMatrix, records: &[SurvivalRecord]) -> Result<()> {
    if x.rows() != records.len() {
        return Err(Error::Shape {
            op: "fit_coxph",
            detail: format!("{} rows for {} survival records", x.rows(), records.len()),
        });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("Cox design matrix".into()));
    }
    Ok(())
}

/// Score and information over the `active` columns of a centred design.
fn evaluate(
    xc: &DenseMatrix,
    records: &[SurvivalRecord],
    order: &RiskOrder,
    beta: &[f64],
    lambda: f64,
) -> Evaluation {
    let p = xc.cols();
    let eta = linear_predictor(xc, beta);
    let shift = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut objective = 0.0;
    let mut score = vec![0.0; p];
    let mut information = vec![0.0; p * p];
    for &(start, end) in order.groups.iter().rev() {
        for &i in &order.order[start..end] {
            let w = (eta[i] - shift).exp();
            let row = xc.row(i);
            s0 += w;
            for a in 0..p {
                let wa = w * row[a];
                s1[a] += wa;
                for b in a..p {
                    s2[a * p + b] += wa * row[b];
                }
            }
        }
        let d = order.order[start..end].iter().filter(|&&i| records[i].event).count();
        if d == 0 {
            continue;
        }
        let df = d as f64;
        let log_sum = s0.ln() + shift;
        for &i in &order.order[start..end] {
            if records[i].event {
                objective += eta[i] - log_sum;
                for (s, v) in score.iter_mut().zip(xc.row(i)) {
                    *s += v;
                }
            }
        }
        for a in 0..p {
            let mean_a = s1[a] / s0;
            score[a] -= df * mean_a;
            for b in a..p {
                let mean_b = s1[b] / s0;
                information[a * p + b] += df * (s2[a * p + b] / s0 - mean_a * mean_b);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            information[a * p + b] = information[b * p + a];
        }
        objective -= 0.5 * lambda * beta[a] * beta[a];
        score[a] -= lambda * beta[a];
        information[a * p + a] += lambda;
    }
    Evaluation {
        objective,
        score,
        information,
    }
}

/// Fits a ridge Cox model with default options and generated feature names.
pub fn fit_coxph(x: &DenseMatrix, records: &[SurvivalRecord], lambda: f64) -> Result<CoxModel> {
    let names = (0..x.cols()).map(|j| format!("x{j}")).collect::<Vec<_>>();
    fit_coxph_with(x, records, lambda, &names, &CoxOptions::default())
}

/// Newton-Raphson with step-halving on the penalised Breslow likelihood.
///
/// Columns are centred before fitting. Columns that are exactly constant
/// carry no information and are held at `β_j = 0`.
pub fn fit_coxph_with(
    x: &DenseMatrix,
    records: &[SurvivalRecord],
    lambda: f64,
    feature_names: &[String],
    options: &CoxOptions,
) -> Result<CoxModel> {
    check_inputs(x, records)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge lambda must be finite and >= 0, got {lambda}")));
    }
    if feature_names.len() != x.cols() {
        return Err(Error::Shape {
            op: "fit_coxph",
            detail: format!("{} feature names for {} columns", feature_names.len(), x.cols()),
        });
    }
    if records.len() < 2 {
        return Err(Error::InvalidInput("Cox regression needs at least two subjects".into()));
    }
    if !records.iter().any(|r| r.event) {
        return Err(Error::NoEvents);
    }
    let (n, p) = x.shape();
    let active: Vec<usize> = (0..p)
        .filter(|&j| (1..n).any(|i| x.get(i, j) != x.get(0, j)))
        .collect();
    let q = active.len();
    let mut xc = DenseMatrix::zeros(n, q);
    for (k, &j) in active.iter().enumerate() {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            xc.set(i, k, x.get(i, j) - mean);
        }
    }
    let order = RiskOrder::new(records);
    let mut b = vec![0.0; q];
    let mut eval = evaluate(&xc, records, &order, &b, lambda);
    let mut iterations = 0;
    let mut objective_trace = vec![eval.objective];
    loop {
        let grad_norm = eval.score.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm < options.tolerance {
            break;
        }
        if iterations == options.max_iterations {
            return Err(Error::NotConverged {
                iterations,
                gradient_norm: grad_norm,
            });
        }
        iterations += 1;
        let mut factor = eval.information.clone();
        if !cholesky(&mut factor, q) {
            if lambda == 0.0 {
                return Err(Error::SingularHessian);
            }
            return Err(Error::NonFinite("Cox information matrix".into()));
        }
        let step = cholesky_solve(&factor, q, &eval.score);
        let slack = 1e-12 * (1.0 + eval.objective.abs());
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let trial: Vec<f64> = b.iter().zip(&step).map(|(bi, si)| bi + scale * si).collect();
            let next = evaluate(&xc, records, &order, &trial, lambda);
            if next.objective.is_finite() && next.objective >= eval.objective - slack {
                accepted = Some((trial, next));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                b = trial;
                eval = next;
                objective_trace.push(eval.objective);
            }
            None => {
                return Err(Error::NotConverged {
                    iterations,
                    gradient_norm: grad_norm,
                })
            }
        }
    }

    let mut beta = vec![0.0; p];
    for (k, &j) in active.iter().enumerate() {
        beta[j] = b[k];
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Cox coefficients".into()));
    }
    let eta = linear_predictor(x, &beta);
    let baseline_cumhaz = breslow(records, &order, &eta);
    let max_time = records.iter().map(|r| r.time).fold(f64::NEG_INFINITY, f64::max);
    Ok(CoxModel {
        feature_names: feature_names.to_vec(),
        beta,
        ridge_lambda: lambda,
        baseline_cumhaz,
        max_time,
        iterations,
        log_likelihood: eval.objective,
        objective_trace,
    })
}

/// Breslow cumulative baseline hazard on the uncentred linear predictor.
fn breslow(records: &[SurvivalRecord], order: &RiskOrder, eta: &[f64]) -> Vec<(f64, f64)> {
    let mut increments = Vec::new();
    let mut risk_sum = 0.0;
    for &(start, end) in order.groups.iter().rev() {
        for &i in &order.order[start..end] {
            risk_sum += eta[i].exp();
        }
        let d = order.order[start..end].iter().filter(|&&i| records[i].event).count();
        if d > 0 {
            increments.push((records[order.order[start]].time, d as f64 / risk_sum));
        }
    }
    increments.reverse();
    let mut total = 0.0;
    increments
        .into_iter()
        .map(|(t, h)| {
            total += h;
            (t, total)
        })
        .collect()
}

/// Linear predictor `Xβ`; larger means higher hazard.
pub fn predict_risk(model: &CoxModel, x: &DenseMatrix) -> Result<Vec<f64>> {
    if x.cols() != model.num_features() {
        return Err(Error::Shape {
            op: "predict_risk",
            detail: format!("{} columns for a model with {} features", x.cols(), model.num_features()),
        });
    }
    Ok(linear_predictor(x, &model.beta))
}

/// `S(t | x) = exp(−H₀(t) · exp(xβ))` on a grid inside `[0, max_time]`.
pub fn predict_survival(model: &CoxModel, x: &[f64], time_grid: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.num_features() {
        return Err(Error::Shape {
            op: "predict_survival",
            detail: format!("{} covariates for a model with {} features", x.len(), model.num_features()),
        });
    }
    if let Some(&t) = time_grid
        .iter()
        .find(|&&t| !(t >= 0.0 && t <= model.max_time))
    {
        return Err(Error::InvalidInput(format!(
            "time {t} lies outside the observed range [0, {}]",
            model.max_time
        )));
    }
    let risk = x.iter().zip(&model.beta).map(|(a, b)| a * b).sum::<f64>().exp();
    Ok(time_grid
        .iter()
        .map(|&t| (-model.baseline_at(t) * risk).exp())
        .collect())
}

/// Survival curves for every row of `x`, row-major `n × grid`.
pub fn predict_survival_matrix(model: &CoxModel, x: &DenseMatrix, time_grid: &[f64]) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(x.rows(), time_grid.len());
    for i in 0..x.rows() {
        let s = predict_survival(model, x.row(i), time_grid)?;
        out.row_mut(i).copy_from_slice(&s);
    }
    Ok(out)
}
