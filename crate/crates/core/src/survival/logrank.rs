use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::ingest::SurvivalRecord;

use super::linalg::psd_quadratic_form;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub chi_square: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
    pub observed: Vec<f64>,
    pub expected: Vec<f64>,
}

/// At-risk and event counts per group at one distinct event time.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSetRow {
    pub time: f64,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

/// Per-group risk-set bookkeeping at every time with at least one event.
pub fn risk_sets(groups: &[&[SurvivalRecord]]) -> Vec<RiskSetRow> {
    let mut event_times: Vec<f64> = groups
        .iter()
        .flat_map(|g| g.iter().filter(|r| r.event).map(|r| r.time))
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let mut sorted: Vec<Vec<&SurvivalRecord>> = groups
        .iter()
        .map(|g| {
            let mut v: Vec<&SurvivalRecord> = g.iter().collect();
            v.sort_by(|a, b| a.time.total_cmp(&b.time));
            v
        })
        .collect();
    let mut cursor = vec![0usize; groups.len()];
    let mut rows = Vec::with_capacity(event_times.len());
    for t in event_times {
        let mut at_risk = Vec::with_capacity(groups.len());
        let mut events = Vec::with_capacity(groups.len());
        for (g, recs) in sorted.iter_mut().enumerate() {
            while cursor[g] < recs.len() && recs[cursor[g]].time < t {
                cursor[g] += 1;
            }
            at_risk.push(recs.len() - cursor[g]);
            events.push(
                recs[cursor[g]..]
                    .iter()
                    .take_while(|r| r.time == t)
                    .filter(|r| r.event)
                    .count(),
            );
        }
        rows.push(RiskSetRow { time: t, at_risk, events });
    }
    rows
}

/// Log-rank test of equal hazards across `groups`.
///
/// Times where the hypergeometric variance vanishes contribute their
/// observed-minus-expected terms but no variance; the statistic uses a
/// generalised inverse of the accumulated covariance.
pub fn logrank_test(groups: &[&[SurvivalRecord]]) -> Result<LogRankResult> {
    if groups.len() < 2 {
        return Err(Error::InvalidInput("log-rank test needs at least two groups".into()));
    }
    if let Some(i) = groups.iter().position(|g| g.is_empty()) {
        return Err(Error::InvalidInput(format!("group {i} is empty")));
    }
    let g = groups.len();
    let rows = risk_sets(groups);
    if rows.is_empty() {
        return Err(Error::NoEvents);
    }
    let mut observed = vec![0.0; g];
    let mut expected = vec![0.0; g];
    let mut cov = vec![0.0; (g - 1) * (g - 1)];
    for row in &rows {
        let n: usize = row.at_risk.iter().sum();
        let d: usize = row.events.iter().sum();
        let (nf, df) = (n as f64, d as f64);
        for k in 0..g {
            observed[k] += row.events[k] as f64;
            expected[k] += df * row.at_risk[k] as f64 / nf;
        }
        if n < 2 {
            continue;
        }
        let factor = df * (nf - df) / (nf - 1.0);
        for a in 0..g - 1 {
            let pa = row.at_risk[a] as f64 / nf;
            for b in 0..g - 1 {
                let pb = row.at_risk[b] as f64 / nf;
                let delta = if a == b { 1.0 } else { 0.0 };
                cov[a * (g - 1) + b] += factor * pa * (delta - pb);
            }
        }
    }
    let diff: Vec<f64> = (0..g - 1).map(|k| observed[k] - expected[k]).collect();
    let chi_square = psd_quadratic_form(&cov, g - 1, &diff).max(0.0);
    let dist = ChiSquared::new((g - 1) as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(LogRankResult {
        chi_square,
        p_value: dist.sf(chi_square),
        degrees_of_freedom: g - 1,
        observed,
        expected,
    })
}
