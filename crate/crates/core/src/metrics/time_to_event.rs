use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SurvivalRecord;
use crate::nn::DenseMatrix;
use crate::survival::{censoring_km, km_fit, KmCurve};

/// Lower bound applied to `Ĝ` before inverting it.
pub const IPCW_FLOOR: f64 = 1e-4;
pub const DEFAULT_GRID_POINTS: usize = 32;

fn check_risks(op: &'static str, risks: &[f64], records: &[SurvivalRecord]) -> Result<()> {
    if risks.len() != records.len() {
        return Err(Error::Shape {
            op,
            detail: format!("{} risks for {} records", risks.len(), records.len()),
        });
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("{op} risks")));
    }
    Ok(())
}

fn concordance(ri: f64, rj: f64) -> f64 {
    if ri > rj {
        1.0
    } else if ri == rj {
        0.5
    } else {
        0.0
    }
}

/// Harrell's C: over pairs where the earlier time is an observed event,
/// the share in which the earlier subject has the higher risk. Pairs with
/// equal times are not comparable.
pub fn harrell_cindex(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    harrell_cindex_truncated(risks, records, f64::INFINITY)
}

/// Harrell's C restricted to comparable pairs whose earlier event time is
/// at most `tau`.
pub fn harrell_cindex_truncated(risks: &[f64], records: &[SurvivalRecord], tau: f64) -> Result<f64> {
    check_risks("harrell_cindex", risks, records)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, a) in records.iter().enumerate() {
        if !a.event || a.time > tau {
            continue;
        }
        for (j, b) in records.iter().enumerate() {
            if b.time > a.time {
                num += concordance(risks[i], risks[j]);
                den += 1.0;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Undefined("no comparable pairs".into()));
    }
    Ok(num / den)
}

/// Censoring survival `Ĝ` fitted on training data, with the floor applied
/// on lookup.
#[derive(Debug, Clone)]
pub struct CensoringWeights {
    curve: KmCurve,
}

impl CensoringWeights {
    pub fn fit(train: &[SurvivalRecord]) -> Self {
        Self {
            curve: censoring_km(train),
        }
    }

    /// `max(Ĝ(t), floor)` and whether the floor was hit.
    pub fn at(&self, t: f64) -> (f64, bool) {
        let g = self.curve.survival_at(t);
        if g < IPCW_FLOOR {
            (IPCW_FLOOR, true)
        } else {
            (g, false)
        }
    }

    pub fn curve(&self) -> &KmCurve {
        &self.curve
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpcwCIndex {
    pub value: f64,
    pub tau: f64,
    /// Events whose weight was computed from the floored `Ĝ`.
    pub clipped: usize,
}

/// Uno's IPCW concordance truncated at `tau`.
pub fn uno_cindex_ipcw(
    risks: &[f64],
    train: &[SurvivalRecord],
    test: &[SurvivalRecord],
    tau: f64,
) -> Result<IpcwCIndex> {
    check_risks("uno_cindex_ipcw", risks, test)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    let g = CensoringWeights::fit(train);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut clipped = 0;
    for (i, a) in test.iter().enumerate() {
        if !a.event || a.time > tau {
            continue;
        }
        let (gi, hit) = g.at(a.time);
        clipped += usize::from(hit);
        let w = 1.0 / (gi * gi);
        for (j, b) in test.iter().enumerate() {
            if b.time > a.time {
                num += w * concordance(risks[i], risks[j]);
                den += w;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Undefined("no comparable pairs below tau".into()));
    }
    Ok(IpcwCIndex {
        value: num / den,
        tau,
        clipped,
    })
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("time grid".into()));
    }
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("time grid must be finite, non-negative and strictly increasing".into()));
    }
    Ok(())
}

/// IPCW cumulative/dynamic AUC at a single time: cases are events at or
/// before `t` weighted by `1/Ĝ(t_i)`, controls are subjects still at risk
/// after `t`. `None` when either set is empty.
pub fn dynamic_auc_at(risks: &[f64], test: &[SurvivalRecord], g: &CensoringWeights, t: f64) -> (Option<f64>, usize) {
    let controls: Vec<usize> = (0..test.len()).filter(|&j| test[j].time > t).collect();
    let mut num = 0.0;
    let mut den = 0.0;
    let mut clipped = 0;
    for (i, a) in test.iter().enumerate() {
        if !a.event || a.time > t {
            continue;
        }
        let (gi, hit) = g.at(a.time);
        clipped += usize::from(hit);
        let w = 1.0 / gi;
        for &j in &controls {
            num += w * concordance(risks[i], risks[j]);
        }
        den += w * controls.len() as f64;
    }
    if den == 0.0 {
        (None, clipped)
    } else {
        (Some(num / den), clipped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicAuc {
    pub times: Vec<f64>,
    /// `None` where there were no cases or no controls.
    pub auc: Vec<Option<f64>>,
    /// Summary weighted by the test-set Kaplan-Meier event mass at each grid
    /// time, over defined points only.
    pub integrated: f64,
    pub undefined: usize,
    pub clipped: usize,
}

impl DynamicAuc {
    pub fn defined_points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().zip(&self.auc).filter_map(|(&t, a)| a.map(|a| (t, a)))
    }
}

pub fn cumulative_dynamic_auc(
    risks: &[f64],
    train: &[SurvivalRecord],
    test: &[SurvivalRecord],
    time_grid: &[f64],
) -> Result<DynamicAuc> {
    check_risks("cumulative_dynamic_auc", risks, test)?;
    check_grid(time_grid)?;
    let g = CensoringWeights::fit(train);
    let mut auc = Vec::with_capacity(time_grid.len());
    let mut clipped = 0;
    for &t in time_grid {
        let (a, c) = dynamic_auc_at(risks, test, &g, t);
        auc.push(a);
        clipped += c;
    }
    let km = km_fit(test);
    let mut prev = 1.0;
    let (mut num, mut den) = (0.0, 0.0);
    for (&t, a) in time_grid.iter().zip(&auc) {
        let s = km.survival_at(t);
        let mass = prev - s;
        prev = s;
        if let Some(a) = a {
            num += a * mass;
            den += mass;
        }
    }
    let defined: Vec<f64> = auc.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("dynamic AUC has no defined time point".into()));
    }
    let integrated = if den > 0.0 {
        num / den
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok(DynamicAuc {
        times: time_grid.to_vec(),
        undefined: auc.len() - defined.len(),
        auc,
        integrated,
        clipped,
    })
}

/// IPCW Brier score at time index `k` of `survival` (`n × grid`).
pub fn brier_score_at(
    survival: &DenseMatrix,
    test: &[SurvivalRecord],
    g: &CensoringWeights,
    k: usize,
    t: f64,
) -> (f64, usize) {
    let (gt, hit_t) = g.at(t);
    let mut clipped = usize::from(hit_t);
    let mut total = 0.0;
    for (i, r) in test.iter().enumerate() {
        let s = survival.get(i, k);
        if r.time <= t && r.event {
            let (gi, hit) = g.at(r.time);
            clipped += usize::from(hit);
            total += s * s / gi;
        } else if r.time > t {
            total += (1.0 - s) * (1.0 - s) / gt;
        }
    }
    (total / test.len() as f64, clipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrierCurve {
    pub times: Vec<f64>,
    pub scores: Vec<f64>,
    /// Trapezoidal integral over the grid divided by its span.
    pub integrated: f64,
    pub clipped: usize,
}

pub fn integrated_brier_score(
    survival: &DenseMatrix,
    train: &[SurvivalRecord],
    test: &[SurvivalRecord],
    time_grid: &[f64],
) -> Result<BrierCurve> {
    check_grid(time_grid)?;
    if time_grid.len() < 2 {
        return Err(Error::InvalidInput("integrated Brier score needs at least two grid times".into()));
    }
    if survival.shape() != (test.len(), time_grid.len()) {
        return Err(Error::Shape {
            op: "integrated_brier_score",
            detail: format!(
                "survival matrix is {:?}, expected ({}, {})",
                survival.shape(),
                test.len(),
                time_grid.len()
            ),
        });
    }
    if test.is_empty() {
        return Err(Error::EmptyInput("test records".into()));
    }
    let max_time = train.iter().chain(test).map(|r| r.time).fold(0.0, f64::max);
    if time_grid[time_grid.len() - 1] > max_time {
        return Err(Error::InvalidInput(format!(
            "grid extends past the last observed time {max_time}"
        )));
    }
    let g = CensoringWeights::fit(train);
    let mut scores = Vec::with_capacity(time_grid.len());
    let mut clipped = 0;
    for (k, &t) in time_grid.iter().enumerate() {
        let (bs, c) = brier_score_at(survival, test, &g, k, t);
        scores.push(bs);
        clipped += c;
    }
    let mut area = 0.0;
    for k in 1..time_grid.len() {
        area += 0.5 * (scores[k] + scores[k - 1]) * (time_grid[k] - time_grid[k - 1]);
    }
    let span = time_grid[time_grid.len() - 1] - time_grid[0];
    Ok(BrierCurve {
        times: time_grid.to_vec(),
        scores,
        integrated: area / span,
        clipped,
    })
}

/// Linear-interpolation percentile of unsorted data, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationGrid {
    pub tau: f64,
    pub times: Vec<f64>,
}

/// `τ` at the 90th percentile of observed test times and an evenly spaced
/// grid from the 10th to the 90th percentile.
pub fn default_evaluation_grid(test: &[SurvivalRecord], points: usize) -> Result<EvaluationGrid> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test records".into()));
    }
    if points < 2 {
        return Err(Error::InvalidInput("grid needs at least two points".into()));
    }
    let times: Vec<f64> = test.iter().map(|r| r.time).collect();
    let lo = percentile(&times, 0.1);
    let hi = percentile(&times, 0.9);
    if !(hi > lo) {
        return Err(Error::InvalidInput("test times have no spread between the 10th and 90th percentiles".into()));
    }
    let step = (hi - lo) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| lo + step * i as f64).collect();
    grid[points - 1] = hi;
    Ok(EvaluationGrid { tau: hi, times: grid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
        times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &e))| SurvivalRecord::new(format!("p{i}"), t, e))
            .collect()
    }

    #[test]
    fn harrell_basic() {
        let r = recs(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
        assert_eq!(harrell_cindex(&[4.0, 3.0, 2.0, 1.0], &r).unwrap(), 1.0);
        assert_eq!(harrell_cindex(&[1.0; 4], &r).unwrap(), 0.5);
        let none = recs(&[1.0, 2.0], &[false, false]);
        assert!(harrell_cindex(&[1.0, 2.0], &none).is_err());
    }

    #[test]
    fn tied_times_are_not_comparable() {
        let r = recs(&[2.0, 2.0], &[true, true]);
        assert!(harrell_cindex(&[1.0, 0.0], &r).is_err());
    }

    #[test]
    fn uno_without_censoring_equals_truncated_harrell() {
        let r = recs(&[1.0, 3.0, 2.0, 6.0, 5.0, 4.0], &[true; 6]);
        let risks = [0.3, 0.1, 0.9, -0.4, 0.2, 0.2];
        let u = uno_cindex_ipcw(&risks, &r, &r, 4.5).unwrap();
        assert_eq!(u.value, harrell_cindex_truncated(&risks, &r, 4.5).unwrap());
        assert_eq!(u.clipped, 0);
    }

    #[test]
    fn constant_predictions_give_half() {
        let r = recs(&[1.0, 3.0, 2.0, 6.0, 5.0], &[true, false, true, true, false]);
        let risks = [0.0; 5];
        assert_eq!(uno_cindex_ipcw(&risks, &r, &r, 6.0).unwrap().value, 0.5);
        let auc = cumulative_dynamic_auc(&risks, &r, &r, &[1.5, 2.5, 4.0]).unwrap();
        assert!(auc.auc.iter().flatten().all(|&a| a == 0.5));
    }

    #[test]
    fn dynamic_auc_marks_undefined_points() {
        let r = recs(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
        let risks = [4.0, 3.0, 2.0, 1.0];
        let auc = cumulative_dynamic_auc(&risks, &r, &r, &[0.5, 1.5, 2.5, 4.0]).unwrap();
        assert_eq!(auc.auc, vec![None, Some(1.0), Some(1.0), None]);
        assert_eq!(auc.undefined, 2);
        assert_eq!(auc.integrated, 1.0);
    }

    #[test]
    fn brier_reference_predictors() {
        let r = recs(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
        let grid = [1.5, 2.5, 3.5];
        let half = DenseMatrix::from_vec(4, 3, vec![0.5; 12]).unwrap();
        let b = integrated_brier_score(&half, &r, &r, &grid).unwrap();
        assert!(b.scores.iter().all(|&s| (s - 0.25).abs() < 1e-15));
        assert!((b.integrated - 0.25).abs() < 1e-15);
        let mut oracle = DenseMatrix::zeros(4, 3);
        for (i, rec) in r.iter().enumerate() {
            for (k, &t) in grid.iter().enumerate() {
                oracle.set(i, k, if t < rec.time { 1.0 } else { 0.0 });
            }
        }
        let b = integrated_brier_score(&oracle, &r, &r, &grid).unwrap();
        assert_eq!(b.integrated, 0.0);
        assert!(integrated_brier_score(&half, &r, &r, &[1.0, 9.0, 10.0]).is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert!((percentile(&v, 0.1) - 1.4).abs() < 1e-15);
        assert!((percentile(&v, 0.9) - 4.6).abs() < 1e-15);
        let g = default_evaluation_grid(&recs(&v, &[true; 5]), 32).unwrap();
        assert_eq!(g.times.len(), 32);
        assert_eq!(g.tau, g.times[31]);
        assert!((g.times[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn floor_is_counted() {
        // Training censoring curve drops to 0 at t=2.
        let train = recs(&[1.0, 2.0], &[true, false]);
        let test = recs(&[1.0, 3.0, 4.0], &[true, true, false]);
        let u = uno_cindex_ipcw(&[2.0, 1.0, 0.0], &train, &test, 3.5).unwrap();
        assert_eq!(u.clipped, 1);
        assert_eq!(u.value, 1.0);
    }
}
