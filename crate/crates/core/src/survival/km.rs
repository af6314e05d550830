use serde::{Deserialize, Serialize};

use crate::ingest::SurvivalRecord;

/// Product-limit survival estimate, one row per distinct event time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// `S(t)`, right-continuous: drops at an event time are included.
    pub fn survival_at(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    /// `S(t⁻)`, excluding any drop at `t` itself.
    pub fn survival_before(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s < t);
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Kaplan-Meier estimate. Subjects censored at an event time stay in that
/// time's risk set.
pub fn km_fit(records: &[SurvivalRecord]) -> KmCurve {
    product_limit(records.iter().map(|r| (r.time, r.event)))
}

/// Kaplan-Meier estimate of the censoring distribution `Ĝ`: the same
/// estimator with the event indicator inverted.
pub fn censoring_km(records: &[SurvivalRecord]) -> KmCurve {
    product_limit(records.iter().map(|r| (r.time, !r.event)))
}

fn product_limit(obs: impl Iterator<Item = (f64, bool)>) -> KmCurve {
    let mut obs: Vec<(f64, bool)> = obs.collect();
    obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = obs.len();
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = obs[i].0;
        let at_risk = n - i;
        let mut d = 0;
        while i < n && obs[i].0 == t {
            d += usize::from(obs[i].1);
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
    }
    curve
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
    fn all_censored_is_flat() {
        let km = km_fit(&recs(&[1.0, 2.0, 3.0], &[false, false, false]));
        assert!(km.is_empty());
        assert_eq!(km.survival_at(10.0), 1.0);
    }

    #[test]
    fn product_limit_by_hand() {
        // n=3: at t=1 risk 3 → 2/3; t=2 risk 2 → 1/3; t=3 censored.
        let km = km_fit(&recs(&[1.0, 2.0, 3.0], &[true, true, false]));
        assert_eq!(km.times, vec![1.0, 2.0]);
        assert!((km.survival_at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((km.survival_at(2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((km.survival_at(3.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(km.survival_before(1.0), 1.0);
    }

    #[test]
    fn distinct_events_step_down_by_quarters() {
        let km = km_fit(&recs(&[4.0, 1.0, 3.0, 2.0], &[true; 4]));
        let expected = [0.75, 0.5, 0.25, 0.0];
        for (s, e) in km.survival.iter().zip(expected) {
            assert!((s - e).abs() < 1e-15);
        }
        assert_eq!(km.at_risk, vec![4, 3, 2, 1]);
    }

    #[test]
    fn censoring_distribution() {
        let none = censoring_km(&recs(&[1.0, 2.0], &[true, true]));
        assert_eq!(none.survival_at(5.0), 1.0);
        let all = censoring_km(&recs(&[1.0, 2.0, 3.0], &[false; 3]));
        let expected = [2.0 / 3.0, 1.0 / 3.0, 0.0];
        for (s, e) in all.survival.iter().zip(expected) {
            assert!((s - e).abs() < 1e-15);
        }
    }

    #[test]
    fn swapping_flags_swaps_estimators() {
        let r = recs(&[1.0, 2.0, 2.0, 5.0, 7.0], &[true, false, true, false, true]);
        let flipped: Vec<SurvivalRecord> = r
            .iter()
            .map(|x| SurvivalRecord::new(x.patient_id.clone(), x.time, !x.event))
            .collect();
        assert_eq!(km_fit(&r), censoring_km(&flipped));
        assert_eq!(censoring_km(&r), km_fit(&flipped));
    }

    #[test]
    fn censored_at_event_time_stays_at_risk() {
        // Two subjects at t=2 (one event, one censored) → risk set 2 at t=2.
        let km = km_fit(&recs(&[1.0, 2.0, 2.0], &[true, true, false]));
        assert_eq!(km.at_risk, vec![3, 2]);
        assert!((km.survival_at(2.0) - (2.0 / 3.0) * 0.5).abs() < 1e-15);
    }
}
