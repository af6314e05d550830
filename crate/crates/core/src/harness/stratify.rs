use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{DemographicRecord, Gender, Race, SurvivalRecord};
use crate::survival::{km_fit, logrank_test, CoxModel, KmCurve, LogRankResult};

/// Default minimum subgroup size in fairness comparisons.
pub const DEFAULT_MIN_GROUP: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskFactor {
    pub rank: usize,
    pub feature: String,
    pub index: usize,
    pub coefficient: f64,
}

/// Non-zero coefficients ordered by magnitude, at most `k` of them.
pub fn top_risk_factors(model: &CoxModel, k: usize) -> Vec<RiskFactor> {
    let mut idx: Vec<usize> = (0..model.beta.len()).filter(|&j| model.beta[j] != 0.0).collect();
    idx.sort_by(|&a, &b| model.beta[b].abs().total_cmp(&model.beta[a].abs()).then(a.cmp(&b)));
    idx.into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, j)| RiskFactor {
            rank: rank + 1,
            feature: model.feature_names[j].clone(),
            index: j,
            coefficient: model.beta[j],
        })
        .collect()
}

/// Mean-threshold split: low is `risk < mean`, high is `risk ≥ mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskGroups {
    pub threshold: f64,
    /// Indices into the cohort.
    pub low: Vec<usize>,
    pub high: Vec<usize>,
}

impl RiskGroups {
    pub fn split(risks: &[f64]) -> Result<Self> {
        if risks.is_empty() {
            return Err(Error::EmptyInput("risk scores".into()));
        }
        if risks.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("risk scores".into()));
        }
        let threshold = risks.iter().sum::<f64>() / risks.len() as f64;
        let (high, low): (Vec<usize>, Vec<usize>) = (0..risks.len()).partition(|&i| risks[i] >= threshold);
        Ok(Self { threshold, low, high })
    }

    pub fn ids<'r>(&self, records: &'r [SurvivalRecord], high: bool) -> Vec<&'r str> {
        let idx = if high { &self.high } else { &self.low };
        idx.iter().map(|&i| records[i].patient_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratification {
    pub groups: RiskGroups,
    pub km_low: Option<KmCurve>,
    pub km_high: Option<KmCurve>,
    pub test: Option<LogRankResult>,
    /// Why no test was run, when it was not.
    pub note: Option<String>,
}

fn select(records: &[SurvivalRecord], idx: &[usize]) -> Vec<SurvivalRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

pub fn stratify_and_test(risks: &[f64], records: &[SurvivalRecord]) -> Result<Stratification> {
    if risks.len() != records.len() {
        return Err(Error::Shape {
            op: "stratify_and_test",
            detail: format!("{} risks for {} records", risks.len(), records.len()),
        });
    }
    let groups = RiskGroups::split(risks)?;
    let low = select(records, &groups.low);
    let high = select(records, &groups.high);
    let km = |g: &[SurvivalRecord]| (!g.is_empty()).then(|| km_fit(g));
    let (test, note) = if low.is_empty() || high.is_empty() {
        (None, Some("one risk group is empty".to_string()))
    } else {
        match logrank_test(&[&low, &high]) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        }
    };
    Ok(Stratification {
        km_low: km(&low),
        km_high: km(&high),
        groups,
        test,
        note,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessAttribute {
    Gender,
    Race,
}

impl fmt::Display for FairnessAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FairnessAttribute::Gender => "gender",
            FairnessAttribute::Race => "race",
        })
    }
}

impl FromStr for FairnessAttribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gender" => Ok(Self::Gender),
            "race" => Ok(Self::Race),
            _ => Err(Error::InvalidInput(format!("unknown attribute {s:?}; expected gender or race"))),
        }
    }
}

/// `None` for unreported values.
fn attribute_value(d: &DemographicRecord, attribute: FairnessAttribute) -> Option<&'static str> {
    match attribute {
        FairnessAttribute::Gender => (d.gender != Gender::Unknown).then(|| d.gender.as_str()),
        FairnessAttribute::Race => {
            (!matches!(d.race, Race::Unknown | Race::NotAvailable)).then(|| d.race.as_str())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub value: String,
    pub size: usize,
    pub km: KmCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub value: String,
    pub size: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessStratum {
    /// `low` or `high`.
    pub stratum: String,
    pub size: usize,
    pub subgroups: Vec<Subgroup>,
    pub excluded: Vec<Exclusion>,
    pub test: Option<LogRankResult>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub attribute: FairnessAttribute,
    pub min_group: usize,
    pub strata: Vec<FairnessStratum>,
}

/// Within each risk stratum, compares survival across the values of a
/// demographic attribute. Values that are unreported or rarer than
/// `min_group` are excluded and listed.
pub fn fairness_report(
    groups: &RiskGroups,
    records: &[SurvivalRecord],
    demographics: &[DemographicRecord],
    attribute: FairnessAttribute,
    min_group: usize,
) -> Result<FairnessReport> {
    if records.len() != demographics.len() {
        return Err(Error::Shape {
            op: "fairness_report",
            detail: format!("{} records for {} demographic rows", records.len(), demographics.len()),
        });
    }
    let mut strata = Vec::new();
    for (name, idx) in [("low", &groups.low), ("high", &groups.high)] {
        let mut buckets: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut unreported = 0;
        for &i in idx {
            match attribute_value(&demographics[i], attribute) {
                Some(v) => buckets.entry(v.to_string()).or_default().push(i),
                None => unreported += 1,
            }
        }
        let mut subgroups = Vec::new();
        let mut excluded = Vec::new();
        if unreported > 0 {
            excluded.push(Exclusion {
                value: "unreported".into(),
                size: unreported,
                reason: "attribute not reported".into(),
            });
        }
        let mut members = Vec::new();
        for (value, ids) in buckets {
            if ids.len() < min_group {
                excluded.push(Exclusion {
                    reason: format!("only {} patients, minimum is {min_group}", ids.len()),
                    value,
                    size: ids.len(),
                });
                continue;
            }
            let recs = select(records, &ids);
            subgroups.push(Subgroup {
                value,
                size: ids.len(),
                km: km_fit(&recs),
            });
            members.push(recs);
        }
        let (test, note) = if members.len() < 2 {
            (None, Some("fewer than two subgroups meet the minimum size".to_string()))
        } else {
            let refs: Vec<&[SurvivalRecord]> = members.iter().map(Vec::as_slice).collect();
            match logrank_test(&refs) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        strata.push(FairnessStratum {
            stratum: name.to_string(),
            size: idx.len(),
            subgroups,
            excluded,
            test,
            note,
        });
    }
    Ok(FairnessReport {
        attribute,
        min_group,
        strata,
    })
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

    fn model(beta: Vec<f64>) -> CoxModel {
        CoxModel {
            feature_names: (0..beta.len()).map(|j| format!("c{j}")).collect(),
            beta,
            ridge_lambda: 1.0,
            baseline_cumhaz: vec![],
            max_time: 1.0,
            iterations: 0,
            log_likelihood: 0.0,
            objective_trace: Vec::new(),
        }
    }

    #[test]
    fn factors_by_magnitude_with_sign() {
        let f = top_risk_factors(&model(vec![0.5, -2.0, 0.0, 1.0]), 10);
        assert_eq!(f.len(), 3);
        assert_eq!((f[0].feature.as_str(), f[0].coefficient), ("c1", -2.0));
        assert_eq!(f[1].feature, "c3");
        assert!(top_risk_factors(&model(vec![0.0; 4]), 10).is_empty());
        assert_eq!(top_risk_factors(&model(vec![1.0, 2.0, 3.0]), 2).len(), 2);
    }

    #[test]
    fn equal_risks_put_everyone_high() {
        let r = recs(&[1.0, 2.0, 3.0, 4.0], &[true; 4]);
        let s = stratify_and_test(&[0.3; 4], &r).unwrap();
        assert_eq!(s.groups.high, vec![0, 1, 2, 3]);
        assert!(s.groups.low.is_empty());
        assert!(s.test.is_none() && s.note.is_some());
        assert!(s.km_low.is_none());
    }

    #[test]
    fn negated_risks_swap_groups() {
        let r = recs(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true; 5]);
        let risks = [2.0, 1.5, 0.2, -1.0, 0.9];
        let a = stratify_and_test(&risks, &r).unwrap();
        let neg: Vec<f64> = risks.iter().map(|x| -x).collect();
        let b = stratify_and_test(&neg, &r).unwrap();
        assert_eq!(a.groups.low, b.groups.high);
        assert_eq!(a.groups.high, b.groups.low);
        assert_eq!(a.groups.low.len() + a.groups.high.len(), 5);
    }

    #[test]
    fn fairness_excludes_small_and_unreported() {
        let n = 60;
        let r: Vec<SurvivalRecord> = (0..n).map(|i| SurvivalRecord::new(format!("p{i}"), 1.0 + i as f64, i % 2 == 0)).collect();
        let demo: Vec<DemographicRecord> = (0..n)
            .map(|i| {
                let mut d = DemographicRecord::unknown(format!("p{i}"));
                d.race = match i % 20 {
                    0..=10 => Race::White,
                    11..=17 => Race::Black,
                    18 => Race::Asian,
                    _ => Race::Unknown,
                };
                d
            })
            .collect();
        let groups = RiskGroups {
            threshold: 0.0,
            low: (0..n).collect(),
            high: vec![],
        };
        let rep = fairness_report(&groups, &r, &demo, FairnessAttribute::Race, 20).unwrap();
        let low = &rep.strata[0];
        assert_eq!(low.subgroups.len(), 2);
        assert!(low.test.is_some());
        let asian = low.excluded.iter().find(|e| e.value == "asian").unwrap();
        assert_eq!(asian.size, 3);
        let counted: usize = low.subgroups.iter().map(|s| s.size).sum::<usize>() + low.excluded.iter().map(|e| e.size).sum::<usize>();
        assert_eq!(counted, low.size);
        assert!(rep.strata[1].test.is_none());
    }
}
