use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            detail: format!("{a} predictions for {b} labels"),
        });
    }
    Ok(())
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths("balanced_accuracy", preds.len(), labels.len())?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::Undefined("balanced accuracy needs both classes".into()));
    }
    let sens = tp as f64 / (tp + fn_) as f64;
    let spec = tn as f64 / (tn + fp) as f64;
    Ok(0.5 * (sens + spec))
}

/// `2TP / (2TP + FP + FN)`, or 0 when nothing is predicted or true.
pub fn f1_score(preds: &[bool], labels: &[bool]) -> Result<f64> {
    check_lengths("f1_score", preds.len(), labels.len())?;
    let mut tp = 0usize;
    let mut wrong = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        if p && l {
            tp += 1;
        } else if p != l {
            wrong += 1;
        }
    }
    let denom = 2 * tp + wrong;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

fn check_scores(op: &'static str, scores: &[f64], labels: &[bool]) -> Result<()> {
    check_lengths(op, scores.len(), labels.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("{op} scores")));
    }
    Ok(())
}

/// Mann-Whitney ROC-AUC with tied scores counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores("roc_auc", scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC-AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the Mann-Whitney U, kept in integers so the result depends only
    // on the ordering of the scores.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision over descending score thresholds, with
/// tied scores entering as a single threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_scores("average_precision", scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Undefined("average precision needs a positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            tp += usize::from(labels[order[j]]);
            seen += 1;
            j += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptSummary {
    /// Mean of the (up to) ten largest defined values.
    pub top10_mean: f64,
    pub mean: f64,
    pub defined: usize,
    pub undefined: usize,
}

/// Top-10 and overall means of a per-concept metric; `None` entries are
/// skipped and counted.
pub fn concept_summary(values: &[Option<f64>]) -> ConceptSummary {
    let mut defined: Vec<f64> = values.iter().flatten().copied().collect();
    let undefined = values.len() - defined.len();
    defined.sort_by(|a, b| b.total_cmp(a));
    let mean_of = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    ConceptSummary {
        top10_mean: mean_of(&defined[..defined.len().min(10)]),
        mean: mean_of(&defined),
        defined: defined.len(),
        undefined,
    }
}
