use crate::error::{Error, Result};

use super::layers::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// Gradient with respect to the inputs of the loss.
    pub grad: Vec<f64>,
}

/// Mean binary cross-entropy over the labelled concepts.
///
/// `None` labels are missing: they contribute neither loss nor gradient.
pub fn bce_with_logits(logits: &[f64], labels: &[Option<bool>]) -> Result<LossGrad> {
    if logits.len() != labels.len() {
        return Err(Error::Shape {
            op: "bce_with_logits",
            detail: format!("{} logits, {} labels", logits.len(), labels.len()),
        });
    }
    let observed = labels.iter().filter(|l| l.is_some()).count();
    if observed == 0 {
        return Err(Error::InvalidInput("every concept label is missing".into()));
    }
    let scale = 1.0 / observed as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for ((g, &z), label) in grad.iter_mut().zip(logits).zip(labels) {
        let Some(y) = *label else { continue };
        let y = if y { 1.0 } else { 0.0 };
        // max(z, 0) - z y + ln(1 + e^{-|z|})
        value += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) * scale;
    }
    Ok(LossGrad {
        value: value * scale,
        grad,
    })
}

/// Negative Breslow log partial likelihood of `risks`, averaged over events.
///
/// Risk sets are `{j : t_j ≥ t_i}`. With no events the loss is zero and so
/// is its gradient; callers skip such batches.
pub fn cox_partial_likelihood_loss(risks: &[f64], times: &[f64], events: &[bool]) -> Result<LossGrad> {
    let n = risks.len();
    if times.len() != n || events.len() != n {
        return Err(Error::Shape {
            op: "cox_partial_likelihood_loss",
            detail: format!("{n} risks, {} times, {} events", times.len(), events.len()),
        });
    }
    let n_events = events.iter().filter(|&&e| e).count();
    if n_events == 0 {
        return Ok(LossGrad {
            value: 0.0,
            grad: vec![0.0; n],
        });
    }
    let shift = risks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp_r: Vec<f64> = risks.iter().map(|r| (r - shift).exp()).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    // Walk from the latest time backwards; within a tie group, add every
    // member to the risk set before scoring the group's events.
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    // Per tie group: cumulative risk-set sum and the sum of 1/S over events
    // with risk sets containing this subject.
    let mut group_sums = Vec::new();
    let mut risk_sum = 0.0;
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            risk_sum += exp_r[order[end]];
            end += 1;
        }
        let d = order[start..end].iter().filter(|&&i| events[i]).count();
        for &i in &order[start..end] {
            if events[i] {
                value -= risks[i] - shift - risk_sum.ln();
                grad[i] -= 1.0;
            }
        }
        group_sums.push((start, end, risk_sum, d));
        start = end;
    }
    // Subject k belongs to the risk set of every group at or before its time:
    // those groups come at or after k's own group in descending order.
    let mut inv_acc = 0.0;
    for &(start, end, s, d) in group_sums.iter().rev() {
        inv_acc += d as f64 / s;
        for &k in &order[start..end] {
            grad[k] += exp_r[k] * inv_acc;
        }
    }
    let scale = 1.0 / n_events as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(LossGrad {
        value: value * scale,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let l = bce_with_logits(&[0.0], &[Some(true)]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l.grad[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn bce_saturated_logits_stay_finite() {
        let l = bce_with_logits(&[50.0, -50.0], &[Some(true), Some(false)]).unwrap();
        assert!(l.value >= 0.0 && l.value < 1e-20);
        let l = bce_with_logits(&[-800.0], &[Some(true)]).unwrap();
        assert!((l.value - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_missing_labels_are_ignored() {
        let full = bce_with_logits(&[0.3, -1.0], &[Some(true), Some(false)]).unwrap();
        let with_gap = bce_with_logits(&[0.3, 9.0, -1.0], &[Some(true), None, Some(false)]).unwrap();
        assert_eq!(full.value, with_gap.value);
        assert_eq!(with_gap.grad[1], 0.0);
        assert!(bce_with_logits(&[1.0], &[None]).is_err());
        assert!(bce_with_logits(&[1.0, 2.0], &[None]).is_err());
    }

    #[test]
    fn bce_gradient_is_residual_over_count() {
        let z = [0.4, -1.3, 2.2, 0.0, -0.7];
        let y = [Some(true), Some(false), Some(false), Some(true), Some(true)];
        let l = bce_with_logits(&z, &y).unwrap();
        for i in 0..5 {
            let t = if y[i] == Some(true) { 1.0 } else { 0.0 };
            assert!((l.grad[i] - (sigmoid(z[i]) - t) / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cox_loss_two_subjects_by_hand() {
        // t = (1, 2), both events: -[r0 - ln(e^r0 + e^r1)] - [r1 - r1], mean over 2.
        let r = [0.5, -0.25];
        let l = cox_partial_likelihood_loss(&r, &[1.0, 2.0], &[true, true]).unwrap();
        let expected = -(0.5 - (0.5f64.exp() + (-0.25f64).exp()).ln()) / 2.0;
        assert!((l.value - expected).abs() < 1e-15);
        let none = cox_partial_likelihood_loss(&r, &[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(none.value, 0.0);
    }
}
