//! Screening metrics: accuracy, sensitivity, specificity and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default decision threshold; a prediction is positive iff `p ≥ threshold`.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc: f64,
    pub sen: f64,
    pub spec: f64,
    pub auc: f64,
    pub threshold: f64,
    pub counts: Confusion,
}

fn check_lengths(preds: &[f64], labels: &[u8]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            context: "predictions vs labels".into(),
            expected: format!("{} labels", preds.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label {l} is not in {{0, 1}}")));
    }
    Ok(())
}

pub fn confusion(preds: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_lengths(preds, labels)?;
    let mut c = Confusion::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Mann–Whitney AUC: `P(score_pos > score_neg) + ½·P(tie)`, from mid-ranks.
pub fn auc(preds: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(
            "needs at least one positive and one negative label",
        ));
    }
    if preds.iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite {
            entry: "predictions".into(),
        });
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && preds[order[j + 1]] == preds[order[i]] {
            j += 1;
        }
        let twice_mid_rank = (i + 1 + j + 1) as u128;
        let pos_in_block = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid_rank * pos_in_block;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // U = R_pos − n_pos(n_pos+1)/2
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * np * nn) as f64)
}

/// Area under the ROC polyline by the trapezoid rule, sweeping the
/// threshold through every distinct score.
pub fn auc_trapezoid(preds: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(preds, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::UndefinedAuc(
            "needs at least one positive and one negative label",
        ));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].total_cmp(&preds[a]));
    let (mut tp, mut fp) = (0.0, 0.0);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = preds[order[i]];
        while i < order.len() && preds[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / n_pos, fp / n_neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// All four metrics at `threshold`. Sensitivity or specificity is NaN when
/// the corresponding class is absent; AUC then fails.
pub fn evaluate(preds: &[f64], labels: &[u8], threshold: f64) -> Result<EvalResult> {
    let counts = confusion(preds, labels, threshold)?;
    let auc = auc(preds, labels)?;
    Ok(EvalResult {
        acc: ratio(counts.tp + counts.tn, counts.total()),
        sen: ratio(counts.tp, counts.tp + counts.fn_),
        spec: ratio(counts.tn, counts.tn + counts.fp),
        auc,
        threshold,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                fp: 0,
                tn: 1,
                fn_: 0
            }
        );
        let c = confusion(&[0.5, 0.5], &[1, 0], 0.5).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 1,
                fp: 1,
                tn: 0,
                fn_: 0
            }
        );
        assert!(confusion(&[0.5], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedAuc(_))
        ));
    }

    #[test]
    fn evaluate_relations() {
        let r = evaluate(&[0.9, 0.6, 0.4, 0.2, 0.7], &[1, 0, 1, 0, 1], 0.5).unwrap();
        assert_eq!(
            r.counts,
            Confusion {
                tp: 2,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(r.acc, 3.0 / 5.0);
        assert_eq!(r.sen, 2.0 / 3.0);
        assert_eq!(r.spec, 1.0 / 2.0);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..10).prop_map(|v| v as f64 / 10.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_auc_equals_trapezoid((preds, labels) in scored()) {
            let pos = labels.iter().filter(|&&y| y == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let a = auc(&preds, &labels).unwrap();
            let b = auc_trapezoid(&preds, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform((preds, labels) in scored()) {
            let pos = labels.iter().filter(|&&y| y == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let warped: Vec<f64> = preds.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
            prop_assert_eq!(auc(&preds, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }

        #[test]
        fn flipping_labels_and_negating_scores_preserves_auc((preds, labels) in scored()) {
            let pos = labels.iter().filter(|&&y| y == 1).count();
            prop_assume!(pos > 0 && pos < labels.len());
            let neg: Vec<f64> = preds.iter().map(|p| -p).collect();
            let flipped: Vec<u8> = labels.iter().map(|y| 1 - y).collect();
            prop_assert_eq!(auc(&preds, &labels).unwrap(), auc(&neg, &flipped).unwrap());
        }
    }
}
