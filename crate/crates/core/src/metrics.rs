//! Binary-classification metrics derived from a confusion matrix.
//!
//! Invariants this module maintains:
//! - Thresholding is `score >= threshold`: a score exactly at the threshold
//!   predicts the positive class.
//! - All rates are computed in `f64` from integer counts, so equal counts
//!   always produce bit-identical rates.
//! - `misclassification_rate` is computed as `1.0 - accuracy` (not as its
//!   own quotient), which makes `accuracy + misclassification_rate == 1.0`
//!   hold exactly for every matrix: the subtraction is exact by Sterbenz'
//!   lemma for `accuracy >= 0.5` and rounds back to `1.0` otherwise.
//! - A zero denominator yields a rate of `0.0` plus an explicit degeneracy
//!   flag rather than a `NaN` that would poison downstream comparisons.

use crate::error::{Error, Result};

/// Outcome counts of binary predictions against ground-truth labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Rates derived from a [`ConfusionMatrix`], with flags marking which of
/// them had a zero denominator (and were therefore reported as `0.0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    /// (TP + TN) / total.
    pub accuracy: f64,
    /// TP / (TP + FP); `0.0` when nothing was predicted positive.
    pub precision: f64,
    /// TP / (TP + FN); `0.0` when no positives exist in the data.
    pub recall: f64,
    /// Harmonic mean of precision and recall; `0.0` when both are zero.
    pub f1: f64,
    /// Exactly `1.0 - accuracy`.
    pub misclassification_rate: f64,
    pub degenerate_precision: bool,
    pub degenerate_recall: bool,
    pub degenerate_f1: bool,
}

/// Counts prediction outcomes for scores against labels at a threshold.
///
/// Labels must be exactly `0.0` or `1.0`; scores must be finite; the
/// threshold must lie strictly inside `(0, 1)`. Both slices must be
/// non-empty and of equal length.
pub fn confusion(scores: &[f32], labels: &[f32], threshold: f32) -> Result<ConfusionMatrix> {
    if scores.is_empty() {
        return Err(Error::Invalid(
            "classification metrics: no scores to evaluate".into(),
        ));
    }
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "classification metrics: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !threshold.is_finite() || threshold <= 0.0 || threshold >= 1.0 {
        return Err(Error::Invalid(format!(
            "classification metrics: threshold {threshold} is outside (0, 1)"
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (i, (&score, &label)) in scores.iter().zip(labels).enumerate() {
        if !score.is_finite() {
            return Err(Error::Invalid(format!(
                "classification metrics: score at index {i} is not finite"
            )));
        }
        if label != 0.0 && label != 1.0 {
            return Err(Error::Invalid(format!(
                "classification metrics: label at index {i} is {label}, expected 0 or 1"
            )));
        }
        let predicted_positive = score >= threshold;
        let actual_positive = label == 1.0;
        match (predicted_positive, actual_positive) {
            (true, true) => m.true_positives += 1,
            (true, false) => m.false_positives += 1,
            (false, false) => m.true_negatives += 1,
            (false, true) => m.false_negatives += 1,
        }
    }
    Ok(m)
}

impl ConfusionMatrix {
    /// Derives all rates from the counts. Errors on an empty matrix.
    pub fn report(&self) -> Result<MetricsReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Invalid(
                "classification metrics: confusion matrix is empty".into(),
            ));
        }
        let tp = self.true_positives as f64;
        let fp = self.false_positives as f64;
        let tn = self.true_negatives as f64;
        let fneg = self.false_negatives as f64;

        let accuracy = (tp + tn) / total as f64;

        let degenerate_precision = self.true_positives + self.false_positives == 0;
        let precision = if degenerate_precision { 0.0 } else { tp / (tp + fp) };

        let degenerate_recall = self.true_positives + self.false_negatives == 0;
        let recall = if degenerate_recall { 0.0 } else { tp / (tp + fneg) };

        let degenerate_f1 = precision + recall == 0.0;
        let f1 = if degenerate_f1 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };

        Ok(MetricsReport {
            accuracy,
            precision,
            recall,
            f1,
            misclassification_rate: 1.0 - accuracy,
            degenerate_precision,
            degenerate_recall,
            degenerate_f1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn matrix(tp: u64, fp: u64, tn: u64, fneg: u64) -> ConfusionMatrix {
        ConfusionMatrix {
            true_positives: tp,
            false_positives: fp,
            true_negatives: tn,
            false_negatives: fneg,
        }
    }

    #[test]
    fn worked_example_matches_hand_computed_rates() {
        let r = matrix(3, 1, 4, 2).report().unwrap();
        assert_eq!(r.accuracy, 0.7);
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.6);
        assert!((r.f1 - 2.0 * 0.75 * 0.6 / (0.75 + 0.6)).abs() < 1e-15);
        assert!((r.f1 - 0.6667).abs() < 5e-5, "f1 {} should round to 0.6667", r.f1);
        assert!((r.misclassification_rate - 0.3).abs() < 1e-15);
        assert!(!r.degenerate_precision && !r.degenerate_recall && !r.degenerate_f1);
    }

    #[test]
    fn scores_at_the_threshold_predict_positive() {
        let m = confusion(&[0.5, 0.5], &[1.0, 0.0], 0.5).unwrap();
        assert_eq!(m, matrix(1, 1, 0, 0));
    }

    #[test]
    fn two_point_example_counts_one_hit_per_class() {
        let m = confusion(&[0.9, 0.2], &[1.0, 0.0], 0.5).unwrap();
        assert_eq!(m, matrix(1, 0, 1, 0));
    }

    #[test]
    fn no_positive_predictions_flags_precision_instead_of_nan() {
        let r = matrix(0, 0, 5, 0).report().unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.precision, 0.0);
        assert!(r.degenerate_precision);
        assert!(r.degenerate_recall, "no actual positives either");
        assert!(r.degenerate_f1);
        assert!(r.f1 == 0.0 && r.recall == 0.0);
    }

    #[test]
    fn perfect_classifier_scores_ones_across_the_board() {
        let r = matrix(5, 0, 5, 0).report().unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.misclassification_rate, 0.0);
    }

    #[test]
    fn empty_mismatched_or_malformed_inputs_are_rejected() {
        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[0.5], &[1.0, 0.0], 0.5).is_err());
        assert!(confusion(&[0.5], &[0.5], 0.5).is_err(), "fractional label");
        assert!(confusion(&[f32::NAN], &[1.0], 0.5).is_err());
        assert!(confusion(&[0.5], &[1.0], 1.5).is_err(), "threshold above 1");
        assert!(confusion(&[0.5], &[1.0], f32::NAN).is_err());
        assert!(matrix(0, 0, 0, 0).report().is_err(), "empty matrix");
    }

    /// Independent oracle: count outcomes with explicit branches and compute
    /// each rate straight from its definition.
    fn oracle(scores: &[f32], labels: &[f32], threshold: f32) -> (u64, u64, u64, u64, f64, f64, f64) {
        let (mut tp, mut fp, mut tn, mut fneg) = (0u64, 0u64, 0u64, 0u64);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= threshold {
                if l == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            } else if l == 1.0 {
                fneg += 1;
            } else {
                tn += 1;
            }
        }
        let acc = (tp + tn) as f64 / (tp + fp + tn + fneg) as f64;
        let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rec = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        (tp, fp, tn, fneg, acc, prec, rec)
    }

    #[test]
    fn a_thousand_random_sets_agree_exactly_with_the_oracle() {
        let mut rng = SeededRng::new(99);
        for trial in 0..1000 {
            let n = 1 + rng.index(64);
            let scores: Vec<f32> = (0..n).map(|_| rng.uniform01()).collect();
            let labels: Vec<f32> = (0..n).map(|_| rng.index(2) as f32).collect();
            let threshold = rng.uniform(0.05, 0.95);
            let m = confusion(&scores, &labels, threshold).unwrap();
            let r = m.report().unwrap();
            let (tp, fp, tn, fneg, acc, prec, rec) = oracle(&scores, &labels, threshold);
            assert_eq!(
                (m.true_positives, m.false_positives, m.true_negatives, m.false_negatives),
                (tp, fp, tn, fneg),
                "counts diverged on trial {trial}"
            );
            assert_eq!(r.accuracy.to_bits(), acc.to_bits(), "accuracy, trial {trial}");
            assert_eq!(r.precision.to_bits(), prec.to_bits(), "precision, trial {trial}");
            assert_eq!(r.recall.to_bits(), rec.to_bits(), "recall, trial {trial}");
        }
    }

    proptest! {
        /// Prediction: accuracy and misclassification rate sum to exactly
        /// 1.0 for every non-empty matrix, with no rounding residue.
        #[test]
        fn accuracy_and_misclassification_sum_to_one_exactly(
            tp in 0u64..10_000,
            fp in 0u64..10_000,
            tn in 0u64..10_000,
            fneg in 0u64..10_000,
        ) {
            prop_assume!(tp + fp + tn + fneg > 0);
            let r = matrix(tp, fp, tn, fneg).report().unwrap();
            prop_assert_eq!((r.accuracy + r.misclassification_rate).to_bits(), 1.0f64.to_bits());
        }

        /// Prediction: recall depends only on the actual-positive column, so
        /// perturbing FP and TN never changes it.
        #[test]
        fn recall_ignores_the_negative_column(
            tp in 0u64..1_000,
            fneg in 0u64..1_000,
            fp1 in 0u64..1_000,
            tn1 in 0u64..1_000,
            fp2 in 0u64..1_000,
            tn2 in 0u64..1_000,
        ) {
            prop_assume!(tp + fneg + fp1 + tn1 > 0 && tp + fneg + fp2 + tn2 > 0);
            let a = matrix(tp, fp1, tn1, fneg).report().unwrap();
            let b = matrix(tp, fp2, tn2, fneg).report().unwrap();
            prop_assert_eq!(a.recall.to_bits(), b.recall.to_bits());
            prop_assert_eq!(a.degenerate_recall, b.degenerate_recall);
        }

        /// Prediction: the harmonic mean never exceeds the arithmetic mean,
        /// so F1 <= (precision + recall) / 2 whenever F1 is well-defined.
        #[test]
        fn f1_never_exceeds_the_arithmetic_mean(
            tp in 0u64..1_000,
            fp in 0u64..1_000,
            tn in 0u64..1_000,
            fneg in 0u64..1_000,
        ) {
            prop_assume!(tp + fp + tn + fneg > 0);
            let r = matrix(tp, fp, tn, fneg).report().unwrap();
            if !r.degenerate_f1 {
                prop_assert!(r.f1 <= (r.precision + r.recall) / 2.0 + 1e-15);
            }
        }
    }
}
