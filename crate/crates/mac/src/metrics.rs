//! Evaluation metrics: rank-based ROC AUC, thresholded precision/recall/F1
//! under both positive-class conventions, and the one-sided paired
//! Wilcoxon signed-rank test used to compare model variants.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Scores at or above this are classified as the positive (true-news) class.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Precision/recall/F1 for one positive-class convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Confusion counts with true news as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Threshold-based metrics (everything except AUC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub f1_macro: f64,
    pub f1_micro: f64,
    /// True news as positive.
    pub true_class: ClassMetrics,
    /// Fake news as positive.
    pub fake_class: ClassMetrics,
    pub confusion: ConfusionCounts,
}

/// Full evaluation of a score list against binary labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub true_class: ClassMetrics,
    pub fake_class: ClassMetrics,
    pub confusion: ConfusionCounts,
}

/// Average ranks (1-based) of `values`, doubled so ties stay exact
/// integers: a tie group spanning sorted positions lo..=hi gets rank
/// (lo+hi+2)/2, returned here as lo+hi+2.
fn doubled_average_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks2 = vec![0u64; values.len()];
    let mut lo = 0;
    while lo < order.len() {
        let mut hi = lo;
        while hi + 1 < order.len() && values[order[hi + 1]] == values[order[lo]] {
            hi += 1;
        }
        let rank2 = (lo + hi + 2) as u64;
        for &idx in &order[lo..=hi] {
            ranks2[idx] = rank2;
        }
        lo = hi + 1;
    }
    ranks2
}

/// Probability that a random positive outranks a random negative
/// (Mann-Whitney form); ties count one half. Positive class = label 1.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(
            "AUC needs both classes present".into(),
        ));
    }
    let ranks2 = doubled_average_ranks(scores);
    let rank_sum2: u64 = ranks2
        .iter()
        .zip(labels.iter())
        .filter(|&(_, &y)| y == 1)
        .map(|(&r2, _)| r2)
        .sum();
    // U = R_pos - pos*(pos+1)/2, all in doubled units to stay exact.
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

fn prf(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
    }
}

/// Threshold the scores and derive both per-class reports from one
/// confusion matrix. Zero denominators yield 0 by convention.
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> ThresholdMetrics {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let mut c = ConfusionCounts {
        true_positives: 0,
        false_positives: 0,
        true_negatives: 0,
        false_negatives: 0,
    };
    for (&s, &y) in scores.iter().zip(labels.iter()) {
        let pred = s >= threshold;
        match (pred, y) {
            (true, 1) => c.true_positives += 1,
            (true, _) => c.false_positives += 1,
            (false, 1) => c.false_negatives += 1,
            (false, _) => c.true_negatives += 1,
        }
    }
    let true_class = prf(c.true_positives, c.false_positives, c.false_negatives);
    // Fake as positive: the same matrix with roles swapped.
    let fake_class = prf(c.true_negatives, c.false_negatives, c.false_positives);
    let total = c.total();
    let f1_micro = if total == 0 {
        0.0
    } else {
        (c.true_positives + c.true_negatives) as f64 / total as f64
    };
    ThresholdMetrics {
        f1_macro: (true_class.f1 + fake_class.f1) / 2.0,
        f1_micro,
        true_class,
        fake_class,
        confusion: c,
    }
}

/// AUC plus threshold metrics in one report.
pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    let auc = roc_auc(scores, labels)?;
    let t = classification_metrics(scores, labels, threshold);
    Ok(EvalReport {
        auc,
        f1_macro: t.f1_macro,
        f1_micro: t.f1_micro,
        true_class: t.true_class,
        fake_class: t.fake_class,
        confusion: t.confusion,
    })
}

/// One-sided paired Wilcoxon signed-rank test of `a > b`.
///
/// Zero differences are dropped; tied magnitudes share average ranks. The
/// p-value is exact (full sign enumeration) up to 20 nonzero differences
/// and a continuity-corrected normal approximation with tie correction
/// beyond that.
pub fn wilcoxon_one_sided(paired_a: &[f64], paired_b: &[f64]) -> Result<f64> {
    if paired_a.len() != paired_b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            paired_a.len(),
            paired_b.len()
        )));
    }
    if paired_a.len() < 5 {
        return Err(Error::TestUndefined(format!(
            "{} pairs are too few for a signed-rank test",
            paired_a.len()
        )));
    }
    let diffs: Vec<f64> = paired_a
        .iter()
        .zip(paired_b.iter())
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::TestUndefined(
            "all paired differences are zero".into(),
        ));
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_average_ranks(&magnitudes);
    let w_plus2: u64 = ranks2
        .iter()
        .zip(diffs.iter())
        .filter(|&(_, &d)| d > 0.0)
        .map(|(&r2, _)| r2)
        .sum();
    let n = diffs.len();
    if n <= 20 {
        // Exact null distribution: every sign assignment equally likely.
        let mut at_least = 0u64;
        for signs in 0u64..(1u64 << n) {
            let mut w2 = 0u64;
            for (i, &r2) in ranks2.iter().enumerate() {
                if signs >> i & 1 == 1 {
                    w2 += r2;
                }
            }
            if w2 >= w_plus2 {
                at_least += 1;
            }
        }
        Ok(at_least as f64 / (1u64 << n) as f64)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        // Tie correction: subtract (t^3 - t)/48 per tied-magnitude group.
        let mut sorted2 = ranks2.clone();
        sorted2.sort_unstable();
        let mut i = 0;
        while i < sorted2.len() {
            let mut j = i;
            while j + 1 < sorted2.len() && sorted2[j + 1] == sorted2[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            var -= (t * t * t - t) / 48.0;
            i = j + 1;
        }
        let w_plus = w_plus2 as f64 / 2.0;
        let z = (w_plus - 0.5 - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Ok(1.0 - normal.cdf(z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All-pairs AUC in the same exact doubled-integer arithmetic.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins2 = 0u64;
        let mut pairs = 0u64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1;
                if si > sj {
                    wins2 += 2;
                } else if si == sj {
                    wins2 += 1;
                }
            }
        }
        wins2 as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(
            roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
            0.75
        );
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.5, 0.6], &[1, 1]),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn auc_matches_pairwise_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..300 {
            let n = rng.gen_range(2..40);
            // A coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let got = roc_auc(&scores, &labels).unwrap();
            assert_eq!(got, pairwise_auc(&scores, &labels));
        }
    }

    #[test]
    fn auc_complement_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let scores: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..30).map(|i| (i % 3 == 0) as u8).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        let flipped: Vec<u8> = labels.iter().map(|&y| 1 - y).collect();
        let comp = roc_auc(&scores, &flipped).unwrap();
        assert!((auc + comp - 1.0).abs() <= 1e-12);

        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert_eq!(auc, roc_auc(&transformed, &labels).unwrap());
    }

    #[test]
    fn classification_known_confusion() {
        // tp=2 fp=1 fn=1 tn=6 with true as positive.
        let scores = [0.9, 0.8, 0.7, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.4];
        let labels = [1, 1, 0, 1, 0, 0, 0, 0, 0, 0];
        let m = classification_metrics(&scores, &labels, 0.5);
        assert_eq!(m.confusion.true_positives, 2);
        assert_eq!(m.confusion.false_positives, 1);
        assert_eq!(m.confusion.false_negatives, 1);
        assert_eq!(m.confusion.true_negatives, 6);
        assert!((m.true_class.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.true_class.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.true_class.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.f1_micro, 0.8);
    }

    #[test]
    fn classification_handles_degenerate_predictions() {
        let m = classification_metrics(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5);
        assert_eq!(m.true_class.precision, 0.0);
        assert_eq!(m.true_class.recall, 0.0);
        assert_eq!(m.true_class.f1, 0.0);
        assert!(m.fake_class.f1 > 0.0);

        let perfect = classification_metrics(&[0.9, 0.1], &[1, 0], 0.5);
        assert_eq!(perfect.f1_macro, 1.0);
        assert_eq!(perfect.f1_micro, 1.0);
        assert_eq!(perfect.true_class.f1, 1.0);
        assert_eq!(perfect.fake_class.f1, 1.0);
    }

    #[test]
    fn micro_f1_equals_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            let m = classification_metrics(&scores, &labels, 0.5);
            let correct = scores
                .iter()
                .zip(labels.iter())
                .filter(|&(&s, &y)| (s >= 0.5) == (y == 1))
                .count();
            assert_eq!(m.f1_micro, correct as f64 / n as f64);
            assert_eq!(m.confusion.total(), n);
        }
    }

    #[test]
    fn wilcoxon_all_positive_five() {
        let a = [0.9, 0.8, 0.7, 0.6, 0.5];
        let b = [0.1, 0.3, 0.45, 0.5, 0.2];
        let p = wilcoxon_one_sided(&a, &b).unwrap();
        assert_eq!(p, 1.0 / 32.0);
    }

    #[test]
    fn wilcoxon_degenerate_inputs() {
        let a = [0.5; 5];
        assert!(matches!(
            wilcoxon_one_sided(&a, &a),
            Err(Error::TestUndefined(_))
        ));
        assert!(matches!(
            wilcoxon_one_sided(&a[..4], &a[..4]),
            Err(Error::TestUndefined(_))
        ));
        assert!(matches!(
            wilcoxon_one_sided(&a, &a[..4]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn wilcoxon_swap_gives_complementary_tail() {
        let a = [0.9, 0.2, 0.7, 0.65, 0.3, 0.8];
        let b = [0.4, 0.3, 0.5, 0.6, 0.35, 0.1];
        let p_ab = wilcoxon_one_sided(&a, &b).unwrap();
        let p_ba = wilcoxon_one_sided(&b, &a).unwrap();
        // Exact enumeration over the same ranks: the two tails overlap on
        // assignments hitting each statistic exactly, so the sum exceeds 1
        // by the shared mass; both stay valid probabilities.
        assert!(p_ab < p_ba);
        assert!((0.0..=1.0).contains(&p_ab) && (0.0..=1.0).contains(&p_ba));
        assert!(p_ab + p_ba >= 1.0);
    }

    #[test]
    fn wilcoxon_approximation_tracks_exact_near_cutoff() {
        // n = 20 runs the exact path; the same data padded to n = 21 with
        // one extra pair runs the approximation. They should land close.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let a20: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b20: Vec<f64> = a20
            .iter()
            .map(|v| v - rng.gen_range(-0.2..0.5))
            .collect();
        let exact = wilcoxon_one_sided(&a20, &b20).unwrap();

        let mut a21 = a20.clone();
        let mut b21 = b20.clone();
        a21.push(0.5);
        b21.push(0.5); // zero difference, dropped: still 20 ranks, exact path
        assert_eq!(wilcoxon_one_sided(&a21, &b21).unwrap(), exact);

        a21.push(0.9);
        b21.push(0.3);
        let approx = wilcoxon_one_sided(&a21, &b21).unwrap();
        assert!((0.0..=1.0).contains(&approx));
        assert!((approx - exact).abs() < 0.15, "{approx} vs {exact}");
    }

    #[test]
    fn evaluate_combines_auc_and_threshold_metrics() {
        let scores = [0.9, 0.6, 0.4, 0.1];
        let labels = [1, 1, 0, 0];
        let r = evaluate(&scores, &labels, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.f1_macro, 1.0);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
