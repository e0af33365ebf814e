//! Classification metrics: confusion matrix, accuracy, and support-weighted
//! precision/recall/F1.

use crate::error::{Error, Result};
use crate::sequence::{CLASS_NAMES, NUM_CLASSES};
use serde::{Deserialize, Serialize};

/// 4x4 counts; rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        ConfusionMatrix {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }

    pub fn from_pairs(truths: &[usize], predictions: &[usize]) -> Self {
        debug_assert_eq!(truths.len(), predictions.len());
        let mut cm = Self::new();
        for (&t, &p) in truths.iter().zip(predictions) {
            cm.counts[t][p] += 1;
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][j]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Aggregate report. `precision`, `recall` and `f1` are weighted by class
/// support proportions; `f1_unweighted_sum` is the plain sum of per-class F1
/// terms (which can exceed 1) kept for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f1_unweighted_sum: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weights: [f64; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

/// Compute all metrics from a confusion matrix. Classes with zero denominator
/// contribute zero rather than erroring.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let totalf = total as f64;
    let accuracy = cm.trace() as f64 / totalf;

    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut weights = [0.0; NUM_CLASSES];
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    let mut f1_sum = 0.0;
    for i in 0..NUM_CLASSES {
        let support = cm.row_sum(i);
        let predicted = cm.col_sum(i);
        let tp = cm.counts[i][i] as f64;
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / totalf;
        weights[i] = w;
        precision += w * p;
        recall += w * r;
        f1 += w * f;
        f1_sum += f;
        per_class.push(ClassMetrics {
            precision: p,
            recall: r,
            f1: f,
            support,
        });
    }
    Ok(MetricsReport {
        accuracy,
        precision,
        recall,
        f1,
        f1_unweighted_sum: f1_sum,
        per_class,
        weights,
        confusion: cm.clone(),
    })
}

impl MetricsReport {
    /// Human-readable report for metrics files.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "accuracy  {:.4}\nprecision {:.4}\nrecall    {:.4}\nf1        {:.4}\n",
            self.accuracy, self.precision, self.recall, self.f1
        ));
        out.push_str("\nper-class (precision / recall / f1 / support):\n");
        for (i, c) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "  {:<8} {:.4} / {:.4} / {:.4} / {}\n",
                CLASS_NAMES[i], c.precision, c.recall, c.f1, c.support
            ));
        }
        out.push_str("\nconfusion matrix (rows = true, cols = predicted):\n");
        for row in &self.confusion.counts {
            out.push_str("  ");
            for v in row {
                out.push_str(&format!("{v:>6} "));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn perfect_classifier_scores_one_everywhere() {
        let cm = ConfusionMatrix {
            counts: [
                [10, 0, 0, 0],
                [0, 10, 0, 0],
                [0, 0, 10, 0],
                [0, 0, 0, 10],
            ],
        };
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn hand_computed_example() {
        let cm = ConfusionMatrix {
            counts: [
                [5, 5, 0, 0],
                [0, 10, 0, 0],
                [0, 0, 10, 0],
                [0, 0, 0, 10],
            ],
        };
        let m = compute_metrics(&cm).unwrap();
        assert!((m.accuracy - 0.875).abs() < 1e-12);
        assert!((m.per_class[0].recall - 0.5).abs() < 1e-12);
        assert!((m.per_class[1].precision - 10.0 / 15.0).abs() < 1e-12);
        assert!((m.recall - 0.875).abs() < 1e-12);
    }

    #[test]
    fn empty_class_contributes_zero_without_error() {
        let cm = ConfusionMatrix {
            counts: [
                [10, 0, 0, 0],
                [0, 10, 0, 0],
                [0, 0, 10, 0],
                [0, 0, 0, 0], // class 3 absent and never predicted
            ],
        };
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.per_class[3].precision, 0.0);
        assert_eq!(m.per_class[3].recall, 0.0);
        assert_eq!(m.weights[3], 0.0);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(compute_metrics(&ConfusionMatrix::new()).is_err());
    }

    #[test]
    fn weighted_recall_equals_accuracy_on_random_matrices() {
        let mut rng = RngStream::new(5);
        for _ in 0..1000 {
            let mut cm = ConfusionMatrix::new();
            for i in 0..NUM_CLASSES {
                for j in 0..NUM_CLASSES {
                    cm.counts[i][j] = rng.uniform_int(20);
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let m = compute_metrics(&cm).unwrap();
            assert!(
                (m.recall - m.accuracy).abs() < 1e-12,
                "recall {} vs accuracy {}",
                m.recall,
                m.accuracy
            );
            assert!(m.weights.iter().sum::<f64>() > 0.999999);
        }
    }

    #[test]
    fn class_permutation_preserves_weighted_aggregates() {
        let mut rng = RngStream::new(9);
        let mut cm = ConfusionMatrix::new();
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                cm.counts[i][j] = 1 + rng.uniform_int(30);
            }
        }
        let m = compute_metrics(&cm).unwrap();
        // permute classes by a fixed cycle
        let perm = [2usize, 0, 3, 1];
        let mut pc = ConfusionMatrix::new();
        for i in 0..NUM_CLASSES {
            for j in 0..NUM_CLASSES {
                pc.counts[perm[i]][perm[j]] = cm.counts[i][j];
            }
        }
        let mp = compute_metrics(&pc).unwrap();
        assert!((m.accuracy - mp.accuracy).abs() < 1e-12);
        assert!((m.precision - mp.precision).abs() < 1e-12);
        assert!((m.recall - mp.recall).abs() < 1e-12);
        assert!((m.f1 - mp.f1).abs() < 1e-12);
        for i in 0..NUM_CLASSES {
            assert!((m.per_class[i].f1 - mp.per_class[perm[i]].f1).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut rng = RngStream::new(11);
        for _ in 0..200 {
            let mut cm = ConfusionMatrix::new();
            for i in 0..NUM_CLASSES {
                for j in 0..NUM_CLASSES {
                    cm.counts[i][j] = rng.uniform_int(10);
                }
            }
            if cm.total() == 0 {
                continue;
            }
            let m = compute_metrics(&cm).unwrap();
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
