//! Confusion matrix and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::extract::Prediction;

/// Gold rows by predicted columns; the extra last column counts outputs that
/// matched no class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `labels.len()` rows of `labels.len() + 1` counts.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: &[String]) -> ConfusionMatrix {
        let k = labels.len();
        ConfusionMatrix {
            labels: labels.to_vec(),
            counts: vec![vec![0; k + 1]; k],
        }
    }

    pub fn from_counts(labels: &[String], counts: Vec<Vec<u64>>) -> Result<ConfusionMatrix> {
        let k = labels.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k + 1) {
            return Err(Error::dim(
                "confusion matrix",
                &[k, k + 1],
                &[counts.len(), counts.first().map_or(0, Vec::len)],
            ));
        }
        Ok(ConfusionMatrix {
            labels: labels.to_vec(),
            counts,
        })
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn record(&mut self, gold: usize, predicted: Prediction) {
        let k = self.classes();
        let col = match predicted {
            Prediction::Class(c) => c,
            Prediction::Unparseable => k,
        };
        self.counts[gold][col] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn unparseable(&self) -> u64 {
        let k = self.classes();
        self.counts.iter().map(|r| r[k]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averaged,
    pub weighted_avg: Averaged,
}

impl Metrics {
    pub fn averaged(&self, mode: Averaging) -> Averaged {
        match mode {
            Averaging::Macro => self.macro_avg,
            Averaging::Weighted => self.weighted_avg,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<Metrics> {
    let k = m.classes();
    let total = m.total();
    if k == 0 || total == 0 {
        return Err(Error::Usage("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = m.counts[c][c];
            let predicted: u64 = (0..k).map(|g| m.counts[g][c]).sum();
            let support: u64 = m.counts[c].iter().sum();
            let (fp, fn_) = (predicted - tp, support - tp);
            ClassMetrics {
                label: m.labels[c].clone(),
                precision: ratio(tp, predicted),
                recall: ratio(tp, support),
                f1: ratio(2 * tp, 2 * tp + fp + fn_),
                support,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|c| f(c) * c.support as f64)
            .sum::<f64>()
            / total as f64
    };
    Ok(Metrics {
        accuracy: ratio(m.correct(), total),
        macro_avg: Averaged {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        },
        weighted_avg: Averaged {
            precision: weighted(|c| c.precision),
            recall: weighted(|c| c.recall),
            f1: weighted(|c| c.f1),
        },
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_diagonal() {
        let m = ConfusionMatrix::from_counts(
            &labels(3),
            vec![vec![4, 0, 0, 0], vec![0, 2, 0, 0], vec![0, 0, 7, 0]],
        )
        .unwrap();
        let r = metrics_from_confusion(&m).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_avg.f1, 1.0);
        assert_eq!(r.weighted_avg.f1, 1.0);
    }

    #[test]
    fn binary_examples() {
        let m =
            ConfusionMatrix::from_counts(&labels(2), vec![vec![1, 1, 0], vec![0, 2, 0]]).unwrap();
        assert_eq!(metrics_from_confusion(&m).unwrap().accuracy, 0.75);
        let always_a =
            ConfusionMatrix::from_counts(&labels(2), vec![vec![5, 0, 0], vec![5, 0, 0]]).unwrap();
        let r = metrics_from_confusion(&always_a).unwrap();
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!((r.macro_avg.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unparseable_column_counts_against_recall() {
        let mut m = ConfusionMatrix::new(&labels(2));
        m.record(0, Prediction::Class(0));
        m.record(0, Prediction::Unparseable);
        m.record(1, Prediction::Class(1));
        let r = metrics_from_confusion(&m).unwrap();
        assert_eq!(m.unparseable(), 1);
        assert_eq!(r.per_class[0].recall, 0.5);
        assert_eq!(r.per_class[0].precision, 1.0);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_is_usage_error() {
        assert!(matches!(
            metrics_from_confusion(&ConfusionMatrix::new(&labels(2))),
            Err(Error::Usage(_))
        ));
        assert!(metrics_from_confusion(&ConfusionMatrix::new(&[])).is_err());
        assert!(ConfusionMatrix::from_counts(&labels(2), vec![vec![1, 2]]).is_err());
    }
}
