use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

pub const NUM_CLASSES: usize = 3;

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl Confusion {
    pub fn from_pairs(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(TrainError::Config(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Confusion::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(TrainError::Config(format!("class index out of range: {t} / {p}")));
            }
            c.counts[t][p] += 1;
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

impl Metrics {
    /// Macro-averaged precision and recall; a class that is never predicted
    /// (or never present) contributes 0.
    pub fn from_confusion(c: &Confusion) -> Result<Self> {
        let total = c.total();
        if total == 0 {
            return Err(TrainError::Config("no cases to evaluate".into()));
        }
        let correct: usize = (0..NUM_CLASSES).map(|k| c.counts[k][k]).sum();
        let (mut precision, mut recall) = (0.0, 0.0);
        for k in 0..NUM_CLASSES {
            let predicted: usize = (0..NUM_CLASSES).map(|t| c.counts[t][k]).sum();
            let actual: usize = c.counts[k].iter().sum();
            if predicted > 0 {
                precision += c.counts[k][k] as f64 / predicted as f64;
            } else {
                log::warn!("precision undefined for class {k} (never predicted); counted as 0");
            }
            if actual > 0 {
                recall += c.counts[k][k] as f64 / actual as f64;
            }
        }
        Ok(Metrics {
            precision: precision / NUM_CLASSES as f64,
            recall: recall / NUM_CLASSES as f64,
            accuracy: correct as f64 / total as f64,
        })
    }
}

/// Per-fold metrics with their mean and standard error of the mean
/// (sample standard deviation over `sqrt(folds)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<Metrics>,
    pub mean: Metrics,
    pub sem: Metrics,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<Metrics>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(TrainError::Config("no folds to aggregate".into()));
        }
        let stat = |f: fn(&Metrics) -> f64| -> (f64, f64) {
            let n = per_fold.len() as f64;
            let mean = per_fold.iter().map(f).sum::<f64>() / n;
            if per_fold.len() < 2 {
                return (mean, 0.0);
            }
            let var = per_fold.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt() / n.sqrt())
        };
        let (p, r, a) = (stat(|m| m.precision), stat(|m| m.recall), stat(|m| m.accuracy));
        Ok(MetricsReport {
            mean: Metrics {
                precision: p.0,
                recall: r.0,
                accuracy: a.0,
            },
            sem: Metrics {
                precision: p.1,
                recall: r.1,
                accuracy: a.1,
            },
            per_fold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let c = Confusion::from_pairs(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let m = Metrics::from_confusion(&c).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor() {
        let c = Confusion::from_pairs(&[0, 0, 1, 1, 2, 2], &[1; 6]).unwrap();
        let m = Metrics::from_confusion(&c).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.precision - 1.0 / 9.0).abs() < 1e-15);
    }

    /// Hand computation: precision per class 5/5, 4/6, 3/4; recall 5/5,
    /// 4/5, 3/5.
    #[test]
    fn hand_checked_confusion() {
        let c = Confusion {
            counts: [[5, 0, 0], [0, 4, 1], [0, 2, 3]],
        };
        let m = Metrics::from_confusion(&c).unwrap();
        assert!((m.accuracy - 12.0 / 15.0).abs() < 1e-15);
        assert!((m.precision - (1.0 + 4.0 / 6.0 + 0.75) / 3.0).abs() < 1e-15);
        assert!((m.recall - (1.0 + 0.8 + 0.6) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sem_uses_sample_std() {
        let f = |a| Metrics {
            precision: a,
            recall: a,
            accuracy: a,
        };
        let r = MetricsReport::from_folds(vec![f(0.5), f(0.7), f(0.9)]).unwrap();
        assert!((r.mean.accuracy - 0.7).abs() < 1e-12);
        assert!((r.sem.accuracy - 0.2 / 3f64.sqrt()).abs() < 1e-12);
    }
}
