//! Confusion-matrix classification metrics: ACC, AP (macro precision),
//! BMA (mean per-class recall) and macro F1.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `K × K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, class)).sum()
    }

    /// `None` for a class with no true samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let s = self.support(class);
        (s > 0).then(|| self.get(class, class) as f64 / s as f64)
    }

    /// Zero for a class that is never predicted.
    pub fn precision(&self, class: usize) -> f64 {
        let p = self.predicted(class);
        if p == 0 {
            0.0
        } else {
            self.get(class, class) as f64 / p as f64
        }
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Validation(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Validation(format!("label pair ({t}, {p}) outside [0, {k})")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

pub fn acc(cm: &ConfusionMatrix) -> f64 {
    let total = cm.total();
    if total == 0 {
        return 0.0;
    }
    let trace: u64 = (0..cm.k).map(|i| cm.get(i, i)).sum();
    trace as f64 / total as f64
}

/// Classes without true samples are skipped.
pub fn bma(cm: &ConfusionMatrix) -> f64 {
    let recalls: Vec<f64> = (0..cm.k).filter_map(|c| cm.recall(c)).collect();
    mean(&recalls)
}

pub fn macro_precision(cm: &ConfusionMatrix) -> f64 {
    let p: Vec<f64> = (0..cm.k).map(|c| cm.precision(c)).collect();
    mean(&p)
}

/// Classes without true samples are skipped; `F1 = 0` when both precision and
/// recall are zero.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1: Vec<f64> = (0..cm.k)
        .filter_map(|c| {
            let r = cm.recall(c)?;
            let p = cm.precision(c);
            Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        })
        .collect();
    mean(&f1)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// All four summaries, plus warnings about excluded classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub acc: f64,
    pub ap: f64,
    pub bma: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ClassificationReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Self {
        let warnings = (0..cm.k)
            .filter(|&c| cm.support(c) == 0)
            .map(|c| format!("class {c} has no true samples; excluded from BMA and F1"))
            .collect();
        Self {
            acc: acc(cm),
            ap: macro_precision(cm),
            bma: bma(cm),
            f1: macro_f1(cm),
            warnings,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let cm = confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 1]);
        assert_eq!(acc(&cm), 2.0 / 3.0);
        assert_eq!(cm.recall(0), Some(0.5));
        assert_eq!(cm.recall(1), Some(1.0));
        assert_eq!(bma(&cm), 0.75);
        assert_eq!(cm.precision(0), 1.0);
        assert_eq!(cm.precision(1), 0.5);
        assert_eq!(macro_precision(&cm), 0.75);
    }

    #[test]
    fn perfect_and_empty() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        let r = ClassificationReport::from_confusion(&cm);
        assert_eq!((r.acc, r.ap, r.bma, r.f1), (1.0, 1.0, 1.0, 1.0));
        let empty = confusion(&[], &[], 3).unwrap();
        assert_eq!(empty.counts, vec![0; 9]);
    }

    #[test]
    fn out_of_range_label() {
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn missing_class_is_reported() {
        let cm = confusion(&[0, 0], &[0, 1], 3).unwrap();
        let r = ClassificationReport::from_confusion(&cm);
        assert_eq!(r.warnings.len(), 2);
        assert_eq!(r.bma, 0.5);
    }
}
