//! Confusion matrices and F1 scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::invalid(
                "confusion",
                format!("label pair ({truth}, {predicted}) outside [0, {})", self.classes),
            ));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, predicted)).sum()
    }

    /// Pooled accuracy; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }
}

pub fn confusion(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("confusion", &[predicted.len()], &[truth.len()]));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in predicted.iter().zip(truth) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class, macro (unweighted mean) and micro (pooled) F1. Classes with
/// no predictions or no true samples score 0.
pub fn f1_scores(cm: &ConfusionMatrix) -> F1Scores {
    let c = cm.classes;
    let mut per_class = Vec::with_capacity(c);
    let mut precision = Vec::with_capacity(c);
    let mut recall = Vec::with_capacity(c);
    for k in 0..c {
        let tp = cm.get(k, k);
        let (pred, actual) = (cm.col_sum(k), cm.row_sum(k));
        let (p, r) = (ratio(tp, pred), ratio(tp, actual));
        precision.push(p);
        recall.push(r);
        per_class.push(if pred == 0 || actual == 0 { 0.0 } else { harmonic(p, r) });
    }
    let macro_f1 = if c == 0 { 0.0 } else { per_class.iter().sum::<f64>() / c as f64 };
    // Pooled counts: every miss is one false positive and one false negative.
    let tp = cm.trace();
    let misses = cm.total() - tp;
    let micro = ratio(2 * tp, 2 * tp + 2 * misses);
    F1Scores {
        per_class,
        precision,
        recall,
        macro_f1,
        micro_f1: micro,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 2, 1];
        let cm = confusion(&labels, &labels, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        let f = f1_scores(&cm);
        assert!(f.per_class.iter().all(|&v| v == 1.0));
        assert_eq!((f.macro_f1, f.micro_f1), (1.0, 1.0));
    }

    #[test]
    fn empty_and_out_of_range() {
        let cm = confusion(&[], &[], 4).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(f1_scores(&cm).macro_f1, 0.0);
        assert!(confusion(&[4], &[0], 4).is_err());
        assert!(confusion(&[0], &[], 4).is_err());
    }

    #[test]
    fn two_thirds_case() {
        // Class 0: TP=2, FP=1 (a class-1 sample predicted 0), FN=1 (a class-0 sample predicted 1).
        let truth = [0, 0, 0, 1];
        let pred = [0, 0, 1, 0];
        let f = f1_scores(&confusion(&pred, &truth, 2).unwrap());
        assert!((f.precision[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.recall[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((f.per_class[0] - 2.0 / 3.0).abs() < 1e-15);
    }
}
