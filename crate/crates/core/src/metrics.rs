//! Evaluation metrics: weighted F1, per-class precision/recall/F1, and
//! confusion matrices. Argmax ties break toward the lowest class index.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Index of the largest probability, lowest index on ties.
pub fn argmax<T: Scalar>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in probs.iter().enumerate().skip(1) {
        if *v > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassScores>,
    /// `confusion[i][j]` counts samples of true class `i` predicted as `j`.
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

fn check_lengths(predicted: &[usize], truth: &[usize]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            context: "metrics: predictions vs truth".into(),
            expected: vec![truth.len()],
            got: vec![predicted.len()],
        });
    }
    Ok(())
}

/// `confusion[i][j]` = count of true-`i` predicted-`j`.
pub fn confusion_matrix(
    predicted: &[usize],
    truth: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    check_lengths(predicted, truth)?;
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::LabelRange {
                label: p.max(t),
                num_classes,
                context: "confusion_matrix".into(),
            });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Full report from label vectors.
pub fn evaluate(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<EvalReport> {
    let confusion = confusion_matrix(predicted, truth, num_classes)?;
    let total = truth.len();
    let mut per_class = Vec::with_capacity(num_classes);
    let mut weighted_f1 = 0.0;
    let mut correct = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        correct += tp;
        let fp: usize = (0..num_classes).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fn_: usize = (0..num_classes).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let support: usize = confusion[c].iter().sum();
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted_f1 += f1 * support as f64;
        per_class.push(ClassScores {
            precision,
            recall,
            f1,
            support,
        });
    }
    let weighted_f1 = if total == 0 { 0.0 } else { weighted_f1 / total as f64 };
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok(EvalReport {
        weighted_f1,
        accuracy,
        per_class,
        confusion,
        total,
    })
}

/// Support-weighted mean of per-class F1. Classes absent from the truth
/// contribute zero weight.
pub fn weighted_f1(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    let num_classes = predicted
        .iter()
        .chain(truth.iter())
        .copied()
        .max()
        .map_or(1, |m| m + 1);
    Ok(evaluate(predicted, truth, num_classes)?.weighted_f1)
}

impl EvalReport {
    /// Human-readable block used by the CLI summaries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "weighted_f1 {:.4}\naccuracy {:.4}\ntotal {}\n",
            self.weighted_f1, self.accuracy, self.total
        ));
        for (c, s) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "class {c}: precision {:.4} recall {:.4} f1 {:.4} support {}\n",
                s.precision, s.recall, s.f1, s.support
            ));
        }
        out.push_str("confusion (rows = truth):\n");
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:6}")).collect();
            out.push_str(&format!("{}\n", cells.join(" ")));
        }
        out
    }
}
