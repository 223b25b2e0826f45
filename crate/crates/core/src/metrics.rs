//! Evaluation metrics for regression and binary classification.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;

fn check_lengths(a: usize, b: usize, what: &'static str) -> Result<()> {
    if a == 0 || b == 0 {
        return Err(Error::Empty(what));
    }
    if a != b {
        return Err(Error::Length(format!("{what}: {a} predictions for {b} targets")));
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), target.len(), "rmse")?;
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(libm::sqrt(sse / pred.len() as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &[bool], truth: &[bool]) -> Result<Self> {
        check_lengths(pred.len(), truth.len(), "confusion")?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// `2PR / (P + R)`, or 0 when precision or recall is undefined.
    ///
    /// Evaluated as `2TP / (2TP + FP + FN)`, the same ratio rounded once.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp == 0 || self.tp + self.fn_ == 0 {
            return 0.0;
        }
        (2 * self.tp) as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }

    /// Percentage of correct predictions.
    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        100.0 * (self.tp + self.tn) as f64 / n as f64
    }
}

pub fn f1(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::count(pred, truth)?.f1())
}

/// Fraction correct, times 100.
pub fn accuracy(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::count(pred, truth)?.accuracy())
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// Computed from tie-averaged ranks with integer arithmetic (ranks are
/// doubled), so the result is the exact ratio rounded once.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), truth.len(), "roc_auc")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "roc_auc" });
    }
    let pos = truth.iter().filter(|&&t| t).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum over positives of twice their (1-based, tie-averaged) rank.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        let positives = order[i..=j].iter().filter(|&&k| truth[k]).count() as u64;
        twice_rank_sum += twice_avg * positives;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Mean over positives of the precision at their rank, ranking by
/// descending score with ties kept in input order.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), truth.len(), "average_precision")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            op: "average_precision",
        });
    }
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average_precision"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// F1 and accuracy of `score >= threshold` for each threshold.
pub fn threshold_sweep(scores: &[f64], truth: &[bool], thresholds: &[f64]) -> Result<Vec<ThresholdPoint>> {
    thresholds
        .iter()
        .map(|&threshold| {
            let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
            let c = Confusion::count(&pred, truth)?;
            Ok(ThresholdPoint {
                threshold,
                f1: c.f1(),
                accuracy: c.accuracy(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: TaskKind,
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    /// In `[0, 100]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl EvalReport {
    pub fn regression(pred: &[f64], target: &[f64]) -> Result<Self> {
        Ok(EvalReport {
            task: TaskKind::Regression,
            samples: pred.len(),
            rmse: Some(rmse(pred, target)?),
            f1: None,
            average_precision: None,
            roc_auc: None,
            accuracy: None,
            confusion: None,
            threshold: None,
        })
    }

    /// `scores` are positive-class probabilities; predictions are
    /// `score >= threshold`. Rank metrics undefined on this input are left out.
    pub fn binary(scores: &[f64], truth: &[bool], threshold: f64) -> Result<Self> {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        let c = Confusion::count(&pred, truth)?;
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(EvalReport {
            task: TaskKind::Binary,
            samples: scores.len(),
            rmse: None,
            f1: Some(c.f1()),
            average_precision: defined(average_precision(scores, truth))?,
            roc_auc: defined(roc_auc(scores, truth))?,
            accuracy: Some(c.accuracy()),
            confusion: Some(c),
            threshold: Some(threshold),
        })
    }

    /// Markdown table with one column per reported metric.
    pub fn to_table(&self, label: &str) -> String {
        let cols: Vec<(&str, Option<f64>)> = match self.task {
            TaskKind::Regression => alloc::vec![("RMSE", self.rmse)],
            TaskKind::Binary => alloc::vec![
                ("F1 score", self.f1),
                ("Average Precision", self.average_precision),
                ("ROC AUC", self.roc_auc),
                ("Accuracy", self.accuracy),
            ],
        };
        let mut out = String::new();
        out.push_str("| Model |");
        for (name, _) in &cols {
            out.push_str(&format!(" {name} |"));
        }
        out.push_str("\n|---|");
        for _ in &cols {
            out.push_str("---|");
        }
        out.push_str(&format!("\n| {label} |"));
        for (_, v) in &cols {
            match v {
                Some(v) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap() - core::f64::consts::SQRT_2).abs() < 1e-15);
        assert!(matches!(rmse(&[], &[]), Err(Error::Empty(_))));
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Length(_))));
    }

    #[test]
    fn f1_and_accuracy_examples() {
        let pred = [true, true, false, false];
        let truth = [true, false, true, false];
        assert_eq!(f1(&pred, &truth).unwrap(), 0.5);
        assert_eq!(accuracy(&pred, &truth).unwrap(), 50.0);
        assert_eq!(f1(&truth, &truth).unwrap(), 1.0);
        assert_eq!(accuracy(&truth, &truth).unwrap(), 100.0);
        assert_eq!(f1(&[false; 4], &truth).unwrap(), 0.0);
    }

    #[test]
    fn roc_auc_examples() {
        let truth = [false, false, true, true];
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &truth).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &truth).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &truth).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn average_precision_examples() {
        let ap = average_precision(&[0.8, 0.4, 0.35, 0.1], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap();
        assert_eq!(ap, 0.25);
        assert!(matches!(
            average_precision(&[0.1], &[false]),
            Err(Error::UndefinedMetric(_))
        ));
        // Ties keep input order.
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn binary_report_and_table() {
        let r = EvalReport::binary(&[0.9, 0.2, 0.6, 0.4], &[true, false, false, true], 0.5).unwrap();
        assert_eq!(
            r.confusion.unwrap(),
            Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(r.accuracy, Some(50.0));
        let t = r.to_table("model");
        assert!(t.contains("ROC AUC"));
        assert!(t.contains("| model |"));
        let single = EvalReport::binary(&[0.9, 0.2], &[false, false], 0.5).unwrap();
        assert_eq!(single.roc_auc, None);
    }

    #[test]
    fn sweep_covers_thresholds() {
        let s = threshold_sweep(&[0.9, 0.2], &[true, false], &[0.1, 0.5, 0.95]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].f1, 1.0);
        assert_eq!(s[2].f1, 0.0);
    }
}
