//! Confusion matrix and per-class classification report.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::{Error, Result};

/// `counts[true][predicted]`, classes in label-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }
}

pub fn confusion_matrix(y_true: &[Label], y_pred: &[Label]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "confusion_matrix: {} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// Same as [`confusion_matrix`] but from raw class indices, which must be 0 or 1.
pub fn confusion_matrix_from_indices(y_true: &[usize], y_pred: &[usize]) -> Result<ConfusionMatrix> {
    let conv = |v: &[usize]| -> Result<Vec<Label>> {
        v.iter().map(|&i| Label::from_index(i)).collect()
    };
    confusion_matrix(&conv(y_true)?, &conv(y_pred)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ClassScores {
    /// Scores rounded half-to-even at two decimals, for display.
    pub fn rounded(&self) -> Self {
        Self {
            precision: round2(self.precision),
            recall: round2(self.recall),
            f1: round2(self.f1),
            support: self.support,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub classes: IndexMap<String, ClassScores>,
    pub confusion: [[u64; 2]; 2],
    /// One entry per score that had a zero denominator and was set to 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("classification_report: empty confusion matrix"));
    }
    let mut warnings = Vec::new();
    let mut ratio = |num: u64, den: u64, what: &str, class: &str| {
        if den == 0 {
            warnings.push(format!("{what} of {class} is undefined (zero denominator); reported as 0"));
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut classes = IndexMap::new();
    for label in Label::ALL {
        let c = label.index();
        let tp = cm.counts[c][c];
        let row: u64 = cm.counts[c].iter().sum();
        let col = cm.counts[0][c] + cm.counts[1][c];
        let precision = ratio(tp, col, "precision", label.name());
        let recall = ratio(tp, row, "recall", label.name());
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        classes.insert(
            label.name().to_string(),
            ClassScores {
                precision,
                recall,
                f1,
                support: row,
            },
        );
    }
    Ok(ClassificationReport {
        accuracy: cm.trace() as f64 / total as f64,
        classes,
        confusion: cm.counts,
        warnings,
    })
}

impl ClassificationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fixed-width text table with two-decimal scores.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12}{:>10}{:>10}{:>10}{:>9}\n", "", "precision", "recall", "f1-score", "support");
        for (name, c) in &self.classes {
            let r = c.rounded();
            s += &format!(
                "{name:<12}{:>10.2}{:>10.2}{:>10.2}{:>9}\n",
                r.precision, r.recall, r.f1, r.support
            );
        }
        let total: u64 = self.classes.values().map(|c| c.support).sum();
        s += &format!("{:<12}{:>30.2}{:>9}\n", "accuracy", round2(self.accuracy), total);
        for w in &self.warnings {
            s += &format!("warning: {w}\n");
        }
        s
    }
}

/// Round half to even at two decimal places.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}
