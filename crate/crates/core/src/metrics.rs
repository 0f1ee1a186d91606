//! Classification metrics over a 3×3 confusion matrix.

use std::fmt;

use crate::config::{CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

pub fn confusion(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Labels(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut m = ConfusionMatrix::default();
    for (&y, &p) in labels.iter().zip(predictions) {
        if y >= NUM_CLASSES || p >= NUM_CLASSES {
            return Err(Error::Labels(format!("class index out of range: label {y}, prediction {p}")));
        }
        m.counts[y][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: [ClassScores; NUM_CLASSES],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Macro-averaged precision, recall and F1 plus accuracy. A 0/0 precision
/// or recall counts as 0.
pub fn macro_scores(m: &ConfusionMatrix) -> Result<MacroScores> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let per_class: [ClassScores; NUM_CLASSES] = std::array::from_fn(|k| {
        let tp = m.counts[k][k];
        let precision = ratio(tp, m.col_sum(k));
        let recall = ratio(tp, m.row_sum(k));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ClassScores { precision, recall, f1 }
    });
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    Ok(MacroScores {
        precision: mean(|c| c.precision),
        recall: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        accuracy: ratio(m.trace(), total),
        per_class,
    })
}

/// Multiclass Matthews correlation; 0 when either marginal is degenerate.
pub fn mcc(m: &ConfusionMatrix) -> f64 {
    let c = |i: usize, j: usize| m.counts[i][j] as f64;
    let n = NUM_CLASSES;
    let mut num = 0.0;
    for k in 0..n {
        for l in 0..n {
            for q in 0..n {
                num += c(k, k) * c(l, q) - c(k, l) * c(q, k);
            }
        }
    }
    let mut den_true = 0.0;
    let mut den_pred = 0.0;
    for k in 0..n {
        let row_k = m.row_sum(k) as f64;
        let col_k = m.col_sum(k) as f64;
        let mut rest_row = 0.0;
        let mut rest_col = 0.0;
        for k2 in (0..n).filter(|&k2| k2 != k) {
            rest_row += m.row_sum(k2) as f64;
            rest_col += m.col_sum(k2) as f64;
        }
        den_true += row_k * rest_row;
        den_pred += col_k * rest_col;
    }
    let den = (den_true * den_pred).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (num / den).clamp(-1.0, 1.0)
    }
}

/// The five reported numbers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub mcc: f64,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "precision,recall,f1,accuracy,mcc";

    pub fn from_confusion(m: &ConfusionMatrix) -> Result<Self> {
        let s = macro_scores(m)?;
        Ok(Self {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            accuracy: s.accuracy,
            mcc: mcc(m),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.precision, self.recall, self.f1, self.accuracy, self.mcc
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8}", "metric", "value")?;
        for (name, v) in [
            ("Precision", self.precision),
            ("Recall", self.recall),
            ("F1", self.f1),
            ("Accuracy", self.accuracy),
            ("MCC", self.mcc),
        ] {
            writeln!(f, "{name:<10} {:>8.4}", v)?;
        }
        Ok(())
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>6}", "")?;
        for name in CLASS_NAMES {
            write!(f, "{name:>6}")?;
        }
        writeln!(f)?;
        for (name, row) in CLASS_NAMES.iter().zip(&self.counts) {
            write!(f, "{name:>6}")?;
            for v in row {
                write!(f, "{v:>6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_count() {
        let m = confusion(&[0, 1, 2], &[1, 1, 2]).unwrap();
        assert_eq!(m.counts, [[0, 1, 0], [0, 1, 0], [0, 0, 1]]);
        assert!(confusion(&[0], &[0, 1]).is_err());
        assert!(confusion(&[3], &[0]).is_err());
    }

    #[test]
    fn perfect_classifier() {
        let m = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        let s = macro_scores(&m).unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(mcc(&m), 1.0);
    }

    #[test]
    fn hand_computed_scores() {
        let m = ConfusionMatrix {
            counts: [[1, 1, 0], [0, 1, 1], [0, 0, 1]],
        };
        let s = macro_scores(&m).unwrap();
        assert_eq!(s.accuracy, 3.0 / 5.0);
        // precision: 1/1, 1/2, 1/2; recall: 1/2, 1/2, 1/1
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        let f = [2.0 / 3.0, 0.5, 2.0 / 3.0];
        assert!((s.f1 - f.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = confusion(&[0, 1, 0, 1], &[0, 1, 1, 1]).unwrap();
        let s = macro_scores(&m).unwrap();
        assert_eq!(s.per_class[2], ClassScores { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!(s.precision < 1.0);
    }

    #[test]
    fn single_predicted_class_has_zero_mcc() {
        let m = confusion(&[0, 1, 2, 0, 1, 2], &[1; 6]).unwrap();
        assert_eq!(mcc(&m), 0.0);
        assert!(macro_scores(&ConfusionMatrix::default()).is_err());
    }
}
