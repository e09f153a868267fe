//! Teacher top-k gate.
//!
//! A sample may update the student only if its label is among the frozen
//! teacher's `k` most probable classes.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LatseError, Result};
use crate::margin::ProbDist;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GateDecision {
    pub sample_index: usize,
    /// Class indices in descending probability, ties toward lower index.
    pub teacher_top_k: Vec<usize>,
    pub label: usize,
    pub passed: bool,
}

impl GateDecision {
    pub fn teacher_top1(&self) -> usize {
        self.teacher_top_k[0]
    }
}

/// Which parts of a rejected sample's gradient are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateScope {
    /// Only the gradient flowing into the student encoder is masked.
    EmbeddingOnly,
    /// Rejected samples contribute nothing to encoder, head or decoder.
    FullSample,
}

/// The `k` most probable classes of one row.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k.min(row.len()));
    order
}

pub fn gate(teacher: &ProbDist, labels: &[usize], k: usize) -> Result<Vec<GateDecision>> {
    if k == 0 {
        return Err(LatseError::Config("gate k must be at least 1".into()));
    }
    let (n, classes) = teacher.probs.dim();
    if labels.len() != n {
        return Err(LatseError::Shape(format!(
            "{} labels for {} teacher rows",
            labels.len(),
            n
        )));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            if label >= classes {
                return Err(LatseError::Shape(format!(
                    "label {label} outside {classes} classes"
                )));
            }
            let row = teacher.row(i).to_vec();
            let teacher_top_k = top_k(&row, k);
            let passed = teacher_top_k.contains(&label);
            Ok(GateDecision {
                sample_index: i,
                teacher_top_k,
                label,
                passed,
            })
        })
        .collect()
}

/// Zeroes the rows of rejected samples. Returns the masked array and the
/// number of zeroed rows.
pub fn filter_gradients(decisions: &[GateDecision], grad: &Array2<f64>) -> Result<(Array2<f64>, usize)> {
    if decisions.len() != grad.nrows() {
        return Err(LatseError::Shape(format!(
            "{} decisions for {} gradient rows",
            decisions.len(),
            grad.nrows()
        )));
    }
    let mut out = grad.clone();
    let mut zeroed = 0;
    for (d, mut row) in decisions.iter().zip(out.rows_mut()) {
        if !d.passed {
            row.fill(0.0);
            zeroed += 1;
        }
    }
    Ok((out, zeroed))
}

/// Gate quality against ground-truth noise flags.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateAudit {
    pub samples: usize,
    pub noisy: usize,
    pub rejected: usize,
    pub rejected_noisy: usize,
    pub rejected_clean: usize,
}

impl GateAudit {
    pub fn record(&mut self, passed: bool, noisy: bool) {
        self.samples += 1;
        self.noisy += noisy as usize;
        if !passed {
            self.rejected += 1;
            if noisy {
                self.rejected_noisy += 1;
            } else {
                self.rejected_clean += 1;
            }
        }
    }

    /// rejected-and-noisy / rejected.
    pub fn precision(&self) -> f64 {
        ratio(self.rejected_noisy, self.rejected)
    }

    /// rejected-and-noisy / noisy.
    pub fn recall(&self) -> f64 {
        ratio(self.rejected_noisy, self.noisy)
    }

    /// rejected-and-clean / clean.
    pub fn false_rejection_rate(&self) -> f64 {
        ratio(self.rejected_clean, self.samples - self.noisy)
    }

    pub fn pass_rate(&self) -> f64 {
        ratio(self.samples - self.rejected, self.samples)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn dist(rows: Array2<f64>) -> ProbDist {
        ProbDist { probs: rows }
    }

    #[test]
    fn examples() {
        let d = gate(&dist(array![[0.7, 0.2, 0.1]]), &[0], 1).unwrap();
        assert!(d[0].passed);
        let d = gate(&dist(array![[0.5, 0.3, 0.2]]), &[2], 2).unwrap();
        assert!(!d[0].passed);
        assert_eq!(d[0].teacher_top_k, vec![0, 1]);
        let d = gate(&dist(array![[0.5, 0.3, 0.2]]), &[2], 7).unwrap();
        assert!(d[0].passed);
        assert_eq!(d[0].teacher_top_k.len(), 3);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let d = gate(&dist(array![[0.25, 0.25, 0.25, 0.25]]), &[1], 1).unwrap();
        assert_eq!(d[0].teacher_top_k, vec![0]);
        assert!(!d[0].passed);
        let again = gate(&dist(array![[0.25, 0.25, 0.25, 0.25]]), &[1], 1).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gate(&dist(array![[1.0]]), &[0], 0).is_err());
        assert!(gate(&dist(array![[1.0]]), &[1], 1).is_err());
        assert!(gate(&dist(array![[1.0]]), &[0, 0], 1).is_err());
    }

    #[test]
    fn filter_all_none_and_half() {
        let grad = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let mk = |pass: [bool; 4]| {
            pass.iter()
                .enumerate()
                .map(|(i, &p)| GateDecision {
                    sample_index: i,
                    teacher_top_k: vec![0],
                    label: 0,
                    passed: p,
                })
                .collect::<Vec<_>>()
        };
        let (out, z) = filter_gradients(&mk([true; 4]), &grad).unwrap();
        assert_eq!((out.clone(), z), (grad.clone(), 0));
        let (out, z) = filter_gradients(&mk([false; 4]), &grad).unwrap();
        assert_eq!(z, 4);
        assert!(out.iter().all(|&v| v == 0.0));

        let pass = [true, false, false, true];
        let (out, z) = filter_gradients(&mk(pass), &grad).unwrap();
        assert_eq!(z, 2);
        let mut expected_sq = 0.0;
        for (i, &p) in pass.iter().enumerate() {
            if p {
                assert_eq!(out.row(i), grad.row(i));
                expected_sq += grad.row(i).dot(&grad.row(i));
            } else {
                assert!(out.row(i).iter().all(|&v| v == 0.0));
            }
        }
        let norm_sq: f64 = out.iter().map(|v| v * v).sum();
        assert_eq!(norm_sq, expected_sq);
    }

    #[test]
    fn perfect_teacher_passes_everything() {
        let labels = [2usize, 0, 1, 2];
        let probs = Array2::from_shape_fn((4, 3), |(i, j)| (labels[i] == j) as u8 as f64);
        for k in 1..4 {
            assert!(gate(&dist(probs.clone()), &labels, k).unwrap().iter().all(|d| d.passed));
        }
    }

    #[test]
    fn audit_counts() {
        let mut a = GateAudit::default();
        a.record(false, true);
        a.record(false, false);
        a.record(true, true);
        a.record(true, false);
        assert_eq!(a.precision(), 0.5);
        assert_eq!(a.recall(), 0.5);
        assert_eq!(a.false_rejection_rate(), 0.5);
        assert_eq!(a.pass_rate(), 0.5);
    }

    proptest! {
        #[test]
        fn passed_set_grows_with_k(raw in proptest::collection::vec(0.0f64..1.0, 12), label in 0usize..6) {
            let probs = Array2::from_shape_vec((2, 6), raw).unwrap();
            let probs = dist(probs);
            for k in 1..6 {
                let a = gate(&probs, &[label, label], k).unwrap();
                let b = gate(&probs, &[label, label], k + 1).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!(!x.passed || y.passed);
                }
            }
        }
    }
}
