//! Confidence-based partition of the target training set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::model::Model;
use crate::numkit::argmax;
use crate::{Error, Result};

/// Confident subset (with frozen pseudo-labels) and less-confident subset of
/// the target training indices. Both index lists are ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub labeled_indices: Vec<usize>,
    /// Aligned with `labeled_indices`.
    pub pseudo_labels: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub threshold_used: f64,
}

impl SplitResult {
    pub fn total(&self) -> usize {
        self.labeled_indices.len() + self.unlabeled_indices.len()
    }

    /// Writes `index,subset,pseudo_label` rows; unlabeled rows leave the label empty.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rows: Vec<(usize, &str, Option<usize>)> = self
            .labeled_indices
            .iter()
            .zip(&self.pseudo_labels)
            .map(|(&i, &y)| (i, "labeled", Some(y)))
            .chain(self.unlabeled_indices.iter().map(|&i| (i, "unlabeled", None)))
            .collect();
        rows.sort_by_key(|r| r.0);
        let mut out = String::from("index,subset,pseudo_label\n");
        for (i, subset, y) in rows {
            out.push_str(&format!(
                "{i},{subset},{}\n",
                y.map(|y| y.to_string()).unwrap_or_default()
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Splits by the source model's maximum class probability: rows with
/// `max p >= p_th` join the labeled subset with `argmax p` as pseudo-label.
pub fn split_target(source_model: &Model, target_train: &Dataset, p_th: f64) -> Result<SplitResult> {
    if !(p_th > 0.0 && p_th < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "p_th must lie in (0, 1), got {p_th}"
        )));
    }
    if target_train.is_empty() {
        return Err(Error::InvalidArgument("target training set is empty".into()));
    }
    let probs = source_model.forward(target_train.features())?.probs;
    split_from_probs(probs.iter_rows(), p_th)
}

/// Split from precomputed class-probability rows.
pub fn split_from_probs<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    p_th: f64,
) -> Result<SplitResult> {
    let mut split = SplitResult {
        labeled_indices: Vec::new(),
        pseudo_labels: Vec::new(),
        unlabeled_indices: Vec::new(),
        threshold_used: p_th,
    };
    for (i, p) in rows.into_iter().enumerate() {
        let y = argmax(p);
        if p[y] >= p_th {
            split.labeled_indices.push(i);
            split.pseudo_labels.push(y);
        } else {
            split.unlabeled_indices.push(i);
        }
    }
    if split.labeled_indices.is_empty() {
        return Err(Error::NoConfidentInstances(p_th));
    }
    if split.unlabeled_indices.is_empty() {
        log::warn!(
            "every target instance is confident at p_th={p_th}; adaptation reduces to supervised fine-tuning"
        );
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    /// `|L| / |X_T|`.
    pub ratio: f64,
    /// Fraction of pseudo-labels matching the ground truth, when supplied.
    pub pl_accuracy: Option<f64>,
}

pub fn split_diagnostics(split: &SplitResult, true_labels: Option<&[usize]>) -> SplitDiagnostics {
    let total = split.total();
    let ratio = if total == 0 {
        0.0
    } else {
        split.labeled_indices.len() as f64 / total as f64
    };
    let pl_accuracy = true_labels.and_then(|truth| {
        if split.labeled_indices.is_empty() {
            return None;
        }
        let correct = split
            .labeled_indices
            .iter()
            .zip(&split.pseudo_labels)
            .filter(|(&i, &y)| truth[i] == y)
            .count();
        Some(correct as f64 / split.labeled_indices.len() as f64)
    });
    SplitDiagnostics { ratio, pl_accuracy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn examples() {
        let rows: Vec<Vec<f64>> = vec![vec![0.95, 0.05], vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]];
        let s = split_from_probs(rows.iter().map(Vec::as_slice), 0.9).unwrap();
        assert_eq!(s.labeled_indices, vec![0, 1]);
        assert_eq!(s.pseudo_labels, vec![0, 0]);
        assert_eq!(s.unlabeled_indices, vec![2, 3]);

        let d = split_diagnostics(&s, Some(&[0, 1, 1, 1]));
        assert_eq!(d.ratio, 0.5);
        assert_eq!(d.pl_accuracy, Some(0.5));
        assert_eq!(split_diagnostics(&s, None).pl_accuracy, None);
    }

    #[test]
    fn empty_confident_subset_is_an_error() {
        let rows = [vec![0.5, 0.5]];
        let err = split_from_probs(rows.iter().map(Vec::as_slice), 0.9).unwrap_err();
        assert!(err.to_string().contains("no confident instances"));
    }

    #[test]
    fn all_confident() {
        let rows = [vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = split_from_probs(rows.iter().map(Vec::as_slice), 0.9).unwrap();
        assert!(s.unlabeled_indices.is_empty());
        let d = split_diagnostics(&s, Some(&[0, 1]));
        assert_eq!(d.ratio, 1.0);
        assert_eq!(d.pl_accuracy, Some(1.0));
    }

    #[test]
    fn csv_export() {
        let rows = [vec![0.95, 0.05], vec![0.5, 0.5], vec![0.01, 0.99]];
        let s = split_from_probs(rows.iter().map(Vec::as_slice), 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "index,subset,pseudo_label\n0,labeled,0\n1,unlabeled,\n2,labeled,1\n"
        );
    }

    fn prob_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), 1..60).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|v| v / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn partition_and_monotonicity(rows in prob_rows(), a in 0.34f64..0.99, b in 0.34f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // Make sure at least one row is confident at both thresholds.
            let mut rows = rows;
            rows.push(vec![1.0, 0.0, 0.0]);
            let s_lo = split_from_probs(rows.iter().map(Vec::as_slice), lo).unwrap();
            let s_hi = split_from_probs(rows.iter().map(Vec::as_slice), hi).unwrap();
            for s in [&s_lo, &s_hi] {
                let l: BTreeSet<_> = s.labeled_indices.iter().collect();
                let u: BTreeSet<_> = s.unlabeled_indices.iter().collect();
                prop_assert!(l.is_disjoint(&u));
                prop_assert_eq!(l.len() + u.len(), rows.len());
            }
            let lo_set: BTreeSet<_> = s_lo.labeled_indices.iter().collect();
            prop_assert!(s_hi.labeled_indices.iter().all(|i| lo_set.contains(i)));
        }
    }
}
