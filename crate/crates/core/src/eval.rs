//! Test-set metrics: per-class, macro and micro accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::model::Model;
use crate::numkit::argmax;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` for classes without test samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean over classes that have test samples.
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub absent_classes: Vec<usize>,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::EmptyTestSet);
        }
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::IndexOutOfRange {
                    index: t.max(p),
                    len: num_classes,
                });
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let per_class_accuracy: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
        let macro_accuracy = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        let micro_accuracy = if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        };
        let absent_classes = per_class_accuracy
            .iter()
            .enumerate()
            .filter_map(|(c, a)| a.is_none().then_some(c))
            .collect();
        Self {
            per_class_accuracy,
            macro_accuracy,
            micro_accuracy,
            confusion,
            absent_classes,
        }
    }

    /// Aligned table: one column per class, then Macro and Micro, as percentages.
    pub fn to_table(&self) -> String {
        let c = self.per_class_accuracy.len();
        let mut header = String::new();
        let mut row = String::new();
        for k in 0..c {
            let _ = write!(header, "{:>8}", format!("c{k}"));
            let cell = self.per_class_accuracy[k].map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a));
            let _ = write!(row, "{cell:>8}");
        }
        let _ = write!(header, "{:>8}{:>8}", "Macro", "Micro");
        let _ = write!(
            row,
            "{:>8.1}{:>8.1}",
            100.0 * self.macro_accuracy,
            100.0 * self.micro_accuracy
        );
        format!("{header}\n{row}\n")
    }
}

/// Argmax predictions (ties to the lowest class).
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<usize>> {
    let out = model.forward(data.features())?;
    Ok(out.probs.iter_rows().map(argmax).collect())
}

pub fn evaluate(model: &Model, test: &Dataset) -> Result<Metrics> {
    let truth = test.require_labels("evaluation")?;
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if model.num_classes() != test.num_classes() {
        return Err(Error::Shape(format!(
            "model predicts {} classes, test set has {}",
            model.num_classes(),
            test.num_classes()
        )));
    }
    let predicted = predict(model, test)?;
    Metrics::from_predictions(truth, &predicted, test.num_classes())
}
