//! Labeled cross-entropy, soft cross-entropy and the combined objective.
//!
//! Both losses are batch means and return their gradient with respect to the
//! logits that produced `probs`.

use serde::{Deserialize, Serialize};

use crate::numkit::Matrix;
use crate::{Error, Result};

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

fn neg_log(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Mean of `-log p(ŷ_i)`; gradient `(p_i − onehot(ŷ_i)) / B`.
pub fn labeled_ce(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if probs.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        )));
    }
    let b = probs.rows() as f64;
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols() {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: probs.cols(),
            });
        }
        loss += neg_log(probs[(i, y)]);
        grad[(i, y)] -= 1.0;
    }
    grad.map_inplace(|g| g / b);
    Ok((loss / b, grad))
}

/// Mean of `Σ_y −q_y log p_y`; gradient `(|q_i|₁ p_i − q_i) / B`.
///
/// Soft-label rows need not sum to one. All-zero rows contribute neither
/// loss nor gradient.
pub fn soft_ce(probs: &Matrix, soft_labels: &Matrix) -> Result<(f64, Matrix)> {
    if probs.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if soft_labels.rows() != probs.rows() || soft_labels.cols() != probs.cols() {
        return Err(Error::Shape(format!(
            "soft labels are {}x{}, probabilities {}x{}",
            soft_labels.rows(),
            soft_labels.cols(),
            probs.rows(),
            probs.cols()
        )));
    }
    let b = probs.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for i in 0..probs.rows() {
        let q = soft_labels.row(i);
        if let Some(bad) = q.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::CorruptSoftLabel(format!("row {i} has entry {bad}")));
        }
        let mass: f64 = q.iter().sum();
        let p = probs.row(i);
        for ((g, &pv), &qv) in grad.row_mut(i).iter_mut().zip(p).zip(q) {
            if qv != 0.0 {
                loss += qv * neg_log(pv);
            }
            *g = (mass * pv - qv) / b;
        }
    }
    Ok((loss / b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_l: f64,
    pub loss_u: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `L_u + λ·L_l`.
pub fn total_loss(loss_u: f64, loss_l: f64, lambda: f64) -> LossReport {
    LossReport {
        loss_l,
        loss_u,
        total: loss_u + lambda * loss_l,
        lambda,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{softmax_rows, Rng};
    use proptest::prelude::*;

    #[test]
    fn labeled_examples() {
        let p = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(labeled_ce(&p, &[0, 1]).unwrap().0, 0.0);
        let p = Matrix::from_rows(&[[0.25; 4]]).unwrap();
        let (l, _) = labeled_ce(&p, &[2]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.3863).abs() < 5e-5);
        assert!(matches!(
            labeled_ce(&Matrix::zeros(0, 2), &[]),
            Err(Error::EmptyBatch)
        ));
        // Clamped, not infinite.
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!((labeled_ce(&p, &[1]).unwrap().0 - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn soft_examples() {
        let p = Matrix::from_rows(&[[0.3, 0.7], [0.5, 0.5]]).unwrap();
        let q = Matrix::from_rows(&[[0.0, 0.0], [0.5, 0.5]]).unwrap();
        let (l, g) = soft_ce(&p, &q).unwrap();
        assert!((l - 2f64.ln() / 2.0).abs() < 1e-15);
        assert_eq!(g.row(0), &[0.0, 0.0]);

        let (l, _) = soft_ce(&p.select_rows(&[1]), &q.select_rows(&[1])).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 5e-5);

        let bad = Matrix::from_rows(&[[0.0, -0.1], [0.0, 0.0]]).unwrap();
        assert!(matches!(soft_ce(&p, &bad), Err(Error::CorruptSoftLabel(_))));
    }

    #[test]
    fn one_hot_soft_equals_labeled() {
        let mut rng = Rng::new(3);
        let logits = Matrix::from_vec(6, 4, (0..24).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
        let p = softmax_rows(&logits).unwrap();
        let labels = [0, 3, 1, 1, 2, 0];
        let q = crate::pseudolabel::one_hot(&labels, 4);
        let (a, ga) = labeled_ce(&p, &labels).unwrap();
        let (b, gb) = soft_ce(&p, &q).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn total_examples() {
        let r = total_loss(1.0, 0.5, 1.0);
        assert_eq!(r.total, 1.5);
        assert_eq!(total_loss(0.7, 123.0, 0.0).total, 0.7);
    }

    proptest! {
        #[test]
        fn soft_ce_is_linear_in_q(
            logits in prop::collection::vec(-5.0f64..5.0, 3),
            q in prop::collection::vec(0.0f64..1.0, 3),
            k in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25]),
        ) {
            let p = softmax_rows(&Matrix::from_vec(1, 3, logits).unwrap()).unwrap();
            let q1 = Matrix::from_vec(1, 3, q.clone()).unwrap();
            let qk = Matrix::from_vec(1, 3, q.iter().map(|v| v * k).collect()).unwrap();
            let (a, _) = soft_ce(&p, &q1).unwrap();
            let (b, _) = soft_ce(&p, &qk).unwrap();
            // Power-of-two scales keep the products exact.
            prop_assert_eq!(b, k * a);
        }
    }
}
