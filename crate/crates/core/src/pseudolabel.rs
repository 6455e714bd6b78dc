//! Dual moving-average label refinement.
//!
//! [`CentroidBank`] keeps one unit-norm prototype per class, blended with the
//! per-batch class mean of normalized features (coefficient `alpha`).
//! [`SoftLabelStore`] keeps one soft-label vector per unlabeled instance,
//! blended with the one-hot prototype assignment (coefficient `beta`).
//! Soft labels start at zero, so after `t_i` updates their L1 mass is
//! exactly `1 - beta^t_i`.

use std::path::Path;

use crate::numkit::{dot, l2_norm, Matrix, ZERO_NORM_EPS};
use crate::{Error, Result};

/// Per-class means of a batch of normalized features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    /// `C × dim`; rows of absent classes are zero.
    pub means: Matrix,
    pub present: Vec<bool>,
}

/// Mean feature of each class over the rows whose pseudo-label is that class.
/// Rows flagged in `skip` (e.g. zero-norm features) are left out.
pub fn class_feature_means(
    z: &Matrix,
    labels: &[usize],
    num_classes: usize,
    skip: Option<&[bool]>,
) -> Result<ClassMeans> {
    if labels.len() != z.rows() {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {} feature rows",
            labels.len(),
            z.rows()
        )));
    }
    let mut means = Matrix::zeros(num_classes, z.cols());
    let mut counts = vec![0usize; num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::IndexOutOfRange {
                index: c,
                len: num_classes,
            });
        }
        if skip.is_some_and(|s| s[i]) {
            continue;
        }
        counts[c] += 1;
        for (m, v) in means.row_mut(c).iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let inv = 1.0 / n as f64;
            means.row_mut(c).iter_mut().for_each(|m| *m *= inv);
        }
    }
    Ok(ClassMeans {
        means,
        present: counts.iter().map(|&n| n > 0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    mu: Matrix,
    alpha: f64,
    initialized: Vec<bool>,
    degenerate_updates: usize,
}

impl CentroidBank {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            mu: Matrix::zeros(num_classes, dim),
            alpha,
            initialized: vec![false; num_classes],
            degenerate_updates: 0,
        })
    }

    pub fn centroids(&self) -> &Matrix {
        &self.mu
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        self.mu.row(class)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn is_warm(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    /// Number of blends skipped because they had (near) zero norm.
    pub fn degenerate_updates(&self) -> usize {
        self.degenerate_updates
    }

    /// `μ_c ← normalize(α μ_c + (1−α) v_c)` for every present class. Blends
    /// with norm `<= ZERO_NORM_EPS` leave the centroid unchanged.
    pub fn update(&mut self, batch: &ClassMeans) -> Result<()> {
        if batch.means.rows() != self.mu.rows() || batch.means.cols() != self.mu.cols() {
            return Err(Error::Shape(format!(
                "class means are {}x{}, bank is {}x{}",
                batch.means.rows(),
                batch.means.cols(),
                self.mu.rows(),
                self.mu.cols()
            )));
        }
        let a = self.alpha;
        for c in 0..self.mu.rows() {
            if !batch.present[c] {
                continue;
            }
            // From a zero centroid the blend is (1−α)·v; normalizing v itself
            // gives the same direction without the rounding of the scale.
            let blend: Vec<f64> = if self.initialized[c] {
                self.mu
                    .row(c)
                    .iter()
                    .zip(batch.means.row(c))
                    .map(|(m, v)| a * m + (1.0 - a) * v)
                    .collect()
            } else {
                batch.means.row(c).to_vec()
            };
            let norm = l2_norm(&blend);
            if !(norm > ZERO_NORM_EPS) {
                self.degenerate_updates += 1;
                log::debug!("skipping zero-norm centroid blend for class {c}");
                continue;
            }
            for (m, b) in self.mu.row_mut(c).iter_mut().zip(&blend) {
                *m = b / norm;
            }
            self.initialized[c] = true;
        }
        Ok(())
    }

    /// Class with the largest inner product against each row of `z` (ties to
    /// the lowest class).
    pub fn assign(&self, z: &Matrix) -> Result<Vec<usize>> {
        if !self.is_warm() {
            return Err(Error::BankNotWarm);
        }
        if z.cols() != self.mu.cols() {
            return Err(Error::Shape(format!(
                "features have {} columns, centroids {}",
                z.cols(),
                self.mu.cols()
            )));
        }
        Ok(z
            .iter_rows()
            .map(|zi| {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for (c, mu) in self.mu.iter_rows().enumerate() {
                    let s = dot(zi, mu);
                    if s > best_score {
                        best = c;
                        best_score = s;
                    }
                }
                best
            })
            .collect())
    }
}

/// One-hot rows for `labels`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &c) in labels.iter().enumerate() {
        m[(i, c)] = 1.0;
    }
    m
}

/// One-hot prototypical labels for each row of `z`.
pub fn prototype_assign(bank: &CentroidBank, z: &Matrix) -> Result<Matrix> {
    let labels = bank.assign(z)?;
    Ok(one_hot(&labels, bank.centroids().rows()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelStore {
    q: Matrix,
    beta: f64,
    counts: Vec<u64>,
}

impl SoftLabelStore {
    pub fn new(num_instances: usize, num_classes: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        Ok(Self {
            q: Matrix::zeros(num_instances, num_classes),
            beta,
            counts: vec![0; num_instances],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn soft_labels(&self) -> &Matrix {
        &self.q
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.q.row(i)
    }

    pub fn update_count(&self, i: usize) -> u64 {
        self.counts[i]
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.counts
    }

    /// Rows of the listed instances, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<Matrix> {
        self.check(indices)?;
        Ok(self.q.select_rows(indices))
    }

    fn check(&self, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| i >= self.len()) {
            Some(&index) => Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            }),
            None => Ok(()),
        }
    }

    /// `q_i ← β q_i + (1−β) ỹ_i` and `t_i += 1` for each listed instance.
    pub fn update(&mut self, indices: &[usize], assignments: &Matrix) -> Result<()> {
        if assignments.rows() != indices.len() || assignments.cols() != self.q.cols() {
            return Err(Error::Shape(format!(
                "{}x{} assignments for {} instances of {} classes",
                assignments.rows(),
                assignments.cols(),
                indices.len(),
                self.q.cols()
            )));
        }
        self.check(indices)?;
        let b = self.beta;
        for (row, &i) in indices.iter().enumerate() {
            for (q, y) in self.q.row_mut(i).iter_mut().zip(assignments.row(row)) {
                *q = b * *q + (1.0 - b) * y;
            }
            self.counts[i] += 1;
        }
        Ok(())
    }

    /// Snapshot as CSV: `index,t,q0,...,q{C-1}`, one row per instance.
    /// `index_map` translates store positions to dataset indices.
    pub fn write_csv(&self, path: impl AsRef<Path>, index_map: Option<&[usize]>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("index,t");
        for c in 0..self.q.cols() {
            out.push_str(&format!(",q{c}"));
        }
        out.push('\n');
        for (i, row) in self.q.iter_rows().enumerate() {
            let idx = index_map.map_or(i, |m| m[i]);
            out.push_str(&format!("{idx},{}", self.counts[i]));
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
