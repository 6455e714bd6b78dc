//! Source-free inductive domain adaptation with dual moving-average
//! pseudo-labeling (DMAPL).
//!
//! A classifier is first trained on labeled source features. Adaptation then
//! only sees unlabeled target features: the source model splits them into a
//! confident subset with frozen pseudo-labels and a less-confident subset
//! whose soft labels are refined by two exponential moving averages (class
//! prototypes over normalized features, and per-instance label vectors).
//!
//! Module map:
//! - [`numkit`]: matrices, softmax, L2 normalization, seeded RNG.
//! - [`datasets`]: synthetic shifted domain pairs, CSV I/O, stratified splits.
//! - [`model`]: MLP encoder + bottleneck + linear head, backprop, SGD.
//! - [`splitter`]: confident / unconfident partition of the target set.
//! - [`pseudolabel`]: centroid bank and soft-label store.
//! - [`losses`]: labeled CE, soft CE, combined objective.
//! - [`trainer`]: source pre-training, adaptation, ablations, sweeps.
//! - [`eval`]: per-class, macro and micro accuracy.

// `!(x > eps)` is used on purpose so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod pipeline;
pub mod pseudolabel;
pub mod splitter;
pub mod trainer;

pub use error::{Error, Result};
