//! Final-stage detectors operating on per-sample feature rows.
//!
//! Features are plain `f64` rows; labels are `0` (clean or noisy, class 1 of
//! the detection protocol) and `1` (adversarial, class 2). Every detector
//! produces a [`DetectionScore`] where larger means more adversarial.

// `!(x > 0.0)` is how parameter checks reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod forest;
mod isolation;
mod metrics;
mod svm;

pub use error::{DetectError, Result};
pub use forest::{fit_random_forest, ForestParams, RandomForestModel, TreeNode};
pub use isolation::{
    anomaly_score, average_path_length, fit_isolation_forest, harmonic, IsolationForestModel, IsolationNode,
    IsolationParams,
};
pub use metrics::auroc;
pub use svm::{fit_linear_svm, grid_search_cv, GridSearchResult, LinearSvmModel, Standardizer, SvmParams};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    LinearSvm,
    RandomForest,
    IsolationForest,
}

/// Per-sample detector output; higher means more adversarial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub kind: DetectorKind,
    pub values: Vec<f64>,
}

/// Deterministic per-index seed derivation (SplitMix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let first = rows.first().ok_or(DetectError::Empty)?;
    let d = first.len();
    if d == 0 {
        return Err(DetectError::Shape("feature rows have no columns".into()));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(DetectError::Shape(format!("row {i} has {} columns, expected {d}", r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DetectError::Shape("non-finite feature value".into()));
    }
    Ok(d)
}

pub(crate) fn check_labels(labels: &[u8], n: usize) -> Result<(usize, usize)> {
    if labels.len() != n {
        return Err(DetectError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(DetectError::Label(bad));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    Ok((n - positives, positives))
}
