use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{check_rows, derive_seed, DetectError, DetectionScore, DetectorKind, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationParams {
    pub trees: usize,
    /// Subsample size ψ per tree.
    pub subsample: usize,
    pub seed: u64,
}

impl Default for IsolationParams {
    fn default() -> Self {
        IsolationParams { trees: 100, subsample: 256, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum IsolationNode {
    External {
        size: usize,
    },
    Internal {
        feature: usize,
        threshold: f64,
        left: Box<IsolationNode>,
        right: Box<IsolationNode>,
    },
}

impl IsolationNode {
    /// Path length of `row`, with `c(size)` added at the external node.
    pub fn path_length(&self, row: &[f64]) -> f64 {
        let mut node = self;
        let mut depth = 0.0;
        loop {
            match node {
                IsolationNode::External { size } => return depth + average_path_length(*size),
                IsolationNode::Internal { feature, threshold, left, right } => {
                    node = if row[*feature] < *threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// `H(n) = Σ_{i=1..n} 1/i`, summed from the small end.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).rev().map(|i| 1.0 / i as f64).sum()
}

/// Expected unsuccessful-search path length in a binary search tree of `n`
/// keys: `c(n) = 2·H(n−1) − 2(n−1)/n`, with `c(0) = c(1) = 0`.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    2.0 * harmonic(n - 1) - 2.0 * m / n as f64
}

/// `s = 2^(−E[h]/c(ψ))`.
pub fn anomaly_score(mean_path: f64, psi: usize) -> f64 {
    (-mean_path / average_path_length(psi)).exp2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub trees: Vec<IsolationNode>,
    /// Effective ψ after clamping to the training size.
    pub subsample: usize,
    pub c_psi: f64,
    pub features: usize,
    pub params: IsolationParams,
}

impl IsolationForestModel {
    pub fn mean_path_length(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn score(&self, rows: &[Vec<f64>]) -> Result<DetectionScore> {
        let d = check_rows(rows)?;
        if d != self.features {
            return Err(DetectError::Shape(format!("model has {} features, rows have {d}", self.features)));
        }
        let values = rows
            .iter()
            .map(|r| (-self.mean_path_length(r) / self.c_psi).exp2())
            .collect();
        Ok(DetectionScore { kind: DetectorKind::IsolationForest, values })
    }
}

fn grow(rows: &[Vec<f64>], idx: &[usize], depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> IsolationNode {
    if depth >= limit || idx.len() <= 1 {
        return IsolationNode::External { size: idx.len() };
    }
    let d = rows[0].len();
    let ranges: Vec<(usize, f64, f64)> = (0..d)
        .filter_map(|f| {
            let (lo, hi) = idx
                .iter()
                .map(|&i| rows[i][f])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (hi > lo).then_some((f, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        return IsolationNode::External { size: idx.len() };
    }
    let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let mut threshold = rng.random_range(lo..hi);
    if threshold <= lo {
        threshold = 0.5 * (lo + hi);
    }
    let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][feature] < threshold);
    IsolationNode::Internal {
        feature,
        threshold,
        left: Box::new(grow(rows, &l, depth + 1, limit, rng)),
        right: Box::new(grow(rows, &r, depth + 1, limit, rng)),
    }
}

/// Isolation forest on clean training rows. Each tree sees `ψ` rows drawn
/// without replacement and is grown to depth `⌈log₂ ψ⌉`. The split feature is
/// drawn among the features that are non-constant in the node.
pub fn fit_isolation_forest(rows: &[Vec<f64>], params: IsolationParams) -> Result<IsolationForestModel> {
    let d = check_rows(rows)?;
    if rows.len() < 2 {
        return Err(DetectError::Param(format!("isolation forest needs at least 2 samples, got {}", rows.len())));
    }
    if params.trees == 0 || params.subsample < 2 {
        return Err(DetectError::Param(format!("invalid isolation forest parameters {params:?}")));
    }
    let psi = if params.subsample > rows.len() {
        log::warn!("subsample size {} exceeds {} training rows; clamping", params.subsample, rows.len());
        rows.len()
    } else {
        params.subsample
    };
    let limit = (psi as f64).log2().ceil() as usize;
    let trees = (0..params.trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, t as u64));
            let idx = sample(&mut rng, rows.len(), psi).into_vec();
            grow(rows, &idx, 0, limit, &mut rng)
        })
        .collect();
    Ok(IsolationForestModel { trees, subsample: psi, c_psi: average_path_length(psi), features: d, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_and_c_small_values() {
        assert_eq!(harmonic(1), 1.0);
        assert!((harmonic(3) - 11.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_path_length(1), 0.0);
        // c(2) = 2·H(1) − 1 = 1
        assert!((average_path_length(2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn expected_path_equal_to_c_scores_one_half() {
        for psi in [2, 16, 256] {
            assert!((anomaly_score(average_path_length(psi), psi) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn psi_is_clamped() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let m = fit_isolation_forest(&rows, IsolationParams { trees: 5, subsample: 256, seed: 1 }).unwrap();
        assert_eq!(m.subsample, 10);
        assert_eq!(m.c_psi, average_path_length(10));
    }

    #[test]
    fn rejects_tiny_training_sets() {
        assert!(matches!(fit_isolation_forest(&[], IsolationParams::default()), Err(DetectError::Empty)));
        assert!(fit_isolation_forest(&[vec![1.0]], IsolationParams::default()).is_err());
    }
}
