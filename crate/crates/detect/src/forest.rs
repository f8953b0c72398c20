use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{check_labels, check_rows, derive_seed, DetectError, DetectionScore, DetectorKind, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `⌈√d⌉`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { trees: 100, max_depth: 12, min_samples_split: 2, max_features: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        /// Fraction of class-1 samples reaching the leaf.
        prob: f64,
        count: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { prob, .. } => return *prob,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn split_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.split_count() + right.split_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub trees: Vec<TreeNode>,
    pub params: ForestParams,
    pub features: usize,
    /// Raw weighted Gini decrease per feature, summed over trees.
    pub impurity_decrease: Vec<f64>,
}

impl RandomForestModel {
    /// Mean class-1 leaf fraction over trees.
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn score(&self, rows: &[Vec<f64>]) -> Result<DetectionScore> {
        let d = check_rows(rows)?;
        if d != self.features {
            return Err(DetectError::Shape(format!("model has {} features, rows have {d}", self.features)));
        }
        Ok(DetectionScore {
            kind: DetectorKind::RandomForest,
            values: rows.iter().map(|r| self.predict_proba(r)).collect(),
        })
    }

    /// Normalized impurity-decrease importances. A forest without any split
    /// reports uniform weights.
    pub fn importances(&self) -> Vec<f64> {
        let total: f64 = self.impurity_decrease.iter().sum();
        if total > 0.0 {
            self.impurity_decrease.iter().map(|v| v / total).collect()
        } else {
            log::warn!("random forest has no splits; reporting uniform importances");
            vec![1.0 / self.features as f64; self.features]
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [u8],
    params: &'a ForestParams,
    mtry: usize,
    total: f64,
    decrease: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let pos = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        TreeNode::Leaf { prob: pos as f64 / idx.len() as f64, count: idx.len() }
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> TreeNode {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        if depth >= self.params.max_depth || n < self.params.min_samples_split.max(2) || pos == 0 || pos == n {
            return self.leaf(idx);
        }
        let parent = gini(pos, n);
        let d = self.decrease.len();

        // (weighted child impurity, feature, threshold)
        let mut best: Option<(f64, usize, f64)> = None;
        let mut values: Vec<(f64, u8)> = Vec::with_capacity(n);
        for feature in sample(&mut self.rng, d, self.mtry).into_iter() {
            values.clear();
            values.extend(idx.iter().map(|&i| (self.rows[i][feature], self.labels[i])));
            values.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for k in 1..n {
                left_pos += usize::from(values[k - 1].1);
                if values[k].0 <= values[k - 1].0 {
                    continue;
                }
                let right_pos = pos - left_pos;
                let child = (k as f64 * gini(left_pos, k) + (n - k) as f64 * gini(right_pos, n - k)) / n as f64;
                if best.is_none_or(|b| child < b.0) {
                    best = Some((child, feature, 0.5 * (values[k - 1].0 + values[k].0)));
                }
            }
        }
        let Some((child, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        if child >= parent {
            return self.leaf(idx);
        }
        self.decrease[feature] += n as f64 / self.total * (parent - child);

        let mut split = 0;
        for k in 0..n {
            if self.rows[idx[k]][feature] <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = idx.split_at_mut(split);
        let left = Box::new(self.build(l, depth + 1));
        let right = Box::new(self.build(r, depth + 1));
        TreeNode::Split { feature, threshold, left, right }
    }
}

/// Bagged CART trees with Gini splits and per-split feature subsampling.
/// Tree `t` draws its bootstrap and feature subsets from a seed derived from
/// `(params.seed, t)`.
pub fn fit_random_forest(rows: &[Vec<f64>], labels: &[u8], params: ForestParams) -> Result<RandomForestModel> {
    let d = check_rows(rows)?;
    check_labels(labels, rows.len())?;
    if params.trees == 0 {
        return Err(DetectError::Param("random forest needs at least one tree".into()));
    }
    let mtry = params
        .max_features
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d);
    let n = rows.len();
    let mut impurity_decrease = vec![0.0; d];
    let mut trees = Vec::with_capacity(params.trees);
    for t in 0..params.trees {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, t as u64));
        let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut b = Builder {
            rows,
            labels,
            params: &params,
            mtry,
            total: n as f64,
            decrease: vec![0.0; d],
            rng,
        };
        trees.push(b.build(&mut idx, 0));
        for (acc, v) in impurity_decrease.iter_mut().zip(&b.decrease) {
            *acc += v;
        }
    }
    Ok(RandomForestModel { trees, params, features: d, impurity_decrease })
}
