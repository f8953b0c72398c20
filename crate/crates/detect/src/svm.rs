use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::auroc;
use crate::{check_labels, check_rows, DetectError, DetectionScore, DetectorKind, Result};

/// Per-column affine map to zero mean and unit variance. Constant columns
/// keep `std = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = check_rows(rows)?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 && sd.is_finite() { sd } else { 1.0 }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    /// Inverse regularization strength: the penalty is `‖w‖² / (2C)`.
    pub c: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { c: 1.0, epochs: 300, learning_rate: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
    pub params: SvmParams,
}

impl LinearSvmModel {
    /// Signed margin `w·x̃ + b` on the standardized row.
    pub fn decision(&self, row: &[f64]) -> f64 {
        let z = self.standardizer.apply(row);
        z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }

    pub fn score(&self, rows: &[Vec<f64>]) -> Result<DetectionScore> {
        let d = check_rows(rows)?;
        if d != self.weights.len() {
            return Err(DetectError::Shape(format!("model has {} features, rows have {d}", self.weights.len())));
        }
        Ok(DetectionScore { kind: DetectorKind::LinearSvm, values: rows.iter().map(|r| self.decision(r)).collect() })
    }
}

fn objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let hinge: f64 = z
        .iter()
        .zip(y)
        .map(|(r, &t)| (1.0 - t * (r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b)).max(0.0))
        .sum::<f64>()
        / z.len() as f64;
    hinge + w.iter().map(|v| v * v).sum::<f64>() / (2.0 * c)
}

/// Fits a linear max-margin classifier by full-batch subgradient descent on
/// `mean hinge + ‖w‖²/(2C)` over standardized features, with step size
/// `min(lr/√(t+1), C)` so the shrinkage factor `1 − step/C` stays in `[0, 1)`.
/// The iterate with the lowest objective is returned.
pub fn fit_linear_svm(rows: &[Vec<f64>], labels: &[u8], params: SvmParams) -> Result<LinearSvmModel> {
    let d = check_rows(rows)?;
    let (negatives, positives) = check_labels(labels, rows.len())?;
    if negatives == 0 || positives == 0 {
        return Err(DetectError::SingleClass { negatives, positives });
    }
    if !(params.c > 0.0) || !(params.learning_rate > 0.0) || params.epochs == 0 {
        return Err(DetectError::Param(format!("invalid SVM parameters {params:?}")));
    }
    let standardizer = Standardizer::fit(rows)?;
    let z: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let n = z.len() as f64;

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best = (objective(&z, &y, &w, b, params.c), w.clone(), b);
    let mut gw = vec![0.0; d];
    for t in 0..params.epochs {
        gw.iter_mut().zip(&w).for_each(|(g, wi)| *g = wi / params.c);
        let mut gb = 0.0;
        for (r, &target) in z.iter().zip(&y) {
            let margin = target * (r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
            if margin < 1.0 {
                for (g, v) in gw.iter_mut().zip(r) {
                    *g -= target * v / n;
                }
                gb -= target / n;
            }
        }
        let step = (params.learning_rate / ((t + 1) as f64).sqrt()).min(params.c);
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= step * g);
        b -= step * gb;
        let obj = objective(&z, &y, &w, b, params.c);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
    }
    Ok(LinearSvmModel { weights: best.1, bias: best.2, standardizer, params })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_c: f64,
    /// `(C, mean fold AUROC)` in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Stratified k-fold cross-validation over `c_grid`, maximizing mean fold
/// AUROC. Ties go to the smallest `C`.
pub fn grid_search_cv(
    rows: &[Vec<f64>],
    labels: &[u8],
    c_grid: &[f64],
    folds: usize,
    base: SvmParams,
    seed: u64,
) -> Result<GridSearchResult> {
    check_rows(rows)?;
    let (negatives, positives) = check_labels(labels, rows.len())?;
    if c_grid.is_empty() {
        return Err(DetectError::Param("empty C grid".into()));
    }
    let min_class = negatives.min(positives);
    if folds < 2 || folds > min_class {
        return Err(DetectError::Folds { folds, min_class });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; rows.len()];
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }

    let mut scores = Vec::with_capacity(c_grid.len());
    for &c in c_grid {
        let params = SvmParams { c, ..base };
        let mut total = 0.0;
        for fold in 0..folds {
            let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
            for (i, r) in rows.iter().enumerate() {
                if fold_of[i] == fold {
                    test_x.push(r.clone());
                    test_y.push(labels[i]);
                } else {
                    train_x.push(r.clone());
                    train_y.push(labels[i]);
                }
            }
            let model = fit_linear_svm(&train_x, &train_y, params)?;
            total += auroc(&model.score(&test_x)?.values, &test_y)?;
        }
        scores.push((c, total / folds as f64));
    }

    let mut ordered = scores.clone();
    ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = ordered[0];
    for &(c, s) in &ordered[1..] {
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(GridSearchResult { best_c: best.0, scores })
}
