//! Detection-dataset protocol, splits and the analyses built on features.

use aelayers_detect::{auroc, derive_seed};
use aelayers_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AdversarialBatch, AttackKind, AttackSpec};
use crate::csvio::{parse_f64, parse_usize, Table};
use crate::error::{CoreError, Result};
use crate::features::Provenance;
use crate::net::Classifier;

/// One row of a detection dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionSample {
    /// `3·test_index + {0 clean, 1 noisy, 2 adversarial}`.
    pub id: u64,
    pub test_index: usize,
    pub provenance: Provenance,
    /// 0 for clean/noisy (class 1 of the protocol), 1 for adversarial (class 2).
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDataset {
    pub attack: AttackKind,
    pub samples: Vec<DetectionSample>,
    /// Inputs aligned with `samples`.
    pub inputs: Tensor<f32>,
}

impl DetectionDataset {
    pub fn classes(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.class).collect()
    }

    /// `(class 1 count, class 2 count)`
    pub fn counts(&self) -> (usize, usize) {
        let adv = self.samples.iter().filter(|s| s.class == 1).count();
        (self.samples.len() - adv, adv)
    }
}

/// Keeps clean and noisy samples that are classified correctly and
/// adversarial samples that are misclassified, in test-index order.
pub fn protocol_filter(
    labels: &[usize],
    pred_clean: &[usize],
    pred_noisy: &[usize],
    pred_adv: &[usize],
) -> Vec<DetectionSample> {
    let mut out = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let base = 3 * i as u64;
        if pred_clean[i] == y {
            out.push(DetectionSample { id: base, test_index: i, provenance: Provenance::Clean, class: 0 });
        }
        if pred_noisy[i] == y {
            out.push(DetectionSample { id: base + 1, test_index: i, provenance: Provenance::Noisy, class: 0 });
        }
        if pred_adv[i] != y {
            out.push(DetectionSample { id: base + 2, test_index: i, provenance: Provenance::Adversarial, class: 1 });
        }
    }
    out
}

/// `clip(x + u, 0, 1)` with `u ~ Uniform[−ε, ε]^D`, seeded per sample.
pub fn uniform_noise(x: &Tensor<f32>, epsilon: f32, seed: u64) -> Result<Tensor<f32>> {
    if !(epsilon >= 0.0) {
        return Err(CoreError::Config(format!("noise epsilon must be >= 0, got {epsilon}")));
    }
    let n = x.sample_len();
    let mut out = x.clone();
    if epsilon == 0.0 {
        return Ok(out);
    }
    for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        for v in row {
            *v = (*v + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Builds the clean/noisy vs. adversarial dataset for one attack. Returns the
/// raw attack output alongside it.
pub fn build_detection_dataset(
    model: &dyn Classifier,
    x: &Tensor<f32>,
    y: &[usize],
    spec: &AttackSpec,
    noise_epsilon: f32,
    noise_seed: u64,
) -> Result<(DetectionDataset, AdversarialBatch)> {
    let adv = run_attack(model, x, y, spec)?;
    let noisy = uniform_noise(x, noise_epsilon, noise_seed)?;
    let pred_noisy = model.predict(&noisy)?;
    let samples = protocol_filter(y, &adv.pred_clean, &pred_noisy, &adv.pred_adv);
    let dataset = assemble(spec.kind, samples, x, &noisy, &adv.perturbed)?;
    Ok((dataset, adv))
}

/// Gathers the inputs of `samples` from the three candidate tensors.
pub fn assemble(
    attack: AttackKind,
    samples: Vec<DetectionSample>,
    clean: &Tensor<f32>,
    noisy: &Tensor<f32>,
    adversarial: &Tensor<f32>,
) -> Result<DetectionDataset> {
    let (c1, c2) = (samples.iter().filter(|s| s.class == 0).count(), samples.iter().filter(|s| s.class == 1).count());
    if c1 == 0 || c2 == 0 {
        return Err(CoreError::Protocol(format!(
            "{attack}: detection dataset needs both classes, got {c1} clean/noisy and {c2} adversarial"
        )));
    }
    let n = clean.sample_len();
    let mut data = Vec::with_capacity(samples.len() * n);
    for s in &samples {
        let src = match s.provenance {
            Provenance::Clean => clean,
            Provenance::Noisy => noisy,
            _ => adversarial,
        };
        data.extend_from_slice(src.sample(s.test_index));
    }
    let mut shape = clean.shape().to_vec();
    shape[0] = samples.len();
    Ok(DetectionDataset { attack, samples, inputs: Tensor::new(shape, data)? })
}

/// Stratified split: per class `⌈n/10⌉` samples (at least one) go to the
/// training part, the rest to evaluation. Both outputs are sorted.
pub fn split_10_90(classes: &[u8], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for c in [0u8, 1] {
        let mut idx: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
        if idx.len() < 2 {
            return Err(CoreError::Protocol(format!("class {c} has {} samples; need at least 2 to split", idx.len())));
        }
        idx.shuffle(&mut rng);
        let k = idx.len().div_ceil(10).max(1);
        train.extend_from_slice(&idx[..k]);
        eval.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok((train, eval))
}

/// Random-forest importances aggregated by tap and by feature kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub taps: Vec<String>,
    /// `(rec_err, lat_norm)` per tap.
    pub raw: Vec<(f64, f64)>,
    pub per_tap: Vec<f64>,
    pub rec_err_total: f64,
    pub lat_norm_total: f64,
}

/// `importances` follow the compact layout: `rec_err, lat_norm` per tap.
pub fn layer_and_feature_importance(importances: &[f64], taps: &[String]) -> Result<ImportanceReport> {
    if importances.len() != 2 * taps.len() {
        return Err(CoreError::Config(format!(
            "{} importances do not match {} taps in compact layout",
            importances.len(),
            taps.len()
        )));
    }
    let raw: Vec<(f64, f64)> = importances.chunks(2).map(|c| (c[0], c[1])).collect();
    Ok(ImportanceReport {
        taps: taps.to_vec(),
        per_tap: raw.iter().map(|(a, b)| a + b).collect(),
        rec_err_total: raw.iter().map(|r| r.0).sum(),
        lat_norm_total: raw.iter().map(|r| r.1).sum(),
        raw,
    })
}

/// Features of one sample along `γ(ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub sample_id: u64,
    pub attack: AttackKind,
    pub epsilons: Vec<f64>,
    pub taps: Vec<String>,
    /// `[ε][tap]`
    pub rec_err: Vec<Vec<f64>>,
    /// `[ε][tap]`
    pub lat_norm: Vec<Vec<f64>>,
}

pub fn trajectories_to_table(records: &[TrajectoryRecord]) -> Table {
    let mut t = Table::new(["sample_id", "attack", "epsilon", "tap", "rec_err", "lat_norm"]);
    for r in records {
        for (e, eps) in r.epsilons.iter().enumerate() {
            for (k, tap) in r.taps.iter().enumerate() {
                t.push(vec![
                    r.sample_id.to_string(),
                    r.attack.to_string(),
                    eps.to_string(),
                    tap.clone(),
                    r.rec_err[e][k].to_string(),
                    r.lat_norm[e][k].to_string(),
                ]);
            }
        }
    }
    t
}

/// Inverse of [`trajectories_to_table`]; rows must be grouped by sample and
/// ordered by ε then tap, as written.
pub fn trajectories_from_table(t: &Table) -> Result<Vec<TrajectoryRecord>> {
    let col = |n| t.column(n);
    let (ci, ca, ce, ct, cr, cl) =
        (col("sample_id")?, col("attack")?, col("epsilon")?, col("tap")?, col("rec_err")?, col("lat_norm")?);
    let mut out: Vec<TrajectoryRecord> = Vec::new();
    for row in &t.rows {
        let id = parse_usize(&row[ci])? as u64;
        let eps = parse_f64(&row[ce])?;
        if out.last().is_none_or(|r| r.sample_id != id) {
            out.push(TrajectoryRecord {
                sample_id: id,
                attack: row[ca].parse()?,
                epsilons: vec![],
                taps: vec![],
                rec_err: vec![],
                lat_norm: vec![],
            });
        }
        let rec = out.last_mut().expect("just pushed");
        let tap = &row[ct];
        // A block of tap rows per ε; the first tap name opens the next block.
        if rec.rec_err.is_empty() || rec.taps.first() == Some(tap) {
            rec.epsilons.push(eps);
            rec.rec_err.push(vec![]);
            rec.lat_norm.push(vec![]);
        }
        if rec.epsilons.len() == 1 {
            rec.taps.push(tap.clone());
        }
        rec.rec_err.last_mut().expect("row").push(parse_f64(&row[cr])?);
        rec.lat_norm.last_mut().expect("row").push(parse_f64(&row[cl])?);
    }
    Ok(out)
}

fn relative_increase(v0: f64, v1: f64) -> f64 {
    (v1 - v0) / v0.max(f64::MIN_POSITIVE)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Hypothesis 1 effect size per tap: median over samples of the relative
/// rec_err increase minus the relative lat_norm increase between the first
/// and last grid points.
pub fn h1_statistic(records: &[TrajectoryRecord]) -> Vec<f64> {
    let Some(first) = records.first() else { return vec![] };
    (0..first.taps.len())
        .map(|k| {
            median(
                records
                    .iter()
                    .map(|r| {
                        let last = r.epsilons.len() - 1;
                        relative_increase(r.rec_err[0][k], r.rec_err[last][k])
                            - relative_increase(r.lat_norm[0][k], r.lat_norm[last][k])
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Direction-free AUROC `max(a, 1 − a)`.
pub fn separability(a: f64) -> f64 {
    a.max(1.0 - a)
}

/// Hypothesis 2 depth profile: per tap, the best direction-free
/// single-feature AUROC among its rec_err and lat_norm columns.
/// `rec_err` and `lat_norm` are indexed `[tap][sample]`.
pub fn h2_profile(rec_err: &[Vec<f64>], lat_norm: &[Vec<f64>], classes: &[u8]) -> Result<Vec<f64>> {
    rec_err
        .iter()
        .zip(lat_norm)
        .map(|(r, l)| Ok(separability(auroc(r, classes)?).max(separability(auroc(l, classes)?))))
        .collect()
}

/// Regular grid over `[x0,x1] × [y0,y1]` with cell-centered sample points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub x0: f64,
    pub x1: f64,
    pub nx: usize,
    pub y0: f64,
    pub y1: f64,
    pub ny: usize,
}

impl Grid2 {
    pub fn cell_area(&self) -> f64 {
        (self.x1 - self.x0) / self.nx as f64 * (self.y1 - self.y0) / self.ny as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + (i as f64 + 0.5) * (self.x1 - self.x0) / self.nx as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        self.y0 + (j as f64 + 0.5) * (self.y1 - self.y0) / self.ny as f64
    }
}

/// Gaussian product-kernel density at the grid points, `[ny][nx]`.
pub fn kde2d_grid(points: &[(f64, f64)], bandwidth: (f64, f64), grid: &Grid2) -> Result<Vec<Vec<f64>>> {
    if !(bandwidth.0 > 0.0 && bandwidth.1 > 0.0) {
        return Err(CoreError::Config("KDE bandwidth must be positive".into()));
    }
    if points.is_empty() || grid.nx == 0 || grid.ny == 0 || !(grid.x1 > grid.x0 && grid.y1 > grid.y0) {
        return Err(CoreError::Config("KDE needs points and a non-degenerate grid".into()));
    }
    let norm = 1.0 / (points.len() as f64 * std::f64::consts::TAU * bandwidth.0 * bandwidth.1);
    Ok((0..grid.ny)
        .map(|j| {
            let y = grid.y(j);
            (0..grid.nx)
                .map(|i| {
                    let x = grid.x(i);
                    norm * points
                        .iter()
                        .map(|&(px, py)| {
                            let (dx, dy) = ((x - px) / bandwidth.0, (y - py) / bandwidth.1);
                            (-0.5 * (dx * dx + dy * dy)).exp()
                        })
                        .sum::<f64>()
                })
                .collect()
        })
        .collect())
}

pub fn kde_to_table(density: &[Vec<f64>], grid: &Grid2) -> Table {
    let mut t = Table::new(["x", "y", "density"]);
    for (j, row) in density.iter().enumerate() {
        for (i, d) in row.iter().enumerate() {
            t.push(vec![grid.x(i).to_string(), grid.y(j).to_string(), d.to_string()]);
        }
    }
    t
}

/// Writes the per-sample attack manifest.
pub fn adversarial_manifest(batch: &AdversarialBatch) -> Table {
    let mut t = Table::new(["sample_id", "true_label", "pred_clean", "pred_adv", "success", "linf", "l2"]);
    for i in 0..batch.labels.len() {
        t.push(vec![
            i.to_string(),
            batch.labels[i].to_string(),
            batch.pred_clean[i].to_string(),
            batch.pred_adv[i].to_string(),
            u8::from(batch.success[i]).to_string(),
            batch.linf[i].to_string(),
            batch.l2[i].to_string(),
        ]);
    }
    t
}

pub fn scores_table(ids: &[u64], scores: &[f64], labels: &[u8]) -> Table {
    let mut t = Table::new(["sample_id", "score", "label"]);
    for ((id, s), l) in ids.iter().zip(scores).zip(labels) {
        t.push(vec![id.to_string(), s.to_string(), l.to_string()]);
    }
    t
}
