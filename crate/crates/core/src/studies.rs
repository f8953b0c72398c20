//! Detector evaluation on feature sets and the follow-up studies.

use aelayers_detect::{
    auroc, fit_isolation_forest, fit_linear_svm, fit_random_forest, grid_search_cv, ForestParams, IsolationParams,
    SvmParams,
};
use serde::{Deserialize, Serialize};

use crate::attack::{epsilon_sweep, AttackKind, AttackSpec};
use crate::error::{CoreError, Result};
use crate::eval::{build_detection_dataset, layer_and_feature_importance, split_10_90, ImportanceReport, TrajectoryRecord};
use crate::features::{extract_feature_set, AeBank, FeatureSet, Provenance, Representation};
use crate::net::Network;
use aelayers_tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub svm: SvmParams,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub forest: ForestParams,
    pub isolation: IsolationParams,
    pub split_seed: u64,
    pub cv_seed: u64,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            svm: SvmParams::default(),
            c_grid: vec![0.01, 0.1, 1.0, 10.0],
            folds: 5,
            forest: ForestParams::default(),
            isolation: IsolationParams::default(),
            split_seed: 0,
            cv_seed: 0,
        }
    }
}

/// Features of one detection dataset together with its 10/90 split.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFeatures {
    pub attack: AttackKind,
    pub features: FeatureSet,
    pub classes: Vec<u8>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl DetectionFeatures {
    pub fn new(attack: AttackKind, features: FeatureSet, classes: Vec<u8>, split_seed: u64) -> Result<Self> {
        let (train, eval) = split_10_90(&classes, split_seed)?;
        Ok(DetectionFeatures { attack, features, classes, train, eval })
    }

    fn part(&self, rep: Representation, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<u8>) {
        let rows = self.features.rows(rep);
        (idx.iter().map(|&i| rows[i].clone()).collect(), idx.iter().map(|&i| self.classes[i]).collect())
    }

    pub fn train_part(&self, rep: Representation) -> (Vec<Vec<f64>>, Vec<u8>) {
        self.part(rep, &self.train)
    }

    pub fn eval_part(&self, rep: Representation) -> (Vec<Vec<f64>>, Vec<u8>) {
        self.part(rep, &self.eval)
    }
}

/// Cross-validation folds, reduced when a class has fewer training samples.
fn feasible_folds(labels: &[u8], wanted: usize) -> usize {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    wanted.min(pos).min(labels.len() - pos)
}

/// Grid-searched linear SVM fit on the training rows.
pub fn fit_supervised(rows: &[Vec<f64>], labels: &[u8], s: &DetectorSettings) -> Result<aelayers_detect::LinearSvmModel> {
    let folds = feasible_folds(labels, s.folds);
    let c = if folds >= 2 && s.c_grid.len() > 1 {
        grid_search_cv(rows, labels, &s.c_grid, folds, s.svm, s.cv_seed)?.best_c
    } else {
        if s.c_grid.len() > 1 {
            log::warn!("too few training samples for cross-validation; using C = {}", s.c_grid[0]);
        }
        *s.c_grid.first().unwrap_or(&s.svm.c)
    };
    Ok(fit_linear_svm(rows, labels, SvmParams { c, ..s.svm })?)
}

/// Detector scores on the evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub sample_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub auroc: f64,
}

impl SplitScores {
    fn new(d: &DetectionFeatures, scores: Vec<f64>) -> Result<Self> {
        let labels: Vec<u8> = d.eval.iter().map(|&i| d.classes[i]).collect();
        let auroc = auroc(&scores, &labels)?;
        Ok(SplitScores { sample_ids: d.eval.iter().map(|&i| d.features.sample_ids[i]).collect(), scores, labels, auroc })
    }
}

/// SVM trained on the 10% split and scored on the 90% split.
pub fn supervised_scores(d: &DetectionFeatures, rep: Representation, s: &DetectorSettings) -> Result<SplitScores> {
    let (xt, yt) = d.train_part(rep);
    let (xe, _) = d.eval_part(rep);
    let model = fit_supervised(&xt, &yt, s)?;
    SplitScores::new(d, model.score(&xe)?.values)
}

pub fn supervised_auroc(d: &DetectionFeatures, rep: Representation, s: &DetectorSettings) -> Result<f64> {
    Ok(supervised_scores(d, rep, s)?.auroc)
}

/// Isolation forest fit on clean training rows, scored on the 90% split.
pub fn unsupervised_scores(
    clean_train: &FeatureSet,
    d: &DetectionFeatures,
    rep: Representation,
    s: &DetectorSettings,
) -> Result<SplitScores> {
    if clean_train.provenance.iter().any(|&p| p != Provenance::Clean) {
        return Err(CoreError::Protocol("one-class detector offered non-clean training rows".into()));
    }
    let model = fit_isolation_forest(&clean_train.rows(rep), s.isolation)?;
    let (xe, _) = d.eval_part(rep);
    SplitScores::new(d, model.score(&xe)?.values)
}

pub fn unsupervised_auroc(
    clean_train: &FeatureSet,
    d: &DetectionFeatures,
    rep: Representation,
    s: &DetectorSettings,
) -> Result<f64> {
    Ok(unsupervised_scores(clean_train, d, rep, s)?.auroc)
}

/// Random forest on compact features of the training split; importances
/// aggregated per tap and per feature kind.
pub fn importance_report(d: &DetectionFeatures, s: &DetectorSettings) -> Result<ImportanceReport> {
    let (xt, yt) = d.train_part(Representation::Both);
    let rf = fit_random_forest(&xt, &yt, s.forest)?;
    layer_and_feature_importance(&rf.importances(), &d.features.taps)
}

/// Direction-free single-feature AUROC per tap on the evaluation split.
pub fn depth_profile(d: &DetectionFeatures) -> Result<Vec<f64>> {
    let pick = |v: &[f64]| d.eval.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let rec: Vec<Vec<f64>> = d.features.outputs.iter().map(|o| pick(&o.rec_err)).collect();
    let lat: Vec<Vec<f64>> = d.features.outputs.iter().map(|o| pick(&o.lat_norm)).collect();
    let ye: Vec<u8> = d.eval.iter().map(|&i| d.classes[i]).collect();
    crate::eval::h2_profile(&rec, &lat, &ye)
}

/// Feature set of a detection dataset built from `(x, y)`.
#[allow(clippy::too_many_arguments)]
pub fn detection_features(
    net: &Network,
    bank: &AeBank,
    x: &Tensor<f32>,
    y: &[usize],
    spec: &AttackSpec,
    noise_epsilon: f32,
    noise_seed: u64,
    split_seed: u64,
) -> Result<DetectionFeatures> {
    let (ds, _) = build_detection_dataset(net, x, y, spec, noise_epsilon, noise_seed)?;
    let ids = ds.samples.iter().map(|s| s.id).collect();
    let prov = ds.samples.iter().map(|s| s.provenance).collect();
    let fs = extract_feature_set(net, bank, &ds.inputs, ids, prov)?;
    DetectionFeatures::new(spec.kind, fs, ds.classes(), split_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdIterationRow {
    pub iterations: usize,
    pub auroc: f64,
    pub success_rate: f64,
}

/// Unsupervised AUROC of PGD detection per iteration count. The step size is
/// `2.5·ε/iterations`. The trend is reported, not enforced.
#[allow(clippy::too_many_arguments)]
pub fn pgd_iteration_study(
    net: &Network,
    bank: &AeBank,
    x: &Tensor<f32>,
    y: &[usize],
    clean_train: &FeatureSet,
    iterations: &[usize],
    base: &AttackSpec,
    noise_seed: u64,
    s: &DetectorSettings,
) -> Result<Vec<PgdIterationRow>> {
    iterations
        .iter()
        .map(|&n| {
            let spec = AttackSpec {
                kind: AttackKind::Pgd,
                steps: n,
                step_size: 2.5 * base.epsilon / n.max(1) as f32,
                ..base.clone()
            };
            let (ds, adv) = build_detection_dataset(net, x, y, &spec, base.epsilon, noise_seed)?;
            let ids = ds.samples.iter().map(|s| s.id).collect();
            let prov = ds.samples.iter().map(|s| s.provenance).collect();
            let fs = extract_feature_set(net, bank, &ds.inputs, ids, prov)?;
            let d = DetectionFeatures::new(AttackKind::Pgd, fs, ds.classes(), s.split_seed)?;
            Ok(PgdIterationRow {
                iterations: n,
                auroc: unsupervised_auroc(clean_train, &d, Representation::Both, s)?,
                success_rate: adv.success_rate(),
            })
        })
        .collect()
}

/// Whether the AUROC sequence never decreases by more than `tolerance`.
pub fn is_nondecreasing(rows: &[PgdIterationRow], tolerance: f64) -> bool {
    rows.windows(2).all(|w| w[1].auroc + tolerance >= w[0].auroc)
}

/// Supervised detector fit once on the FGSM training split, evaluated on the
/// evaluation split of every dataset in `targets`.
pub fn transfer_study(
    source: &DetectionFeatures,
    targets: &[&DetectionFeatures],
    rep: Representation,
    s: &DetectorSettings,
) -> Result<Vec<(AttackKind, f64)>> {
    let (xt, yt) = source.train_part(rep);
    let model = fit_supervised(&xt, &yt, s)?;
    targets
        .iter()
        .map(|d| {
            let (xe, ye) = d.eval_part(rep);
            Ok((d.attack, auroc(&model.score(&xe)?.values, &ye)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub representation: Representation,
    pub columns: usize,
    pub supervised: f64,
    /// Not computed for full latents.
    pub unsupervised: Option<f64>,
}

pub fn representation_ablation(
    d: &DetectionFeatures,
    clean_train: &FeatureSet,
    s: &DetectorSettings,
) -> Result<Vec<AblationRow>> {
    Representation::ALL
        .iter()
        .map(|&rep| {
            Ok(AblationRow {
                representation: rep,
                columns: d.features.columns(rep).len(),
                supervised: supervised_auroc(d, rep, s)?,
                unsupervised: if rep == Representation::Full {
                    None
                } else {
                    Some(unsupervised_auroc(clean_train, d, rep, s)?)
                },
            })
        })
        .collect()
}

/// Feature trajectories along an ε-sweep for the given samples.
#[allow(clippy::too_many_arguments)]
pub fn trajectories(
    net: &Network,
    bank: &AeBank,
    x: &Tensor<f32>,
    y: &[usize],
    sample_ids: &[u64],
    spec: &AttackSpec,
    epsilon: f32,
    grid_points: usize,
) -> Result<Vec<TrajectoryRecord>> {
    let sweep = epsilon_sweep(net, x, y, spec, epsilon, grid_points)?;
    let n = x.batch();
    let per_eps = sweep
        .iter()
        .map(|(_, xe)| extract_feature_set(net, bank, xe, sample_ids.to_vec(), vec![Provenance::Unknown; n]))
        .collect::<Result<Vec<_>>>()?;
    let taps = net.config().tap_names();
    Ok((0..n)
        .map(|i| TrajectoryRecord {
            sample_id: sample_ids[i],
            attack: spec.kind,
            epsilons: sweep.iter().map(|(e, _)| f64::from(*e)).collect(),
            taps: taps.clone(),
            rec_err: per_eps.iter().map(|f| f.outputs.iter().map(|o| o.rec_err[i]).collect()).collect(),
            lat_norm: per_eps.iter().map(|f| f.outputs.iter().map(|o| o.lat_norm[i]).collect()).collect(),
        })
        .collect())
}
