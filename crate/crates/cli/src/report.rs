//! JSON artifacts written by the stages.

use aelayers_core::attack::{AttackKind, AttackSpec};
use aelayers_core::csvio::Table;
use aelayers_core::eval::ImportanceReport;
use aelayers_core::studies::{AblationRow, PgdIterationRow};
use serde::{Deserialize, Serialize};

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

/// Envelope of every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub format_version: u32,
    pub content: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub param_count: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub spec: AttackSpec,
    pub noise_epsilon: f32,
    pub attacked: usize,
    pub success_rate: f64,
    pub max_linf: f32,
    pub mean_l2: f64,
    pub class1: usize,
    pub class2: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectRecord {
    pub attack: AttackKind,
    pub class1: usize,
    pub class2: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Linear SVM on full latents, trained on the 10% split.
    pub supervised_full: f64,
    /// Isolation forest on compact features, fit on clean training data.
    pub unsupervised_compact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: AttackKind,
    pub setting: String,
    pub auroc: f64,
    pub class1: usize,
    pub class2: usize,
    pub eval_samples: usize,
    pub attack_success_rate: f64,
}

/// AUROC per (attack, setting). Wall-clock times live in the run manifest so
/// that identical runs produce identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub target_test_accuracy: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn auroc(&self, attack: AttackKind, setting: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.attack == attack && r.setting == setting).map(|r| r.auroc)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["attack", "setting", "auroc", "class1", "class2", "eval_samples", "attack_success_rate"]);
        for r in &self.rows {
            t.push(vec![
                r.attack.to_string(),
                r.setting.clone(),
                r.auroc.to_string(),
                r.class1.to_string(),
                r.class2.to_string(),
                r.eval_samples.to_string(),
                r.attack_success_rate.to_string(),
            ]);
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub attack: AttackKind,
    pub importance: ImportanceReport,
    /// Direction-free single-feature AUROC per tap.
    pub depth_profile: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub attack: AttackKind,
    pub epsilon: f32,
    pub samples: usize,
    pub taps: Vec<String>,
    pub h1: Vec<f64>,
    /// Fraction of samples whose deepest-tap rec_err at 2ε exceeds its value at 0.
    pub deepest_rec_err_increase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdStudy {
    pub rows: Vec<PgdIterationRow>,
    pub nondecreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub source: AttackKind,
    pub target: AttackKind,
    pub auroc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationStudy {
    pub attack: AttackKind,
    pub rows: Vec<AblationRow>,
}
