//! Experiment configuration: a JSON tree with dotted-path overrides.

use std::path::{Path, PathBuf};

use aelayers_core::attack::{AttackKind, AttackSpec};
use aelayers_core::net::NetworkConfig;
use aelayers_core::studies::DetectorSettings;
use aelayers_detect::{ForestParams, IsolationParams, SvmParams};
use aelayers_tensor::KernelKind;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::seeds::stage_seed;

/// Environment variable that roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "AELAYERS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
    Synthetic { classes: usize, train_per_class: usize, test_per_class: usize, size: usize, blob_sigma: f64, jitter: f64, noise: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSettings {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSettings {
    /// Latent size for convolutional taps.
    pub conv_latent: usize,
    /// Latent size for flat taps.
    pub flat_latent: usize,
    pub width: usize,
    pub lambda: f32,
    pub kernel: KernelKind,
    pub kernel_scale: Option<f32>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch: usize,
    /// Training samples used per autoencoder; `null` uses the whole training set.
    pub max_samples: Option<usize>,
}

/// An attack and its budget. Unset fields take the attack's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSettings {
    pub kind: AttackKind,
    /// L∞ budget; for DeepFool and CW it only sets the noise budget and the sweep range.
    pub epsilon: f32,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f32>,
    #[serde(default)]
    pub cw_confidence: Option<f32>,
    #[serde(default)]
    pub cw_const: Option<f32>,
    #[serde(default)]
    pub cw_lr: Option<f32>,
    #[serde(default)]
    pub overshoot: Option<f32>,
}

impl AttackSettings {
    pub fn new(kind: AttackKind, epsilon: f32) -> Self {
        AttackSettings {
            kind,
            epsilon,
            steps: None,
            step_size: None,
            cw_confidence: None,
            cw_const: None,
            cw_lr: None,
            overshoot: None,
        }
    }

    pub fn to_spec(&self, seed: u64) -> AttackSpec {
        let d = AttackSpec::defaults(self.kind, self.epsilon);
        // Iterative attacks keep their default step-to-budget ratio when only the step count changes.
        let step_size = self.step_size.unwrap_or(match (self.kind, self.steps) {
            (AttackKind::Pgd, Some(n)) => 2.5 * self.epsilon / n.max(1) as f32,
            _ => d.step_size,
        });
        AttackSpec {
            steps: self.steps.unwrap_or(d.steps),
            step_size,
            cw_confidence: self.cw_confidence.unwrap_or(d.cw_confidence),
            cw_const: self.cw_const.unwrap_or(d.cw_const),
            cw_lr: self.cw_lr.unwrap_or(d.cw_lr),
            overshoot: self.overshoot.unwrap_or(d.overshoot),
            seed,
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestSettings {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub max_features: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolationSettings {
    pub trees: usize,
    pub subsample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub svm: SvmParams,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub forest: ForestSettings,
    pub isolation: IsolationSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySettings {
    pub attack: AttackKind,
    pub samples: usize,
    pub grid_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Test samples attacked; `null` uses the whole test set.
    pub test_samples: Option<usize>,
    /// Clean training samples for the one-class detector; `null` uses the whole training set.
    pub clean_train_samples: Option<usize>,
    /// Noise budget for class-1 noisy samples; `null` uses each attack's ε.
    pub noise_epsilon: Option<f32>,
    pub trajectory: TrajectorySettings,
    /// Cells per axis of the KDE grids.
    pub kde_grid: usize,
    pub pgd_iterations: Vec<usize>,
    /// Attack whose training split trains the transfer detector and whose data the ablation uses.
    pub reference_attack: AttackKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// `null` selects the reference convnet for the dataset's shape.
    pub network: Option<NetworkConfig>,
    pub target: TargetSettings,
    pub autoencoders: AutoencoderSettings,
    pub attacks: Vec<AttackSettings>,
    pub detectors: DetectorConfig,
    pub analysis: AnalysisSettings,
    /// Every random stream derives from this seed.
    pub master_seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 28×28 blobs, 10 classes, all five attacks.
    Desk,
    /// 12×12 blobs, 4 classes, reduced budgets; finishes in seconds.
    Smoke,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Smoke => Self::smoke(),
        }
    }

    fn desk() -> Self {
        let eps = 0.3;
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                classes: 10,
                train_per_class: 200,
                test_per_class: 50,
                size: 28,
                blob_sigma: 3.0,
                jitter: 1.0,
                noise: 0.1,
            },
            network: None,
            target: TargetSettings { epochs: 3, learning_rate: 2e-3, batch: 32 },
            autoencoders: AutoencoderSettings {
                conv_latent: 16,
                flat_latent: 8,
                width: 32,
                lambda: 1.0,
                kernel: KernelKind::Imq,
                kernel_scale: None,
                epochs: 10,
                learning_rate: 1e-3,
                batch: 64,
                max_samples: None,
            },
            attacks: AttackKind::ALL.iter().map(|&k| AttackSettings::new(k, eps)).collect(),
            detectors: DetectorConfig {
                svm: SvmParams::default(),
                c_grid: vec![0.01, 0.1, 1.0, 10.0],
                folds: 5,
                forest: ForestSettings { trees: 100, max_depth: 12, min_samples_split: 2, max_features: None },
                isolation: IsolationSettings { trees: 100, subsample: 256 },
            },
            analysis: AnalysisSettings {
                test_samples: None,
                clean_train_samples: Some(1000),
                noise_epsilon: None,
                trajectory: TrajectorySettings { attack: AttackKind::Bim, samples: 50, grid_points: 11 },
                kde_grid: 40,
                pgd_iterations: vec![1, 5, 20, 40],
                reference_attack: AttackKind::Fgsm,
            },
            master_seed: 20201,
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    fn smoke() -> Self {
        let mut c = Self::desk();
        c.dataset = DatasetSpec::Synthetic {
            classes: 4,
            train_per_class: 60,
            test_per_class: 25,
            size: 12,
            blob_sigma: 1.5,
            jitter: 0.7,
            noise: 0.1,
        };
        c.target = TargetSettings { epochs: 3, learning_rate: 3e-3, batch: 32 };
        c.autoencoders.epochs = 3;
        for a in &mut c.attacks {
            a.steps = match a.kind {
                AttackKind::Fgsm => None,
                AttackKind::Bim | AttackKind::Pgd => Some(5),
                AttackKind::DeepFool => Some(10),
                AttackKind::Cw => Some(20),
            };
        }
        c.detectors.c_grid = vec![0.1, 1.0];
        c.detectors.folds = 3;
        c.detectors.forest.trees = 20;
        c.detectors.isolation = IsolationSettings { trees: 20, subsample: 64 };
        c.analysis.clean_train_samples = Some(120);
        c.analysis.trajectory = TrajectorySettings { attack: AttackKind::Bim, samples: 8, grid_points: 5 };
        c.analysis.kde_grid = 10;
        c.analysis.pgd_iterations = vec![1, 5];
        c.output_dir = PathBuf::from("runs/smoke");
        c
    }

    /// Reads a JSON config. Relative IDX paths resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(CliError::file(path))?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&text).map_err(CliError::json(path))?;
        if let (DatasetSpec::Idx { train_images, train_labels, test_images, test_labels }, Some(dir)) =
            (&mut cfg.dataset, path.parent())
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `a.b.c=value` overrides. The path must name an existing key
    /// (array elements by index); the value is parsed as JSON, or taken as a
    /// string when it is not valid JSON.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(self).map_err(|e| CliError::Config(e.to_string()))?;
        for spec in overrides {
            let err = |detail: String| CliError::Override { spec: spec.clone(), detail };
            let (path, raw) = spec.split_once('=').ok_or_else(|| err("expected key.path=value".into()))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut tree;
            for key in path.split('.') {
                node = match node {
                    Value::Object(map) => map.get_mut(key),
                    Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| err(format!("no key '{key}' in '{path}'")))?;
            }
            *node = value;
        }
        serde_json::from_value(tree).map_err(|e| CliError::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        match &self.dataset {
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.is_file() {
                        return bad(format!("dataset file {} does not exist", p.display()));
                    }
                }
            }
            DatasetSpec::Synthetic { classes, train_per_class, test_per_class, .. } => {
                if *classes < 2 || *train_per_class == 0 || *test_per_class == 0 {
                    return bad("synthetic dataset needs >= 2 classes and samples in both splits".into());
                }
            }
        }
        if self.attacks.is_empty() {
            return bad("at least one attack is required".into());
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if self.attacks[..i].iter().any(|b| b.kind == a.kind) {
                return bad(format!("attack {} listed twice", a.kind));
            }
            a.to_spec(0).validate()?;
        }
        if self.attack(self.analysis.reference_attack).is_none() {
            return bad(format!("reference attack {} is not in the attack list", self.analysis.reference_attack));
        }
        if self.analysis.trajectory.attack == AttackKind::Cw {
            return bad("trajectories need an attack with a perturbation budget".into());
        }
        if self.analysis.trajectory.grid_points < 2 || self.analysis.kde_grid == 0 {
            return bad("trajectory grid needs >= 2 points and the KDE grid >= 1 cell".into());
        }
        if self.analysis.pgd_iterations.contains(&0) {
            return bad("PGD iteration counts must be positive".into());
        }
        if self.detectors.c_grid.iter().any(|c| !(*c > 0.0)) || self.detectors.c_grid.is_empty() {
            return bad("SVM C grid must be non-empty and positive".into());
        }
        Ok(())
    }

    pub fn attack(&self, kind: AttackKind) -> Option<&AttackSettings> {
        self.attacks.iter().find(|a| a.kind == kind)
    }

    /// Output directory, joined to `$AELAYERS_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// SHA-256 of the canonical JSON form with `output_dir` removed, so the
    /// same experiment in another directory has the same fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut tree {
            map.remove("output_dir");
        }
        let bytes = serde_json::to_vec(&tree).expect("value serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn detector_settings(&self) -> DetectorSettings {
        let d = &self.detectors;
        let m = self.master_seed;
        DetectorSettings {
            svm: d.svm,
            c_grid: d.c_grid.clone(),
            folds: d.folds,
            forest: ForestParams {
                trees: d.forest.trees,
                max_depth: d.forest.max_depth,
                min_samples_split: d.forest.min_samples_split,
                max_features: d.forest.max_features,
                seed: stage_seed(m, "forest"),
            },
            isolation: IsolationParams {
                trees: d.isolation.trees,
                subsample: d.isolation.subsample,
                seed: stage_seed(m, "isolation"),
            },
            split_seed: stage_seed(m, "split"),
            cv_seed: stage_seed(m, "cv"),
        }
    }
}
