//! Stage orchestration over a run directory.
//!
//! Layout: `manifest.json`, `config.json`, and one directory per stage
//! (`target/`, `aes/`, `attacks/<kind>/`, `features/`, `detect/`,
//! `evaluate/`, `trajectory/`, `importance/`, `studies/`). A stage writes only
//! into its own directory.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use aelayers_core::attack::AttackKind;
use aelayers_core::autoencoder::{train_wae, AeConfig};
use aelayers_core::csvio::{parse_usize, Table};
use aelayers_core::data::{load_idx, synth_dataset, LabeledSet, SynthParams};
use aelayers_core::eval::{
    adversarial_manifest, build_detection_dataset, h1_statistic, kde2d_grid, kde_to_table, scores_table,
    trajectories_to_table, DetectionSample, Grid2,
};
use aelayers_core::features::{extract_feature_set, AeBank, FeatureMatrix, FeatureMode, FeatureSet, Provenance, Representation};
use aelayers_core::net::{build_small_convnet, train_classifier, Classifier, Network, TrainParams};
use aelayers_core::studies::{
    depth_profile, importance_report, is_nondecreasing, pgd_iteration_study, representation_ablation, supervised_scores,
    trajectories, transfer_study, unsupervised_scores, DetectionFeatures, DetectorSettings,
};
use aelayers_tensor::{read_archive_file, write_archive_file, Archive};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{AttackSettings, DatasetSpec, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::manifest::{RunManifest, StageRecord};
use crate::report::{
    AblationStudy, AttackSummary, DetectRecord, EvalReport, EvalRow, ImportanceSummary, PgdStudy, TargetSummary,
    TrajectorySummary, TransferRow, Versioned, ARTIFACT_FORMAT_VERSION,
};
use crate::seeds::stage_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    TrainTarget,
    TrainAes,
    Attack,
    Features,
    Detect,
    Evaluate,
    Trajectory,
    Importance,
    StudyPgdIters,
    StudyTransfer,
    StudyAblation,
}

impl Stage {
    /// Execution order of `all`; every stage follows its dependencies.
    pub const ALL: [Stage; 11] = [
        Stage::TrainTarget,
        Stage::TrainAes,
        Stage::Attack,
        Stage::Features,
        Stage::Detect,
        Stage::Evaluate,
        Stage::Trajectory,
        Stage::Importance,
        Stage::StudyPgdIters,
        Stage::StudyTransfer,
        Stage::StudyAblation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::TrainTarget => "train-target",
            Stage::TrainAes => "train-aes",
            Stage::Attack => "attack",
            Stage::Features => "features",
            Stage::Detect => "detect",
            Stage::Evaluate => "evaluate",
            Stage::Trajectory => "trajectory",
            Stage::Importance => "importance",
            Stage::StudyPgdIters => "study-pgd-iters",
            Stage::StudyTransfer => "study-transfer",
            Stage::StudyAblation => "study-ablation",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::TrainTarget => &[],
            Stage::TrainAes => &[Stage::TrainTarget],
            Stage::Attack => &[Stage::TrainAes],
            Stage::Features => &[Stage::Attack],
            Stage::Detect => &[Stage::Features],
            Stage::Evaluate => &[Stage::Detect],
            Stage::Trajectory => &[Stage::TrainAes],
            Stage::Importance | Stage::StudyPgdIters | Stage::StudyTransfer | Stage::StudyAblation => &[Stage::Features],
        }
    }

    /// Whether `self` depends on `other`, directly or transitively.
    fn depends_on(self, other: Stage) -> bool {
        self.deps().iter().any(|&d| d == other || d.depends_on(other))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    manifest: RunManifest,
    force: bool,
    data: Option<Rc<(LabeledSet, LabeledSet)>>,
    net: Option<Rc<Network>>,
    bank: Option<Rc<AeBank>>,
}

impl Pipeline {
    /// Opens (or creates) the run directory of `cfg`. A manifest written for
    /// a different configuration is discarded.
    pub fn open(cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.resolved_output_dir();
        std::fs::create_dir_all(&dir).map_err(CliError::file(&dir))?;
        let fingerprint = cfg.fingerprint();
        let manifest = match RunManifest::load(&dir)? {
            Some(m) if m.fingerprint == fingerprint => m,
            Some(_) => {
                warn!("configuration changed since the last run in {}; starting over", dir.display());
                RunManifest::new(&fingerprint)
            }
            None => RunManifest::new(&fingerprint),
        };
        let config_path = dir.join("config.json");
        std::fs::write(&config_path, serde_json::to_vec_pretty(&cfg).map_err(CliError::json(&config_path))?)
            .map_err(CliError::file(&config_path))?;
        manifest.save(&dir)?;
        Ok(Pipeline { cfg, dir, manifest, force, data: None, net: None, bank: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Runs `stage` unless it already completed for this configuration.
    /// Without `force`, every dependency must have completed.
    pub fn run(&mut self, stage: Stage) -> Result<Outcome> {
        if !self.force && self.manifest.is_complete(stage.name()) {
            info!("{stage}: up to date");
            return Ok(Outcome::Skipped);
        }
        if !self.force {
            if let Some(missing) = stage.deps().iter().find(|d| !self.manifest.is_complete(d.name())) {
                return Err(CliError::MissingStage { stage: stage.name().into(), missing: missing.name().into() });
            }
        }
        info!("{stage}: running");
        let start = Instant::now();
        let artifacts = match stage {
            Stage::TrainTarget => self.train_target()?,
            Stage::TrainAes => self.train_aes()?,
            Stage::Attack => self.attack()?,
            Stage::Features => self.features()?,
            Stage::Detect => self.detect()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Trajectory => self.trajectory()?,
            Stage::Importance => self.importance()?,
            Stage::StudyPgdIters => self.study_pgd_iters()?,
            Stage::StudyTransfer => self.study_transfer()?,
            Stage::StudyAblation => self.study_ablation()?,
        };
        let seconds = start.elapsed().as_secs_f64();
        info!("{stage}: done in {seconds:.1}s");
        self.manifest.stages.retain(|name, _| Stage::ALL.iter().all(|s| s.name() != name || !s.depends_on(stage)));
        self.manifest.stages.insert(stage.name().into(), StageRecord { artifacts, seconds });
        self.manifest.save(&self.dir)?;
        Ok(Outcome::Ran)
    }

    /// Runs every stage in dependency order.
    pub fn run_all(&mut self) -> Result<Vec<(Stage, Outcome)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run(s)?))).collect()
    }

    // ---- artifact helpers

    fn mkdir(&self, rel: &str) -> Result<()> {
        let p = self.dir.join(rel);
        std::fs::create_dir_all(&p).map_err(CliError::file(&p))
    }

    fn write_json<T: Serialize>(&self, rel: &str, content: &T) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        let v = Versioned { format_version: ARTIFACT_FORMAT_VERSION, content };
        let bytes = serde_json::to_vec_pretty(&v).map_err(CliError::json(&path))?;
        std::fs::write(&path, bytes).map_err(CliError::file(&path))?;
        Ok(rel.into())
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        read_artifact(&self.dir.join(rel))
    }

    fn write_table(&self, rel: &str, t: &Table) -> Result<PathBuf> {
        t.write(self.dir.join(rel))?;
        Ok(rel.into())
    }

    fn settings(&self) -> DetectorSettings {
        self.cfg.detector_settings()
    }

    fn seed(&self, label: &str) -> u64 {
        stage_seed(self.cfg.master_seed, label)
    }

    // ---- cached inputs

    /// `(train, test)`; the test set is truncated to `analysis.test_samples`.
    fn data(&mut self) -> Result<Rc<(LabeledSet, LabeledSet)>> {
        if let Some(d) = &self.data {
            return Ok(d.clone());
        }
        let (train, test) = match &self.cfg.dataset {
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels } => {
                let (a, b) = (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?);
                let classes = a.classes.max(b.classes);
                if a.sample_shape() != b.sample_shape() {
                    return Err(CliError::Config("train and test images differ in shape".into()));
                }
                (LabeledSet::new(a.images, a.labels, classes)?, LabeledSet::new(b.images, b.labels, classes)?)
            }
            &DatasetSpec::Synthetic { classes, train_per_class, test_per_class, size, blob_sigma, jitter, noise } => {
                let p = SynthParams { classes, per_class: train_per_class, size, blob_sigma, jitter, noise, seed: 0 };
                (
                    synth_dataset(&SynthParams { seed: self.seed("data.train"), ..p.clone() })?,
                    synth_dataset(&SynthParams { per_class: test_per_class, seed: self.seed("data.test"), ..p })?,
                )
            }
        };
        let test = match self.cfg.analysis.test_samples {
            Some(n) => test.head(n)?,
            None => test,
        };
        let d = Rc::new((train, test));
        self.data = Some(d.clone());
        Ok(d)
    }

    fn net(&mut self) -> Result<Rc<Network>> {
        if let Some(n) = &self.net {
            return Ok(n.clone());
        }
        let net = Network::load(self.dir.join("target"), "target")?;
        if let Some(expected) = &self.manifest.target_checksum {
            let found = net.checksum();
            if &found != expected {
                return Err(CliError::Tampered { expected: expected.clone(), found });
            }
        }
        let n = Rc::new(net);
        self.net = Some(n.clone());
        Ok(n)
    }

    fn bank(&mut self) -> Result<Rc<AeBank>> {
        if let Some(b) = &self.bank {
            return Ok(b.clone());
        }
        let taps = self.net()?.config().tap_names();
        let b = Rc::new(AeBank::load(self.dir.join("aes"), &taps)?);
        self.bank = Some(b.clone());
        Ok(b)
    }

    fn feature_set(&self, name: &str) -> Result<FeatureSet> {
        let compact = FeatureMatrix::read_csv(self.dir.join(format!("features/{name}_compact.csv")))?;
        let full = FeatureMatrix::read_csv(self.dir.join(format!("features/{name}_full.csv")))?;
        Ok(FeatureSet::from_matrices(&compact, &full)?)
    }

    fn detection(&self, kind: AttackKind) -> Result<DetectionFeatures> {
        let fs = self.feature_set(kind.name())?;
        let classes = fs.provenance.iter().map(|&p| u8::from(p == Provenance::Adversarial)).collect();
        Ok(DetectionFeatures::new(kind, fs, classes, self.settings().split_seed)?)
    }

    fn attack_kinds(&self) -> Vec<AttackKind> {
        self.cfg.attacks.iter().map(|a| a.kind).collect()
    }

    /// Configured settings for `kind`, or its defaults at the reference attack's ε.
    fn attack_settings(&self, kind: AttackKind) -> AttackSettings {
        self.cfg.attack(kind).cloned().unwrap_or_else(|| {
            let eps = self.cfg.attack(self.cfg.analysis.reference_attack).map_or(0.3, |a| a.epsilon);
            AttackSettings::new(kind, eps)
        })
    }

    // ---- stages

    fn train_target(&mut self) -> Result<Vec<PathBuf>> {
        let data = self.data()?;
        let (train, test) = (&data.0, &data.1);
        let config = match &self.cfg.network {
            Some(c) => c.clone(),
            None => build_small_convnet(train.sample_shape(), train.classes)?,
        };
        let t = &self.cfg.target;
        let p = TrainParams { epochs: t.epochs, learning_rate: t.learning_rate, batch: t.batch, seed: self.seed("target") };
        let net = train_classifier(&config, train, Some(test), &p)?;
        self.mkdir("target")?;
        net.save(self.dir.join("target"), "target")?;
        let summary = TargetSummary {
            param_count: config.param_count()?,
            train_accuracy: net.meta.train_accuracy,
            test_accuracy: net.accuracy(test)?,
            checksum: net.checksum(),
        };
        info!("target: train accuracy {:.4}, test accuracy {:.4}", summary.train_accuracy, summary.test_accuracy);
        self.manifest.target_checksum = Some(summary.checksum.clone());
        self.net = Some(Rc::new(net));
        self.bank = None;
        Ok(vec!["target/target.aedm".into(), "target/target.json".into(), self.write_json("target/summary.json", &summary)?])
    }

    fn train_aes(&mut self) -> Result<Vec<PathBuf>> {
        let data = self.data()?;
        let net = self.net()?;
        let a = &self.cfg.autoencoders;
        let train = match a.max_samples {
            Some(n) => data.0.head(n)?,
            None => data.0.clone(),
        };
        let (_, acts) = net.forward_with_taps(&train.images)?;
        let prov = vec![Provenance::Clean; train.len()];
        let mut aes = Vec::new();
        for (name, x) in acts.names.iter().zip(&acts.values) {
            let conv = x.rank() == 4;
            let config = AeConfig {
                tap: name.clone(),
                latent: if conv { a.conv_latent } else { a.flat_latent },
                width: a.width,
                lambda: a.lambda,
                kernel: a.kernel,
                kernel_scale: a.kernel_scale,
                epochs: a.epochs,
                learning_rate: a.learning_rate,
                batch: a.batch,
                seed: self.seed(&format!("ae.{name}")),
            };
            let ae = train_wae(x, &prov, &config)?;
            info!("ae {name}: final loss {:.4}", ae.curve.last().copied().unwrap_or(f64::NAN));
            aes.push(ae);
        }
        let bank = AeBank { aes };
        self.mkdir("aes")?;
        bank.save(self.dir.join("aes"))?;
        let mut curves = Table::new(["tap", "epoch", "loss", "smoothed"]);
        for ae in &bank.aes {
            for (e, (l, s)) in ae.curve.iter().zip(ae.smoothed_curve()).enumerate() {
                curves.push(vec![ae.config.tap.clone(), e.to_string(), l.to_string(), s.to_string()]);
            }
        }
        let mut out: Vec<PathBuf> = bank
            .aes
            .iter()
            .flat_map(|ae| ["aedm", "json"].map(|ext| PathBuf::from(format!("aes/ae_{}.{ext}", ae.config.tap))))
            .collect();
        out.push(self.write_table("aes/curves.csv", &curves)?);
        self.bank = Some(Rc::new(bank));
        Ok(out)
    }

    fn attack(&mut self) -> Result<Vec<PathBuf>> {
        let data = self.data()?;
        let net = self.net()?;
        let test = &data.1;
        let mut out = Vec::new();
        for a in self.cfg.attacks.clone() {
            let kind = a.kind;
            let spec = a.to_spec(self.seed(&format!("attack.{kind}")));
            let noise_epsilon = self.cfg.analysis.noise_epsilon.unwrap_or(a.epsilon);
            let (ds, adv) = build_detection_dataset(
                net.as_ref(),
                &test.images,
                &test.labels,
                &spec,
                noise_epsilon,
                self.seed(&format!("noise.{kind}")),
            )?;
            let (class1, class2) = ds.counts();
            let summary = AttackSummary {
                spec,
                noise_epsilon,
                attacked: adv.labels.len(),
                success_rate: adv.success_rate(),
                max_linf: adv.linf.iter().copied().fold(0.0, f32::max),
                mean_l2: adv.l2.iter().map(|&v| f64::from(v)).sum::<f64>() / adv.l2.len().max(1) as f64,
                class1,
                class2,
            };
            info!("attack {kind}: success {:.3}, {class1} clean/noisy, {class2} adversarial", summary.success_rate);
            let dir = format!("attacks/{kind}");
            self.mkdir(&dir)?;
            let mut archive = Archive::new();
            archive.push("originals", adv.originals.clone());
            archive.push("perturbed", adv.perturbed.clone());
            archive.push("inputs", ds.inputs.clone());
            write_archive_file(self.dir.join(format!("{dir}/batch.aedm")), &archive)?;
            out.push(PathBuf::from(format!("{dir}/batch.aedm")));
            out.push(self.write_table(&format!("{dir}/manifest.csv"), &adversarial_manifest(&adv))?);
            out.push(self.write_table(&format!("{dir}/samples.csv"), &samples_table(&ds.samples))?);
            out.push(self.write_json(&format!("{dir}/summary.json"), &summary)?);
        }
        Ok(out)
    }

    fn features(&mut self) -> Result<Vec<PathBuf>> {
        let data = self.data()?;
        let net = self.net()?;
        let bank = self.bank()?;
        self.mkdir("features")?;
        let mut out = Vec::new();
        let mut write = |this: &Self, name: &str, fs: &FeatureSet| -> Result<()> {
            for (mode, suffix) in [(FeatureMode::Compact, "compact"), (FeatureMode::Full, "full")] {
                out.push(this.write_table(&format!("features/{name}_{suffix}.csv"), &fs.matrix(mode).to_table())?);
            }
            Ok(())
        };
        for kind in self.attack_kinds() {
            let archive = read_archive_file(self.dir.join(format!("attacks/{kind}/batch.aedm")))?;
            let samples = read_samples(&self.dir.join(format!("attacks/{kind}/samples.csv")))?;
            let inputs = archive.require("inputs")?;
            if inputs.batch() != samples.len() {
                return Err(CliError::Config(format!("attacks/{kind}: inputs and samples.csv disagree")));
            }
            let ids = samples.iter().map(|s| s.id).collect();
            let prov = samples.iter().map(|s| s.provenance).collect();
            let fs = extract_feature_set(&net, &bank, inputs, ids, prov)?;
            write(self, kind.name(), &fs)?;
        }
        let train = match self.cfg.analysis.clean_train_samples {
            Some(n) => data.0.head(n)?,
            None => data.0.clone(),
        };
        let n = train.len();
        let clean = extract_feature_set(&net, &bank, &train.images, (0..n as u64).collect(), vec![Provenance::Clean; n])?;
        write(self, "clean_train", &clean)?;
        Ok(out)
    }

    fn detect(&mut self) -> Result<Vec<PathBuf>> {
        let s = self.settings();
        let clean = self.feature_set("clean_train")?;
        self.mkdir("detect")?;
        let mut out = Vec::new();
        let mut records = Vec::new();
        for kind in self.attack_kinds() {
            let d = self.detection(kind)?;
            let sup = supervised_scores(&d, Representation::Full, &s)?;
            let unsup = unsupervised_scores(&clean, &d, Representation::Both, &s)?;
            info!("detect {kind}: supervised {:.4}, unsupervised {:.4}", sup.auroc, unsup.auroc);
            out.push(self.write_table(
                &format!("detect/{kind}_supervised.csv"),
                &scores_table(&sup.sample_ids, &sup.scores, &sup.labels),
            )?);
            out.push(self.write_table(
                &format!("detect/{kind}_unsupervised.csv"),
                &scores_table(&unsup.sample_ids, &unsup.scores, &unsup.labels),
            )?);
            let class2 = d.classes.iter().filter(|&&c| c == 1).count();
            records.push(DetectRecord {
                attack: kind,
                class1: d.classes.len() - class2,
                class2,
                train_samples: d.train.len(),
                eval_samples: d.eval.len(),
                supervised_full: sup.auroc,
                unsupervised_compact: unsup.auroc,
            });
        }
        out.push(self.write_json("detect/detect.json", &records)?);
        Ok(out)
    }

    fn evaluate(&mut self) -> Result<Vec<PathBuf>> {
        let records: Vec<DetectRecord> = self.read_json("detect/detect.json")?;
        let target: TargetSummary = self.read_json("target/summary.json")?;
        let mut rows = Vec::new();
        for r in &records {
            let attack: AttackSummary = self.read_json(&format!("attacks/{}/summary.json", r.attack))?;
            for (setting, auroc) in [("supervised_full", r.supervised_full), ("unsupervised_compact", r.unsupervised_compact)] {
                if !(0.0..=1.0).contains(&auroc) {
                    return Err(CliError::Config(format!("{} {setting}: AUROC {auroc} outside [0,1]", r.attack)));
                }
                rows.push(EvalRow {
                    attack: r.attack,
                    setting: setting.into(),
                    auroc,
                    class1: r.class1,
                    class2: r.class2,
                    eval_samples: r.eval_samples,
                    attack_success_rate: attack.success_rate,
                });
            }
        }
        let report = EvalReport { fingerprint: self.manifest.fingerprint.clone(), target_test_accuracy: target.test_accuracy, rows };
        self.mkdir("evaluate")?;
        Ok(vec![
            self.write_json("evaluate/report.json", &report)?,
            self.write_table("evaluate/report.csv", &report.to_table())?,
        ])
    }

    fn trajectory(&mut self) -> Result<Vec<PathBuf>> {
        let data = self.data()?;
        let net = self.net()?;
        let bank = self.bank()?;
        let ts = self.cfg.analysis.trajectory.clone();
        let settings = self.attack_settings(ts.attack);
        let spec = settings.to_spec(self.seed("trajectory"));
        let test = &data.1;
        let pred = net.predict(&test.images)?;
        let idx: Vec<usize> = (0..test.len()).filter(|&i| pred[i] == test.labels[i]).take(ts.samples).collect();
        if idx.is_empty() {
            return Err(CliError::Config("no correctly classified test samples to trace".into()));
        }
        let x = test.images.select(&idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| test.labels[i]).collect();
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let records = trajectories(&net, &bank, &x, &y, &ids, &spec, settings.epsilon, ts.grid_points)?;
        let deepest = records[0].taps.len() - 1;
        let rising = records
            .iter()
            .filter(|r| r.rec_err[r.epsilons.len() - 1][deepest] > r.rec_err[0][deepest])
            .count();
        let summary = TrajectorySummary {
            attack: ts.attack,
            epsilon: settings.epsilon,
            samples: records.len(),
            taps: records[0].taps.clone(),
            h1: h1_statistic(&records),
            deepest_rec_err_increase: rising as f64 / records.len() as f64,
        };
        self.mkdir("trajectory")?;
        Ok(vec![
            self.write_table(&format!("trajectory/{}.csv", ts.attack), &trajectories_to_table(&records))?,
            self.write_json("trajectory/summary.json", &summary)?,
        ])
    }

    fn importance(&mut self) -> Result<Vec<PathBuf>> {
        let s = self.settings();
        let grid_cells = self.cfg.analysis.kde_grid;
        self.mkdir("importance")?;
        let mut out = Vec::new();
        let mut table = Table::new(["attack", "tap", "rec_err", "lat_norm", "depth_auroc"]);
        for kind in self.attack_kinds() {
            let d = self.detection(kind)?;
            let summary =
                ImportanceSummary { attack: kind, importance: importance_report(&d, &s)?, depth_profile: depth_profile(&d)? };
            for (t, tap) in summary.importance.taps.iter().enumerate() {
                let (r, l) = summary.importance.raw[t];
                table.push(vec![
                    kind.to_string(),
                    tap.clone(),
                    r.to_string(),
                    l.to_string(),
                    summary.depth_profile[t].to_string(),
                ]);
            }
            out.push(self.write_json(&format!("importance/{kind}.json"), &summary)?);
            // Density of (rec_err, lat_norm) at the deepest tap, per class.
            let deepest = &d.features.outputs[d.features.taps.len() - 1];
            let points: Vec<(f64, f64)> = deepest.rec_err.iter().copied().zip(deepest.lat_norm.iter().copied()).collect();
            let grid = bounding_grid(&points, grid_cells);
            for (class, label) in [(0u8, "clean"), (1, "adversarial")] {
                let pts: Vec<(f64, f64)> =
                    points.iter().zip(&d.classes).filter(|(_, &c)| c == class).map(|(p, _)| *p).collect();
                let density = kde2d_grid(&pts, scott_bandwidth(&pts), &grid)?;
                out.push(self.write_table(&format!("importance/{kind}_kde_{label}.csv"), &kde_to_table(&density, &grid))?);
            }
        }
        out.push(self.write_table("importance/summary.csv", &table)?);
        Ok(out)
    }

    fn study_pgd_iters(&mut self) -> Result<Vec<PathBuf>> {
        let data = self.data()?;
        let net = self.net()?;
        let bank = self.bank()?;
        let clean = self.feature_set("clean_train")?;
        let base = self.attack_settings(AttackKind::Pgd).to_spec(self.seed("attack.pgd"));
        let rows = pgd_iteration_study(
            &net,
            &bank,
            &data.1.images,
            &data.1.labels,
            &clean,
            &self.cfg.analysis.pgd_iterations,
            &base,
            self.seed("noise.pgd"),
            &self.settings(),
        )?;
        let study = PgdStudy { nondecreasing: is_nondecreasing(&rows, 0.0), rows };
        self.mkdir("studies")?;
        Ok(vec![self.write_json("studies/pgd_iterations.json", &study)?])
    }

    fn study_transfer(&mut self) -> Result<Vec<PathBuf>> {
        let source_kind = self.cfg.analysis.reference_attack;
        let source = self.detection(source_kind)?;
        let targets = self.attack_kinds().into_iter().map(|k| self.detection(k)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DetectionFeatures> = targets.iter().collect();
        let rows: Vec<TransferRow> = transfer_study(&source, &refs, Representation::Full, &self.settings())?
            .into_iter()
            .map(|(target, auroc)| TransferRow { source: source_kind, target, auroc })
            .collect();
        self.mkdir("studies")?;
        Ok(vec![self.write_json("studies/transfer.json", &rows)?])
    }

    fn study_ablation(&mut self) -> Result<Vec<PathBuf>> {
        let kind = self.cfg.analysis.reference_attack;
        let d = self.detection(kind)?;
        let clean = self.feature_set("clean_train")?;
        let rows = representation_ablation(&d, &clean, &self.settings())?;
        let mut t = Table::new(["representation", "columns", "supervised", "unsupervised"]);
        for r in &rows {
            t.push(vec![
                r.representation.name().into(),
                r.columns.to_string(),
                r.supervised.to_string(),
                r.unsupervised.map(|v| v.to_string()).unwrap_or_default(),
            ]);
        }
        self.mkdir("studies")?;
        Ok(vec![
            self.write_json("studies/ablation.json", &AblationStudy { attack: kind, rows })?,
            self.write_table("studies/ablation.csv", &t)?,
        ])
    }
}

/// Reads a versioned JSON artifact written by a stage.
pub fn read_artifact<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(CliError::file(path))?;
    let v: Versioned<T> = serde_json::from_slice(&bytes).map_err(CliError::json(path))?;
    if v.format_version != ARTIFACT_FORMAT_VERSION {
        return Err(CliError::Config(format!("{}: unsupported format version {}", path.display(), v.format_version)));
    }
    Ok(v.content)
}

fn samples_table(samples: &[DetectionSample]) -> Table {
    let mut t = Table::new(["sample_id", "test_index", "provenance", "class"]);
    for s in samples {
        t.push(vec![s.id.to_string(), s.test_index.to_string(), s.provenance.to_string(), s.class.to_string()]);
    }
    t
}

fn read_samples(path: &Path) -> Result<Vec<DetectionSample>> {
    let t = Table::read(path)?;
    let (ci, ct, cp, cc) = (t.column("sample_id")?, t.column("test_index")?, t.column("provenance")?, t.column("class")?);
    t.rows
        .iter()
        .map(|r| {
            Ok(DetectionSample {
                id: parse_usize(&r[ci])? as u64,
                test_index: parse_usize(&r[ct])?,
                provenance: r[cp].parse()?,
                class: u8::try_from(parse_usize(&r[cc])?).map_err(|_| CliError::Config(format!("bad class in {}", path.display())))?,
            })
        })
        .collect()
}

/// Scott's rule per axis, floored so that constant columns still get a kernel.
fn scott_bandwidth(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len().max(1) as f64;
    let sd = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let m = points.iter().map(f).sum::<f64>() / n;
        (points.iter().map(|p| (f(p) - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let k = n.powf(-1.0 / 6.0);
    ((sd(&|p| p.0) * k).max(1e-6), (sd(&|p| p.1) * k).max(1e-6))
}

fn bounding_grid(points: &[(f64, f64)], cells: usize) -> Grid2 {
    let span = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.05 * (hi - lo) + 1e-6;
        (lo - pad, hi + pad)
    };
    let ((x0, x1), (y0, y1)) = (span(&|p| p.0), span(&|p| p.1));
    Grid2 { x0, x1, nx: cells, y0, y1, ny: cells }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dependencies_precede_dependents() {
        for (i, s) in Stage::ALL.iter().enumerate() {
            for d in s.deps() {
                assert!(Stage::ALL[..i].contains(d), "{s} runs before its dependency {d}");
            }
        }
        assert!(Stage::Evaluate.depends_on(Stage::TrainTarget));
        assert!(!Stage::Trajectory.depends_on(Stage::Features));
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![
            DetectionSample { id: 0, test_index: 0, provenance: Provenance::Clean, class: 0 },
            DetectionSample { id: 5, test_index: 1, provenance: Provenance::Adversarial, class: 1 },
        ];
        let p = dir.path().join("s.csv");
        samples_table(&s).write(&p).unwrap();
        assert_eq!(read_samples(&p).unwrap(), s);
    }

    #[test]
    fn grid_covers_points() {
        let pts = [(1.0, 2.0), (3.0, 2.0)];
        let g = bounding_grid(&pts, 4);
        assert!(g.x0 < 1.0 && g.x1 > 3.0 && g.y0 < 2.0 && g.y1 > 2.0);
        let (bx, by) = scott_bandwidth(&pts);
        assert!(bx > 0.5 && by == 1e-6);
    }
}
