use std::path::Path;
use std::process::{Command, Output};

use aelayers_cli::manifest::RunManifest;

fn aelayers(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aelayers"))
        .args(["--preset", "smoke", "--threads", "1"])
        .args(args)
        .env("AELAYERS_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stage_before_its_dependency_names_the_missing_stage() {
    let root = tempfile::tempdir().unwrap();
    let out = aelayers(root.path(), &["detect"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("'features'"), "{err}");
    assert!(err.contains("aelayers features"), "{err}");
}

#[test]
fn bad_override_is_rejected_before_any_work() {
    let root = tempfile::tempdir().unwrap();
    let out = aelayers(root.path(), &["--set", "target.epochz=3", "train-target"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("epochz"));
    assert!(!root.path().join("runs").exists());
}

#[test]
fn second_all_is_a_no_op_and_rerunning_a_stage_invalidates_dependents() {
    let root = tempfile::tempdir().unwrap();
    let run_dir = root.path().join("runs/smoke");

    let first = aelayers(root.path(), &["all"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first).matches(": ran").count(), 11);
    let manifest = RunManifest::load(&run_dir).unwrap().unwrap();
    assert_eq!(manifest.stages.len(), 11);
    let report = std::fs::read(run_dir.join("evaluate/report.json")).unwrap();
    let target_bytes = std::fs::read(run_dir.join("target/target.aedm")).unwrap();

    let second = aelayers(root.path(), &["all"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert_eq!(stdout(&second).matches(": up to date").count(), 11, "{}", stdout(&second));
    assert_eq!(RunManifest::load(&run_dir).unwrap().unwrap(), manifest);
    assert_eq!(std::fs::read(run_dir.join("evaluate/report.json")).unwrap(), report);

    // Forcing one stage drops the records of everything downstream of it.
    let forced = aelayers(root.path(), &["--force", "train-aes"]);
    assert!(forced.status.success(), "{}", stderr(&forced));
    let m = RunManifest::load(&run_dir).unwrap().unwrap();
    assert!(m.is_complete("train-target") && m.is_complete("train-aes"));
    assert!(!m.is_complete("attack") && !m.is_complete("detect") && !m.is_complete("trajectory"));
    assert_eq!(std::fs::read(run_dir.join("target/target.aedm")).unwrap(), target_bytes);
    let blocked = aelayers(root.path(), &["detect"]);
    assert!(!blocked.status.success());

    // A changed configuration starts the manifest over.
    let reseeded = aelayers(root.path(), &["--set", "master_seed=5", "train-target"]);
    assert!(reseeded.status.success(), "{}", stderr(&reseeded));
    assert!(stdout(&reseeded).contains("train-target: ran"));
    let m = RunManifest::load(&run_dir).unwrap().unwrap();
    assert_eq!(m.stages.keys().collect::<Vec<_>>(), ["train-target"]);
}

#[test]
fn show_config_prints_the_fingerprint() {
    let root = tempfile::tempdir().unwrap();
    let out = aelayers(root.path(), &["--set", "master_seed=3", "show-config"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("\"master_seed\": 3"));
    let mut cfg = aelayers_cli::ExperimentConfig::preset(aelayers_cli::Preset::Smoke);
    cfg.master_seed = 3;
    assert!(text.contains(&format!("fingerprint: {}", cfg.fingerprint())));
}

#[test]
fn config_file_and_preset_are_exclusive() {
    let root = tempfile::tempdir().unwrap();
    let path = root.path().join("c.json");
    let cfg = aelayers_cli::ExperimentConfig::preset(aelayers_cli::Preset::Smoke);
    std::fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let both = aelayers(root.path(), &["--config", path.to_str().unwrap(), "show-config"]);
    assert!(!both.status.success());
    let only_file = Command::new(env!("CARGO_BIN_EXE_aelayers"))
        .args(["--config", path.to_str().unwrap(), "show-config"])
        .output()
        .unwrap();
    assert!(only_file.status.success(), "{}", stderr(&only_file));
    assert!(stdout(&only_file).contains(&cfg.fingerprint()));
}
