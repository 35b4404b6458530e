use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use beamlab::{MlpModel, ShapReport};
use beamlab_cli::manifest::MANIFEST_FILE;
use beamlab_cli::pipeline::read_csv;
use beamlab_cli::stages::files;
use beamlab_cli::{CliError, ExperimentConfig, Method, Overrides, Pipeline, Stage};

fn smoke(dir: &Path) -> Pipeline {
    Pipeline::new(ExperimentConfig::smoke(), dir, &Overrides::default()).unwrap()
}

fn manifest_bytes(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn smoke_run_is_fast_and_retrains_on_the_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let s = smoke(tmp.path()).run_all().unwrap();
    assert!(t0.elapsed() < Duration::from_secs(60), "{:?}", t0.elapsed());
    assert_eq!(s.executed, Stage::ALL.to_vec());

    let rep: ShapReport = serde_json::from_slice(&std::fs::read(tmp.path().join(files::SHAP_REPORT)).unwrap()).unwrap();
    assert_eq!(rep.delta, 0.96);
    assert!(!rep.selected.is_empty() && rep.selected.len() <= 32);
    let reduced = MlpModel::from_bytes(&std::fs::read(tmp.path().join(files::REDUCED)).unwrap()).unwrap();
    assert_eq!(reduced.input_dim(), rep.selected.len());

    let index = read_csv(&tmp.path().join(files::REPORT_INDEX)).unwrap();
    assert!(index.len() >= 10);
    for row in &index {
        assert!(tmp.path().join(&row["file"]).is_file(), "{row:?}");
    }
    assert!(tmp.path().join("config.resolved.json").is_file());
}

#[test]
fn manifests_do_not_depend_on_run_or_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let mut out = Vec::new();
    for (name, threads) in [("a", Some(1)), ("b", Some(1)), ("c", Some(2))] {
        let mut cfg = ExperimentConfig::smoke();
        cfg.threads = threads;
        let dir = tmp.path().join(name);
        Pipeline::new(cfg, &dir, &Overrides::default()).unwrap().run_all().unwrap();
        out.push(manifest_bytes(&dir));
    }
    assert_eq!(out[0], out[1]);
    assert_eq!(out[0], out[2]);
}

#[test]
fn reruns_only_execute_what_changed() {
    let tmp = tempfile::tempdir().unwrap();
    let p = smoke(tmp.path());
    p.run_all().unwrap();
    let before = manifest_bytes(tmp.path());

    let again = p.run_all().unwrap();
    assert!(again.executed.is_empty(), "{again:?}");

    // a deleted artifact is rebuilt; identical bytes leave later stages cached
    std::fs::remove_file(tmp.path().join(files::ROBUSTNESS)).unwrap();
    assert_eq!(p.run_all().unwrap().executed, vec![Stage::Dknn]);
    std::fs::remove_file(tmp.path().join(files::FINETUNED)).unwrap();
    assert_eq!(p.run_all().unwrap().executed, vec![Stage::Finetune]);
    assert_eq!(manifest_bytes(tmp.path()), before);

    // a new threshold re-runs the selection and whatever consumes it
    let mut cfg = ExperimentConfig::smoke();
    cfg.shap.delta = 0.8;
    let s = Pipeline::new(cfg, tmp.path(), &Overrides::default()).unwrap().run_all().unwrap();
    assert_eq!(s.skipped[..4], [Stage::Generate, Stage::Pretrain, Stage::Finetune, Stage::Shap]);
    assert!(s.executed.contains(&Stage::Select) && s.executed.contains(&Stage::Eval));
    assert!(s.skipped.contains(&Stage::Dknn));
}

#[test]
fn report_on_an_empty_directory_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let err = smoke(&missing).run_stage(Stage::Report).unwrap_err();
    assert!(matches!(err, CliError::EmptyReport(_)), "{err}");
    assert!(!missing.exists());

    let err = smoke(tmp.path()).run_stage(Stage::Report).unwrap_err();
    assert!(matches!(err, CliError::EmptyReport(_)), "{err}");
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn stages_out_of_order_name_the_missing_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let p = smoke(tmp.path());
    match p.run_stage(Stage::Pretrain).unwrap_err() {
        CliError::Dependency { stage, artifact, producer } => {
            assert_eq!((stage, artifact.as_str(), producer), ("pretrain", files::TWIN, "generate"));
        }
        e => panic!("{e}"),
    }
    p.run_stage(Stage::Generate).unwrap();
    let err = p.run_stage(Stage::Select).unwrap_err();
    assert!(err.to_string().contains("run `shap` first"), "{err}");
}

#[test]
fn single_methods_and_epsilon_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let p = smoke(tmp.path());
    for s in [Stage::Generate, Stage::Pretrain, Stage::Finetune] {
        p.run_stage(s).unwrap();
    }
    // baseline sweeps only need the scene and the real data
    let only = Overrides {
        methods: Some(vec![Method::Exhaustive]),
        ..Overrides::default()
    };
    Pipeline::new(ExperimentConfig::smoke(), tmp.path(), &only).unwrap().run_stage(Stage::Eval).unwrap();
    let rows = read_csv(&tmp.path().join(files::sweep("exhaustive"))).unwrap();
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r["n_measurements"] == "128" && r["sweep_time_ms"] == "10"));
    assert!(!tmp.path().join(files::SUBSETS).exists());

    let eps = Overrides {
        epsilon: Some(0.5),
        ..Overrides::default()
    };
    Pipeline::new(ExperimentConfig::smoke(), tmp.path(), &eps).unwrap().run_stage(Stage::Dknn).unwrap();
    let rob = read_csv(&tmp.path().join(files::ROBUSTNESS)).unwrap();
    assert_eq!(rob.iter().map(|r| r["threshold"].as_str()).collect::<Vec<_>>(), ["0.2", "0.4"]);
}

#[test]
fn binary_reports_config_errors_with_their_pointer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "dknn": {"epsilon": "big"}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_beamlab"))
        .args(["--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(), "run"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/dknn/epsilon"), "{err}");
    assert!(!tmp.path().join("o").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_beamlab")).args(["--seed", "7", "config"]).output().unwrap();
    assert!(out.status.success());
    let resolved = ExperimentConfig::from_json(&String::from_utf8_lossy(&out.stdout)).unwrap();
    assert_eq!(resolved.seed, 7);
}
