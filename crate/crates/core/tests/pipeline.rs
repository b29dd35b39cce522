use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use qndsim::pipeline::{Pipeline, PipelineConfig, RunManifest, Stage, CONFIG_SCHEMA};
use qndsim::Error;

fn small_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.output_dir = out.to_path_buf();
    cfg.shot_count = 200;
    cfg.dynamics.orbit_bank_size = 64;
    cfg.calibration.shots_per_group = 150;
    cfg.noise_scan.shots = 800;
    cfg.noise_scan.empty_shots = 200;
    cfg.noise_scan.bin_size = 100;
    cfg.covariance.shots_per_group = 300;
    cfg.covariance.empty_shots = 300;
    cfg.qnd.training_shots = 300;
    cfg.qnd.shots = 300;
    cfg
}

fn read_dir_bytes(dir: &Path, manifest: &RunManifest) -> BTreeMap<String, Vec<u8>> {
    manifest
        .files()
        .map(|e| (e.path.clone(), std::fs::read(dir.join(&e.path)).unwrap()))
        .chain(std::iter::once(("manifest.json".into(), std::fs::read(dir.join("manifest.json")).unwrap())))
        .collect()
}

struct FullRun {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    hash: String,
    manifest: RunManifest,
}

/// One complete small run shared by the tests in this file.
fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let p = Pipeline::new(small_config(&dir)).unwrap();
        let manifest = p.run(Stage::All).unwrap();
        FullRun { hash: p.config_hash().to_string(), dir, manifest, _tmp: tmp }
    })
}

#[test]
fn full_run_records_every_stage_and_artifact() {
    let run = full_run();
    let stages: Vec<&str> = run.manifest.stages.keys().map(String::as_str).collect();
    for s in ["calibrate", "simulate", "fit", "noise-scan", "covariance", "matched-filter", "qnd"] {
        assert!(stages.contains(&s), "missing stage {s}");
    }
    run.manifest.verify(&run.dir).unwrap();
    assert!(run.dir.join("config.json").exists());
    assert!(run.dir.join("timings.json").exists());
    let on_disk: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(run.dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(on_disk.stages, run.manifest.stages);
    assert_eq!(on_disk.config_hash, run.hash);

    for e in run.manifest.files() {
        let path = run.dir.join(&e.path);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len() as u64, e.bytes);
        match path.extension().and_then(|x| x.to_str()) {
            Some("csv") => {
                let text = String::from_utf8(bytes).unwrap();
                let head = text.lines().next().unwrap();
                assert!(head.starts_with("# schema="), "{}: {head}", e.path);
                assert!(head.contains(&format!("config_hash={}", run.hash)), "{}", e.path);
            }
            Some("json") | Some("jsonl") => {
                let text = String::from_utf8(bytes).unwrap();
                // JSON-lines files carry the envelope on their first line
                let envelope = if e.path.ends_with(".jsonl") { text.lines().next().unwrap() } else { &text };
                let first: serde_json::Value = serde_json::from_str(envelope).unwrap();
                assert_eq!(first["config_hash"], run.hash.as_str(), "{}", e.path);
                assert_eq!(first["schema"], e.schema.as_str());
            }
            Some("bin") => {
                let rows = u64::from_le_bytes(bytes[..8].try_into().unwrap());
                let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
                assert_eq!(bytes.len() as u64, 16 + 8 * rows * cols);
            }
            other => panic!("unexpected artifact type {other:?} for {}", e.path),
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let run = full_run();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("again");
    let manifest = Pipeline::new(small_config(&dir)).unwrap().run(Stage::All).unwrap();
    assert_eq!(manifest.stages, run.manifest.stages);
    let a = read_dir_bytes(&run.dir, &run.manifest);
    let b = read_dir_bytes(&dir, &manifest);
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs between runs");
    }
}

#[test]
fn downstream_stage_rejects_artifacts_of_another_config() {
    let run = full_run();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("copy");
    std::fs::create_dir_all(&dir).unwrap();
    for e in run.manifest.files() {
        std::fs::copy(run.dir.join(&e.path), dir.join(&e.path)).unwrap();
    }
    let mut cfg = small_config(&dir);
    cfg.master_seed += 1;
    match Pipeline::new(cfg).unwrap().run(Stage::Fit) {
        Err(Error::StaleInput { .. }) => {}
        other => panic!("expected a stale-input error, got {other:?}"),
    }
}

#[test]
fn downstream_stage_without_inputs_reports_the_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_config(tmp.path())).unwrap();
    for stage in [Stage::Fit, Stage::NoiseScan, Stage::Covariance, Stage::MatchedFilter, Stage::Qnd] {
        match p.run(stage) {
            Err(Error::MissingArtifact(path)) => assert!(path.starts_with(tmp.path())),
            other => panic!("{stage}: expected a missing-artifact error, got {other:?}"),
        }
    }
}

#[test]
fn stage_names_round_trip() {
    for s in ["calibrate", "simulate", "fit", "noise-scan", "covariance", "matched-filter", "qnd", "all"] {
        let stage: Stage = s.parse().unwrap();
        assert_eq!(stage.to_string(), s);
    }
    assert!(matches!("squeeze".parse::<Stage>(), Err(Error::UnknownStage(_))));
}

#[test]
fn bundled_default_config_matches_the_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let cfg = PipelineConfig::load(&path, Vec::new()).unwrap();
    assert_eq!(cfg, PipelineConfig::default());
}

#[test]
fn configuration_errors_are_reported_as_such() {
    let bad = |env: Vec<(&str, &str)>| {
        let env = env.into_iter().map(|(k, v)| (k.to_string(), v.to_string()));
        matches!(PipelineConfig::from_defaults(env), Err(Error::Config(_)))
    };
    assert!(bad(vec![("QNDSIM_ENSEMBLE__NO_SUCH_KEY", "1")]));
    assert!(bad(vec![("QNDSIM_ENSEMBLE__TEMPERATURE_UK", "warm")]));
    assert!(bad(vec![("QNDSIM_PUMPING__BETA", "0.5")]));
    assert!(bad(vec![("QNDSIM_SCHEMA_VERSION", "\"qndsim-config/0\"")]));
    assert!(bad(vec![("QNDSIM_QND_SCHEDULE__SAMPLE_PERIOD_US", "0.25")]));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(PipelineConfig::load(&path, Vec::new()), Err(Error::Config(_))));
    let mut v = serde_json::to_value(PipelineConfig::default()).unwrap();
    v["extra"] = serde_json::json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(PipelineConfig::load(&path, Vec::new()), Err(Error::Config(_))));
    assert!(matches!(PipelineConfig::load(&tmp.path().join("absent.json"), Vec::new()), Err(Error::Config(_))));

    let env = vec![("QNDSIM_NOISE_SCAN__SHOTS".to_string(), "1234".to_string())];
    let cfg = PipelineConfig::from_defaults(env).unwrap();
    assert_eq!(cfg.noise_scan.shots, 1234);
    assert_eq!(cfg.schema_version, CONFIG_SCHEMA);
    assert_ne!(cfg.hash(), PipelineConfig::default().hash());
}
