use std::fs;
use std::path::{Path, PathBuf};

use factcal::gateway::GatewayMode;
use factcal::orchestrator::{self, OrchestratorError, RunOptions, EXIT_CASSETTE_MISS, EXIT_CONFIG, STAGES};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), &target).unwrap();
        }
    }
}

fn replay(out: &Path) -> RunOptions {
    RunOptions {
        out_dir: out.to_path_buf(),
        mode: Some(GatewayMode::Replay),
        ..Default::default()
    }
}

#[test]
fn second_run_skips_every_stage() {
    let out = tempfile::tempdir().unwrap();
    let config = fixture().join("config.toml");
    let first = orchestrator::run(&config, &replay(out.path())).unwrap();
    assert_eq!(first.executed, STAGES.to_vec());
    let manifest = fs::read(first.run_dir.join("manifest.json")).unwrap();

    let second = orchestrator::run(&config, &replay(out.path())).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);
    assert_eq!(second.skipped.len(), STAGES.len());
    assert_eq!(fs::read(second.run_dir.join("manifest.json")).unwrap(), manifest);

    let forced = orchestrator::run(
        &config,
        &RunOptions {
            force: true,
            ..replay(out.path())
        },
    )
    .unwrap();
    assert_eq!(forced.executed.len(), STAGES.len());
    assert_eq!(fs::read(forced.run_dir.join("manifest.json")).unwrap(), manifest);
}

#[test]
fn changed_labels_rerun_only_downstream_stages() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path().join("fixture");
    copy_dir(&fixture(), &dir);
    let config = dir.join("config.toml");
    let out = work.path().join("runs");
    orchestrator::run(&config, &replay(&out)).unwrap();

    let labels = dir.join("labels/sim-alpha.tsv");
    let text = fs::read_to_string(&labels).unwrap();
    let flipped: String = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            if i == 1 {
                let (id, l) = line.rsplit_once('\t').unwrap();
                format!("{id}\t{}\n", if l == "1" { 0 } else { 1 })
            } else {
                format!("{line}\n")
            }
        })
        .collect();
    assert_ne!(flipped, text);
    fs::write(&labels, flipped).unwrap();

    let rerun = orchestrator::run(&config, &replay(&out)).unwrap();
    assert!(rerun.skipped.contains(&"sample".to_string()));
    assert!(rerun.executed.contains(&"evaluate".to_string()));
}

#[test]
fn unknown_method_is_a_config_error() {
    let work = tempfile::tempdir().unwrap();
    let dir = work.path().join("fixture");
    copy_dir(&fixture(), &dir);
    let config = dir.join("config.toml");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("\"gen_multi\"", "\"gen_telepathy\"");
    fs::write(&config, text).unwrap();
    let err = orchestrator::run(&config, &replay(work.path())).unwrap_err();
    assert!(matches!(err, OrchestratorError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), EXIT_CONFIG);
}

#[test]
fn empty_cassette_reports_a_miss_and_a_partial_manifest() {
    let work = tempfile::tempdir().unwrap();
    let cassette = work.path().join("empty.jsonl");
    fs::write(&cassette, "").unwrap();
    let opts = RunOptions {
        cassette: Some(cassette),
        ..replay(&work.path().join("runs"))
    };
    let err = orchestrator::run(&fixture().join("config.toml"), &opts).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_CASSETTE_MISS, "{err}");

    let run_dir = fs::read_dir(work.path().join("runs"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed"]["stage"], "sample");
    assert!(matches!(
        orchestrator::report(&run_dir),
        Err(OrchestratorError::Missing(_))
    ));
}

#[test]
fn report_needs_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        orchestrator::report(dir.path()),
        Err(OrchestratorError::Missing(_))
    ));
}

#[test]
fn run_outputs_cover_all_applications() {
    let out = tempfile::tempdir().unwrap();
    let outcome = orchestrator::run(&fixture().join("config.toml"), &replay(out.path())).unwrap();
    let dir = &outcome.run_dir;
    for file in [
        "apps/selective.json",
        "apps/ensemble.json",
        "apps/reunion/sim-alpha.json",
        "reports/calibration.json",
    ] {
        assert!(dir.join(file).is_file(), "missing {file}");
    }
    let selective: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("apps/selective.json")).unwrap()).unwrap();
    assert!(!selective.to_string().is_empty());
    let reunion: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("apps/reunion/sim-alpha.json")).unwrap()).unwrap();
    assert_eq!(reunion["tau"], 0.8);
    assert!(!reunion["outcomes"].as_array().unwrap().is_empty());
}
