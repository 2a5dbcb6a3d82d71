//! Regenerates the end-to-end fixture under `tests/fixtures/e2e`: queries,
//! a cassette recorded from the simulated backend, claim labels taken from
//! the simulated world's ground truth, and the golden manifest and report
//! of a replayed run.
//!
//! cargo run -p factcal --example record_fixture

use std::fs;
use std::path::{Path, PathBuf};

use factcal::corpus::{self, DatasetTag, Query};
use factcal::gateway::GatewayMode;
use factcal::orchestrator::{self, RunOptions};
use factcal::sim;

const CONFIG: &str = r#"[dataset]
name = "fixture"
queries = "queries.jsonl"
labels = "labels"

[models]
generators = ["sim-alpha", "sim-beta", "sim-gamma"]
backend = "simulated"
mode = "replay"
cassette = "cassette.jsonl"

[elicitation]
methods = ["gen_binary", "gen_multi", "dis_single", "dis_context", "dis_rating"]
n_samples = 20

[fusion]
strategies = ["wavg", "adjusted_alpha", "damped_fusion", "min_conf", "hmean", "prod_conf"]
a = "gen_binary"
b = "dis_rating"

[metrics]
bins = 10

[analysis]
positions = 5

[applications]
method = "dis_rating"
selective_rejects = [0.0, 0.05, 0.075, 0.10]
reunion_method = "dis_rating"
reunion_tau = 0.8
reunion_samples = 5
"#;

fn queries() -> Vec<Query> {
    let bios = ["Ines Varga", "Tomas Okafor", "Lena Moreau"];
    let wild = ["Kavi Rasmussen", "Marta Ilunga"];
    let mut out = Vec::new();
    for (tag, names) in [(DatasetTag::Bios, &bios[..]), (DatasetTag::Wildhallu, &wild[..])] {
        for name in names {
            out.push(Query {
                id: format!("q{}", out.len() + 1),
                topic: name.to_string(),
                prompt_text: tag.entity_prompt(name).expect("entity prompt"),
                dataset_tag: tag,
            });
        }
    }
    out
}

fn run(config: &Path, out: &Path, mode: GatewayMode) -> Result<PathBuf, orchestrator::OrchestratorError> {
    let opts = RunOptions {
        out_dir: out.to_path_buf(),
        mode: Some(mode),
        ..RunOptions::default()
    };
    orchestrator::run(config, &opts).map(|o| o.run_dir)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e");
    let labels_dir = dir.join("labels");
    let golden = dir.join("golden");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&labels_dir)?;
    fs::create_dir_all(&golden)?;
    corpus::store_queries(&queries(), &dir.join("queries.jsonl"))?;
    let config = dir.join("config.toml");
    fs::write(&config, CONFIG)?;
    let cfg = orchestrator::RunConfig::parse(CONFIG)?;

    // First pass records every model call up to evaluation, which needs
    // labels for the claims that pass produces.
    let scratch = tempfile::tempdir()?;
    let run_dir = scratch.path().join(cfg.run_id());
    match run(&config, scratch.path(), GatewayMode::Record) {
        Err(orchestrator::OrchestratorError::Stage { stage, .. }) if stage == "evaluate" => {}
        other => return Err(format!("unexpected first pass result: {other:?}").into()),
    }
    for model in &cfg.models.generators {
        let claims = corpus::load_claims(&run_dir.join(format!("claims/{model}.jsonl")))?;
        let labels = claims
            .iter()
            .filter_map(|c| sim::label_for(&c.text).map(|l| (c.claim_id.clone(), l)))
            .collect();
        corpus::store_labels(&labels, &labels_dir.join(format!("{model}.tsv")))?;
    }
    run(&config, scratch.path(), GatewayMode::Record)?;

    let replay = tempfile::tempdir()?;
    let replay_dir = run(&config, replay.path(), GatewayMode::Replay)?;
    fs::copy(replay_dir.join("manifest.json"), golden.join("manifest.json"))?;
    fs::write(golden.join("report.txt"), orchestrator::report(&replay_dir)?)?;
    println!("fixture written to {}", dir.display());
    Ok(())
}
