//! Stage execution.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::analysis::{alignment_matrix, positional_profile, AlignmentMatrix};
use crate::applications::{
    atomic_reunion, ensemble, selective_qa, AppError, ReunionConfig, ReunionOutcome, SelectivePolicy,
};
use crate::calibration::{aggregate_macro, bins_csv_rows, evaluate, CalibrationReport, Granularity, BINS_CSV_HEADER};
use crate::corpus::{self, AtomicClaim, ClaimConfidence, Method, Query, ResponseRecord, ResponseScore};
use crate::decompose::{decompose, DecompositionConfig};
use crate::elicit::{
    elicit_discriminative, elicit_generative, DiscriminativeConfig, GenMode, GenerativeConfig, PTrueMode, SampleSet,
};
use crate::fusion::fuse_vectors;
use crate::gateway::{Backend, Gateway, GatewayMode, OpenAiBackend, SamplingParams};
use crate::sim::SimulatedBackend;

use super::config::{BackendKind, RunConfig};
use super::manifest::{digest_bytes, digest_file, FileDigest, RunManifest, StageFailure, StageRecord};
use super::{OrchestratorError, StageError};

pub const STAGES: [&str; 7] = ["sample", "decompose", "elicit", "fuse", "evaluate", "analyze", "apps"];

const STAGE_DIR: &str = ".stages";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Parent of the run directory.
    pub out_dir: PathBuf,
    pub mode: Option<GatewayMode>,
    pub cassette: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    /// Rerun every stage even if its outputs are current.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// One row of `reports/calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub method: String,
    pub atomic: CalibrationReport,
    #[serde(rename = "macro")]
    pub macro_: CalibrationReport,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Gateway for a config, with `base` as the directory relative paths are
/// resolved against.
pub fn build_gateway(cfg: &RunConfig, base: &Path) -> Result<Gateway, OrchestratorError> {
    let m = &cfg.models;
    let mut builder = Gateway::builder(m.mode).in_flight(m.in_flight);
    if let Some(c) = &m.cassette {
        builder = builder.cassette(resolve(base, c));
    }
    if m.mode != GatewayMode::Replay {
        let backend: Arc<dyn Backend> = match m.backend {
            BackendKind::Simulated => Arc::new(SimulatedBackend::new()),
            BackendKind::Openai => Arc::new(OpenAiBackend::from_env()),
        };
        builder = builder.backend(backend);
    }
    builder.build().map_err(|e| OrchestratorError::Config(e.to_string()))
}

fn slug(model: &str) -> String {
    model
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StageError::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| StageError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), StageError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StageError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| StageError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StageError> {
    let text = std::fs::read_to_string(path).map_err(|e| StageError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| StageError::Invalid(format!("{}: {e}", path.display())))
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    queries: &'a [Query],
    /// Labels per generator.
    labels: &'a BTreeMap<String, BTreeMap<String, u8>>,
    gateway: &'a Gateway,
}

impl Ctx<'_> {
    fn rel(&self, parts: &[&str]) -> String {
        parts.join("/")
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn responses_file(model: &str) -> String {
        format!("responses/{}.jsonl", slug(model))
    }

    fn claims_file(model: &str) -> String {
        format!("claims/{}.jsonl", slug(model))
    }

    fn sample_claims_file(model: &str) -> String {
        format!("claims/{}.samples.jsonl", slug(model))
    }

    fn conf_file(model: &str, method: Method) -> String {
        format!("confidences/{}/{}.jsonl", slug(model), method.file_stem())
    }

    fn sample_conf_file(model: &str, method: Method) -> String {
        format!("confidences/{}/samples.{}.jsonl", slug(model), method.file_stem())
    }

    fn scores_file(model: &str, method: Method) -> String {
        format!("scores/{}/{}.jsonl", slug(model), method.file_stem())
    }

    fn samples_needed(&self) -> u32 {
        let e = &self.cfg.elicitation;
        let gen = if e.methods.iter().any(|m| m.is_generative()) {
            e.n_samples
        } else {
            0
        };
        gen.max(self.cfg.applications.reunion_samples)
    }

    fn load_responses(&self, model: &str) -> Result<Vec<ResponseRecord>, StageError> {
        Ok(corpus::load_responses(&self.path(&Self::responses_file(model)))?)
    }

    fn load_confs(&self, rel: &str) -> Result<Vec<ClaimConfidence>, StageError> {
        Ok(corpus::load_confidences(&self.path(rel))?)
    }

    fn contexts(&self) -> HashMap<String, String> {
        self.queries.iter().map(|q| (q.id.clone(), q.topic.clone())).collect()
    }

    fn sample(&self) -> Result<Vec<String>, StageError> {
        let params = SamplingParams::sampling();
        let extra = self.samples_needed();
        let mut outputs = Vec::new();
        for model in &self.cfg.models.generators {
            let per_query = self.gateway.map_concurrent(self.queries, |q| {
                let mut texts = vec![self.gateway.complete(model, &q.prompt_text, &params, 0)?];
                if extra > 0 {
                    texts.extend(self.gateway.sample_k(model, &q.prompt_text, &params, extra)?);
                }
                Ok::<_, StageError>(texts)
            });
            let mut records = Vec::new();
            for (q, texts) in self.queries.iter().zip(per_query) {
                for (i, r) in texts?.into_iter().enumerate() {
                    records.push(ResponseRecord {
                        query_id: q.id.clone(),
                        model_id: model.clone(),
                        sample_index: i as u32,
                        text: r.text,
                        sampling: params,
                    });
                }
            }
            let rel = Self::responses_file(model);
            corpus::store_responses(&records, &self.path(&rel))?;
            outputs.push(rel);
        }
        Ok(outputs)
    }

    fn decompose_all(
        &self,
        model: &str,
        responses: &[&ResponseRecord],
    ) -> Result<(Vec<AtomicClaim>, serde_json::Value), StageError> {
        let dcfg = DecompositionConfig::new(self.cfg.decomposer_for(model));
        let results = self
            .gateway
            .map_concurrent(responses, |r| decompose(self.gateway, r, &dcfg));
        let mut claims = Vec::new();
        let (mut retried, mut dropped) = (0usize, 0usize);
        for r in results {
            let (c, stats) = r?;
            retried += usize::from(stats.attempts > 1);
            dropped += stats.unresolved_dropped;
            claims.extend(c);
        }
        corpus::sort_claims(&mut claims);
        let stats = json!({
            "responses": responses.len(),
            "claims": claims.len(),
            "retried": retried,
            "unresolved_dropped": dropped,
        });
        Ok((claims, stats))
    }

    fn decompose(&self) -> Result<Vec<String>, StageError> {
        let reunion = self.cfg.applications.reunion_samples;
        let mut outputs = Vec::new();
        let mut matched = 0;
        for model in &self.cfg.models.generators {
            let responses = self.load_responses(model)?;
            let originals: Vec<&ResponseRecord> = responses.iter().filter(|r| r.sample_index == 0).collect();
            let (mut claims, stats) = self.decompose_all(model, &originals)?;
            if let Some(labels) = self.labels.get(model) {
                let unknown = corpus::apply_labels(&mut claims, labels);
                matched += labels.len() - unknown.len();
            }
            let rel = Self::claims_file(model);
            corpus::store_claims(&claims, &self.path(&rel))?;
            outputs.push(rel);
            let mut all_stats = json!({ "original": stats });
            if reunion > 0 {
                let pooled: Vec<&ResponseRecord> = responses
                    .iter()
                    .filter(|r| (1..=reunion).contains(&r.sample_index))
                    .collect();
                let (sample_claims, sample_stats) = self.decompose_all(model, &pooled)?;
                let rel = Self::sample_claims_file(model);
                corpus::store_claims(&sample_claims, &self.path(&rel))?;
                outputs.push(rel);
                all_stats["samples"] = sample_stats;
            }
            let rel = format!("claims/{}.stats.json", slug(model));
            write_json(&self.path(&rel), &all_stats)?;
            outputs.push(rel);
        }
        if matched == 0 {
            log::warn!("no label matched any claim; evaluation will have nothing to score");
        }
        Ok(outputs)
    }

    fn disc_config(&self, model: &str) -> DiscriminativeConfig {
        let e = &self.cfg.elicitation;
        DiscriminativeConfig {
            p_true_mode: if e.raw_p_true {
                PTrueMode::Raw
            } else {
                PTrueMode::Normalized
            },
            p_true_fallback: e.p_true_fallback,
            rating_fallback: e.rating_fallback,
            ..DiscriminativeConfig::new(model)
        }
    }

    fn elicit(&self) -> Result<Vec<String>, StageError> {
        let e = &self.cfg.elicitation;
        let contexts = self.contexts();
        let mut outputs = Vec::new();
        for model in &self.cfg.models.generators {
            let claims = corpus::load_claims(&self.path(&Self::claims_file(model)))?;
            let responses = self.load_responses(model)?;
            let mut diagnostics = BTreeMap::new();
            for &method in &e.methods {
                let (confs, diag) = if method.is_generative() {
                    let mode = if method == Method::GenBinary {
                        GenMode::Binary
                    } else {
                        GenMode::Multi
                    };
                    let gcfg = GenerativeConfig {
                        multi_fallback: e.gen_multi_fallback,
                        ..GenerativeConfig::new(self.cfg.judge_for(model))
                    };
                    let mut confs = Vec::new();
                    let mut unparseable = 0;
                    for q in self.queries {
                        let q_claims: Vec<AtomicClaim> =
                            claims.iter().filter(|c| c.query_id == q.id).cloned().collect();
                        let samples = SampleSet {
                            query_id: q.id.clone(),
                            samples: responses
                                .iter()
                                .filter(|r| r.query_id == q.id && (1..=e.n_samples).contains(&r.sample_index))
                                .map(|r| r.text.clone())
                                .collect(),
                        };
                        let out = elicit_generative(self.gateway, &q_claims, &samples, mode, &gcfg)?;
                        unparseable += out.unparseable;
                        confs.extend(out.confidences);
                    }
                    (confs, json!({ "unparseable": unparseable }))
                } else {
                    let out =
                        elicit_discriminative(self.gateway, &claims, &contexts, method, &self.disc_config(model))?;
                    (
                        out.confidences,
                        json!({ "fallbacks": out.fallbacks, "clamped": out.clamped }),
                    )
                };
                diagnostics.insert(method.to_string(), diag);
                let rel = Self::conf_file(model, method);
                corpus::store_confidences(&confs, &self.path(&rel))?;
                outputs.push(rel);
            }
            if self.cfg.applications.reunion_samples > 0 {
                let method = self.cfg.applications.reunion_method;
                let sample_claims = corpus::load_claims(&self.path(&Self::sample_claims_file(model)))?;
                let out = elicit_discriminative(
                    self.gateway,
                    &sample_claims,
                    &contexts,
                    method,
                    &self.disc_config(model),
                )?;
                diagnostics.insert(
                    format!("samples.{method}"),
                    json!({ "fallbacks": out.fallbacks, "clamped": out.clamped }),
                );
                let rel = Self::sample_conf_file(model, method);
                corpus::store_confidences(&out.confidences, &self.path(&rel))?;
                outputs.push(rel);
            }
            let rel = format!("confidences/{}/diagnostics.json", slug(model));
            write_json(&self.path(&rel), &diagnostics)?;
            outputs.push(rel);
        }
        Ok(outputs)
    }

    fn fuse(&self) -> Result<Vec<String>, StageError> {
        let f = &self.cfg.fusion;
        let mut outputs = Vec::new();
        if f.strategies.is_empty() {
            return Ok(outputs);
        }
        for model in &self.cfg.models.generators {
            let va = self.load_confs(&Self::conf_file(model, f.a))?;
            let vb = self.load_confs(&Self::conf_file(model, f.b))?;
            for &s in &f.strategies {
                let fused = fuse_vectors(&va, &vb, &f.config(s))?;
                let rel = Self::conf_file(model, Method::Fused(s));
                corpus::store_confidences(&fused, &self.path(&rel))?;
                outputs.push(rel);
            }
        }
        Ok(outputs)
    }

    fn evaluate(&self) -> Result<Vec<String>, StageError> {
        let bins = self.cfg.metrics.bins;
        let mut rows = Vec::new();
        let mut outputs = Vec::new();
        for model in &self.cfg.models.generators {
            let claims = corpus::load_claims(&self.path(&Self::claims_file(model)))?;
            for method in self.cfg.scored_methods() {
                let confs = self.load_confs(&Self::conf_file(model, method))?;
                let atomic = evaluate(&confs, &claims, Granularity::Atomic, bins)?;
                let macro_ = evaluate(&confs, &claims, Granularity::Macro, bins)?;
                for report in [&atomic, &macro_] {
                    let rel = self.rel(&[
                        "reports",
                        "bins",
                        &format!("{}.{}.{}.csv", slug(model), method.file_stem(), report.granularity),
                    ]);
                    let mut csv = vec![BINS_CSV_HEADER.to_string()];
                    csv.extend(bins_csv_rows(report));
                    write_text(&self.path(&rel), &(csv.join("\n") + "\n"))?;
                    outputs.push(rel);
                }
                let scores = aggregate_macro(&claims, &confs)?;
                let rel = Self::scores_file(model, method);
                corpus::store_scores(&scores, &self.path(&rel))?;
                outputs.push(rel);
                rows.push(ReportRow {
                    model: model.clone(),
                    dataset: self.cfg.dataset.name.clone(),
                    method: method.to_string(),
                    atomic,
                    macro_,
                });
            }
        }
        let rel = "reports/calibration.json".to_string();
        write_json(&self.path(&rel), &rows)?;
        outputs.push(rel);
        Ok(outputs)
    }

    fn analyze(&self) -> Result<Vec<String>, StageError> {
        let a = &self.cfg.analysis;
        let mut outputs = Vec::new();
        for model in &self.cfg.models.generators {
            let claims = corpus::load_claims(&self.path(&Self::claims_file(model)))?;
            let mut profiles = Vec::new();
            for method in self.cfg.scored_methods() {
                let confs = self.load_confs(&Self::conf_file(model, method))?;
                let profile = positional_profile(&claims, &confs, a.positions, a.pooling)?;
                let rel = format!("analysis/{}/positions.{}.csv", slug(model), method.file_stem());
                write_text(&self.path(&rel), &profile.to_csv())?;
                outputs.push(rel);
                profiles.push(profile);
            }
            let rel = format!("analysis/{}/positions.json", slug(model));
            write_json(&self.path(&rel), &profiles)?;
            outputs.push(rel);

            let methods = self.cfg.alignment_methods();
            if methods.len() < 2 {
                log::warn!("alignment needs at least two methods; skipped");
                continue;
            }
            for granularity in [Granularity::Atomic, Granularity::Macro] {
                let mut vectors = Vec::new();
                for &method in &methods {
                    let v: BTreeMap<String, f64> = match granularity {
                        Granularity::Atomic => self
                            .load_confs(&Self::conf_file(model, method))?
                            .into_iter()
                            .map(|c| (c.claim_id, c.score))
                            .collect(),
                        Granularity::Macro => corpus::load_scores(&self.path(&Self::scores_file(model, method)))?
                            .into_iter()
                            .map(|s| (s.query_id, s.confidence))
                            .collect(),
                    };
                    vectors.push((method.to_string(), v));
                }
                let matrix: AlignmentMatrix = alignment_matrix(&vectors, granularity)?;
                let base = format!("analysis/{}/alignment.{granularity}", slug(model));
                write_text(&self.path(&format!("{base}.csv")), &matrix.to_csv())?;
                write_json(&self.path(&format!("{base}.json")), &matrix)?;
                outputs.push(format!("{base}.csv"));
                outputs.push(format!("{base}.json"));
            }
        }
        Ok(outputs)
    }

    fn apps(&self) -> Result<Vec<String>, StageError> {
        let app = &self.cfg.applications;
        let mut outputs = Vec::new();
        let mut per_model_scores: BTreeMap<&str, Vec<ResponseScore>> = BTreeMap::new();
        for model in &self.cfg.models.generators {
            per_model_scores.insert(
                model,
                corpus::load_scores(&self.path(&Self::scores_file(model, app.method)))?,
            );
        }

        let mut selective = Vec::new();
        for (model, scores) in &per_model_scores {
            for &rate in &app.selective_rejects {
                let out = selective_qa(scores, SelectivePolicy::RejectFraction(rate))?;
                selective.push(json!({
                    "model": model,
                    "method": app.method.to_string(),
                    "reject_fraction": rate,
                    "kept": out.kept.len(),
                    "rejected": out.rejected.iter().map(|r| r.query_id.clone()).collect::<Vec<_>>(),
                    "mean_factuality_all": out.mean_factuality_all,
                    "mean_factuality_kept": out.mean_factuality_kept,
                }));
            }
        }
        let rel = "apps/selective.json".to_string();
        write_json(&self.path(&rel), &selective)?;
        outputs.push(rel);

        let mut per_query: BTreeMap<String, BTreeMap<String, ResponseScore>> = BTreeMap::new();
        for (model, scores) in &per_model_scores {
            for s in scores {
                per_query
                    .entry(s.query_id.clone())
                    .or_default()
                    .insert(model.to_string(), s.clone());
            }
        }
        let ens = ensemble(&per_query, &self.cfg.ensemble_priority())?;
        let rel = "apps/ensemble.json".to_string();
        write_json(
            &self.path(&rel),
            &json!({ "method": app.method.to_string(), "outcome": ens }),
        )?;
        outputs.push(rel);

        if app.reunion_samples > 0 {
            for model in &self.cfg.models.generators {
                let claims = corpus::load_claims(&self.path(&Self::sample_claims_file(model)))?;
                let confs = self.load_confs(&Self::sample_conf_file(model, app.reunion_method))?;
                let rcfg = ReunionConfig {
                    tau: app.reunion_tau,
                    n_samples: app.reunion_samples,
                    assembler_model: self.cfg.assembler_for(model).to_string(),
                };
                let results = self.gateway.map_concurrent(self.queries, |q| {
                    let q_claims: Vec<AtomicClaim> = claims.iter().filter(|c| c.query_id == q.id).cloned().collect();
                    atomic_reunion(self.gateway, &q.id, &q.prompt_text, &q_claims, &confs, &rcfg)
                });
                let mut outcomes: Vec<ReunionOutcome> = Vec::new();
                let mut skipped = Vec::new();
                for (q, r) in self.queries.iter().zip(results) {
                    match r {
                        Ok(o) => outcomes.push(o),
                        Err(AppError::NothingToReunite(_)) => skipped.push(q.id.clone()),
                        Err(e) => return Err(e.into()),
                    }
                }
                let rel = format!("apps/reunion/{}.json", slug(model));
                write_json(
                    &self.path(&rel),
                    &json!({
                        "method": app.reunion_method.to_string(),
                        "tau": app.reunion_tau,
                        "n_samples": app.reunion_samples,
                        "outcomes": outcomes,
                        "skipped": skipped,
                    }),
                )?;
                outputs.push(rel);
            }
        }
        Ok(outputs)
    }

    fn run_stage(&self, name: &str) -> Result<Vec<String>, StageError> {
        match name {
            "sample" => self.sample(),
            "decompose" => self.decompose(),
            "elicit" => self.elicit(),
            "fuse" => self.fuse(),
            "evaluate" => self.evaluate(),
            "analyze" => self.analyze(),
            "apps" => self.apps(),
            other => Err(StageError::Invalid(format!("unknown stage {other}"))),
        }
    }
}

fn digests(dir: &Path, rels: &[String]) -> Result<Vec<FileDigest>, StageError> {
    rels.iter()
        .map(|rel| {
            let p = dir.join(rel);
            let bytes = std::fs::read(&p).map_err(|e| StageError::io(&p, e))?;
            Ok(FileDigest {
                path: rel.clone(),
                sha256: digest_bytes(&bytes),
            })
        })
        .collect()
}

fn stage_is_current(dir: &Path, record: &StageRecord) -> bool {
    record
        .outputs
        .iter()
        .all(|f| digest_file(&dir.join(&f.path)).is_ok_and(|d| d == f.sha256))
}

/// Label file for each generator. `dataset.labels` is either one file
/// shared by all generators or a directory of `<model>.tsv` files.
fn label_files(cfg: &RunConfig, base: &Path) -> Vec<(String, PathBuf)> {
    let rel = &cfg.dataset.labels;
    let per_model = resolve(base, rel).is_dir();
    cfg.models
        .generators
        .iter()
        .map(|m| {
            let path = if per_model {
                rel.join(format!("{}.tsv", slug(m)))
            } else {
                rel.clone()
            };
            (m.clone(), path)
        })
        .collect()
}

/// Runs every stage of the config at `config_path`, skipping stages whose
/// inputs and outputs are unchanged since the last run.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome, OrchestratorError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(mode) = opts.mode {
        cfg.models.mode = mode;
    }
    if let Some(c) = &opts.cassette {
        // Overrides are relative to the working directory, not the config.
        cfg.models.cassette = Some(std::path::absolute(c).map_err(|e| OrchestratorError::io(c, e))?);
    }
    if let Some(b) = opts.backend {
        cfg.models.backend = b;
    }
    cfg.validate()?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let queries_path = resolve(&base, &cfg.dataset.queries);
    let queries =
        corpus::load_queries(&queries_path).map_err(|e| OrchestratorError::Config(format!("dataset: {e}")))?;
    let query_digest = FileDigest {
        path: cfg.dataset.queries.display().to_string(),
        sha256: digest_file(&queries_path)?,
    };
    let mut label_digests = Vec::new();
    let mut labels = BTreeMap::new();
    for (model, rel) in label_files(&cfg, &base) {
        let path = resolve(&base, &rel);
        if !path.exists() {
            log::warn!("no labels for {model} at {}", path.display());
            continue;
        }
        let map = corpus::load_labels(&path).map_err(|e| OrchestratorError::Config(format!("dataset: {e}")))?;
        label_digests.push(FileDigest {
            path: rel.display().to_string(),
            sha256: digest_file(&path)?,
        });
        labels.insert(model, map);
    }
    label_digests.sort();
    label_digests.dedup();

    let gateway = build_gateway(&cfg, &base)?;
    let cassette_digest = match (cfg.models.mode, gateway.cassette_path()) {
        (GatewayMode::Replay, Some(p)) => Some(digest_file(p)?),
        _ => None,
    };

    let run_id = cfg.run_id();
    let run_dir = opts.out_dir.join(&run_id);
    let stage_dir = run_dir.join(STAGE_DIR);
    std::fs::create_dir_all(&stage_dir).map_err(|e| OrchestratorError::io(&stage_dir, e))?;

    let ctx = Ctx {
        cfg: &cfg,
        dir: &run_dir,
        queries: &queries,
        labels: &labels,
        gateway: &gateway,
    };
    let mut manifest = RunManifest {
        run_id: run_id.clone(),
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        gateway_mode: cfg.models.mode,
        cassette_digest: cassette_digest.clone(),
        config: cfg.snapshot(),
        stages: Vec::new(),
        failed: None,
    };
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut inputs = vec![query_digest];

    for name in STAGES {
        // Labels are first read when claims are written.
        if name == "decompose" {
            inputs.append(&mut label_digests);
        }
        let key = digest_bytes(
            json!({
                "stage": name,
                "run_id": run_id,
                "inputs": inputs,
                "cassette": cassette_digest,
            })
            .to_string()
            .as_bytes(),
        );
        let record_path = stage_dir.join(format!("{name}.json"));
        let previous: Option<StageRecord> = read_json(&record_path).ok();
        let record = match previous {
            Some(r) if !opts.force && r.key == key && stage_is_current(&run_dir, &r) => {
                log::info!("stage {name}: up to date");
                skipped.push(name.to_string());
                r
            }
            _ => {
                log::info!("stage {name}: running");
                let result = ctx.run_stage(name).and_then(|outs| digests(&run_dir, &outs));
                let outputs = match result {
                    Ok(o) => o,
                    Err(source) => {
                        let _ = std::fs::remove_file(&record_path);
                        manifest.failed = Some(StageFailure {
                            stage: name.to_string(),
                            error: source.to_string(),
                        });
                        if let Err(e) = gateway.flush() {
                            log::warn!("could not rewrite cassette: {e}");
                        }
                        manifest.store(&run_dir)?;
                        return Err(OrchestratorError::Stage {
                            stage: name.to_string(),
                            source,
                        });
                    }
                };
                let r = StageRecord {
                    name: name.to_string(),
                    key,
                    inputs: inputs.clone(),
                    outputs,
                };
                write_json(&record_path, &r).map_err(|source| OrchestratorError::Stage {
                    stage: name.to_string(),
                    source,
                })?;
                executed.push(name.to_string());
                r
            }
        };
        inputs.extend(record.outputs.iter().cloned());
        manifest.stages.push(record);
    }

    gateway.flush().map_err(|e| OrchestratorError::Stage {
        stage: "apps".to_string(),
        source: e.into(),
    })?;
    manifest.store(&run_dir)?;
    Ok(RunOutcome {
        run_dir,
        manifest,
        executed,
        skipped,
    })
}
