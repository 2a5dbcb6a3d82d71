//! Run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{Pooling, DEFAULT_PARTS};
use crate::calibration::DEFAULT_BINS;
use crate::corpus::Method;
use crate::fusion::{FusionConfig, Strategy};
use crate::gateway::{GatewayMode, DEFAULT_IN_FLIGHT};

use super::OrchestratorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Name shown in reports.
    pub name: String,
    /// Query file, relative to the config file.
    pub queries: PathBuf,
    /// Claim labels (`claim_id<TAB>0|1`), relative to the config file:
    /// one file for all generators, or a directory of `<model>.tsv` files.
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Openai,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    /// Models whose responses are generated and scored.
    pub generators: Vec<String>,
    /// NLI judge for the generative methods; each generator judges its own
    /// claims when unset.
    #[serde(default)]
    pub judge: Option<String>,
    /// Decomposition model; defaults to the generator.
    #[serde(default)]
    pub decomposer: Option<String>,
    /// Model that writes the reunion answer; defaults to the generator.
    #[serde(default)]
    pub assembler: Option<String>,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default = "default_mode")]
    pub mode: GatewayMode,
    /// Cassette file, relative to the config file.
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
}

fn default_mode() -> GatewayMode {
    GatewayMode::Live
}

fn default_in_flight() -> usize {
    DEFAULT_IN_FLIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElicitationSection {
    pub methods: Vec<Method>,
    #[serde(default = "default_n_samples")]
    pub n_samples: u32,
    #[serde(default)]
    pub gen_multi_fallback: f64,
    #[serde(default)]
    pub p_true_fallback: bool,
    #[serde(default)]
    pub rating_fallback: bool,
    /// Use the raw P("True") mass instead of normalizing against "False".
    #[serde(default)]
    pub raw_p_true: bool,
}

fn default_n_samples() -> u32 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    #[serde(default)]
    pub strategies: Vec<Strategy>,
    /// Method supplying score A (generative in the usual setup).
    #[serde(default = "default_a")]
    pub a: Method,
    /// Method supplying score B.
    #[serde(default = "default_b")]
    pub b: Method,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma_a")]
    pub gamma_a: f64,
    #[serde(default = "default_k")]
    pub k: f64,
}

fn default_a() -> Method {
    Method::GenBinary
}
fn default_b() -> Method {
    Method::DisRating
}
fn default_alpha() -> f64 {
    0.5
}
fn default_gamma_a() -> f64 {
    0.1
}
fn default_k() -> f64 {
    0.02
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            strategies: Vec::new(),
            a: default_a(),
            b: default_b(),
            alpha: default_alpha(),
            gamma_a: default_gamma_a(),
            k: default_k(),
        }
    }
}

impl FusionSection {
    pub fn config(&self, strategy: Strategy) -> FusionConfig {
        FusionConfig {
            strategy,
            alpha: self.alpha,
            gamma_a: self.gamma_a,
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_bins() -> usize {
    DEFAULT_BINS
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { bins: DEFAULT_BINS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_positions")]
    pub positions: usize,
    #[serde(default)]
    pub pooling: Pooling,
    /// Methods in the alignment matrices; all scored methods when empty.
    #[serde(default)]
    pub alignment: Vec<Method>,
}

fn default_positions() -> usize {
    DEFAULT_PARTS
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            positions: DEFAULT_PARTS,
            pooling: Pooling::Global,
            alignment: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationsSection {
    /// Response-level score used by selective answering and the ensemble.
    #[serde(default = "default_b")]
    pub method: Method,
    #[serde(default = "default_rejects")]
    pub selective_rejects: Vec<f64>,
    /// Tie order for the ensemble; the generator order when empty.
    #[serde(default)]
    pub ensemble_priority: Vec<String>,
    /// Claim score used to filter reunion claims. Must be discriminative.
    #[serde(default = "default_b")]
    pub reunion_method: Method,
    #[serde(default = "default_tau")]
    pub reunion_tau: f64,
    /// Samples pooled for reunion; 0 disables it.
    #[serde(default = "default_reunion_samples")]
    pub reunion_samples: u32,
}

fn default_rejects() -> Vec<f64> {
    vec![0.0, 0.05, 0.075, 0.10]
}
fn default_tau() -> f64 {
    0.8
}
fn default_reunion_samples() -> u32 {
    5
}

impl Default for ApplicationsSection {
    fn default() -> Self {
        ApplicationsSection {
            method: default_b(),
            selective_rejects: default_rejects(),
            ensemble_priority: Vec::new(),
            reunion_method: default_b(),
            reunion_tau: default_tau(),
            reunion_samples: default_reunion_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub models: ModelsSection,
    pub elicitation: ElicitationSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub applications: ApplicationsSection,
}

fn config_error(msg: impl Into<String>) -> OrchestratorError {
    OrchestratorError::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, OrchestratorError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            OrchestratorError::Config(m) => config_error(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks everything that can be checked before any stage runs.
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let m = &self.models;
        if m.generators.is_empty() {
            return Err(config_error("models.generators is empty"));
        }
        let mut sorted = m.generators.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != m.generators.len() {
            return Err(config_error("models.generators has duplicates"));
        }
        if m.in_flight == 0 {
            return Err(config_error("models.in_flight must be at least 1"));
        }
        if m.mode != GatewayMode::Live && m.cassette.is_none() {
            return Err(config_error(format!("models.mode = {} needs models.cassette", m.mode)));
        }

        let e = &self.elicitation;
        if e.methods.is_empty() {
            return Err(config_error("elicitation.methods is empty"));
        }
        for method in &e.methods {
            if matches!(method, Method::Fused(_)) {
                return Err(config_error(format!(
                    "elicitation.methods: {method} is produced by [fusion], not elicited"
                )));
            }
        }
        if e.methods.iter().any(|m| m.is_generative()) && e.n_samples == 0 {
            return Err(config_error("elicitation.n_samples must be at least 1"));
        }
        if !(0.0..=1.0).contains(&e.gen_multi_fallback) {
            return Err(config_error("elicitation.gen_multi_fallback must be in [0, 1]"));
        }

        let f = &self.fusion;
        if !f.strategies.is_empty() {
            for (name, method) in [("a", f.a), ("b", f.b)] {
                if !e.methods.contains(&method) {
                    return Err(config_error(format!(
                        "fusion.{name} = {method} is not in elicitation.methods"
                    )));
                }
            }
            for s in &f.strategies {
                f.config(*s)
                    .validate()
                    .map_err(|err| config_error(format!("fusion: {err}")))?;
            }
        }

        if self.metrics.bins == 0 {
            return Err(config_error("metrics.bins must be at least 1"));
        }
        if self.analysis.positions == 0 {
            return Err(config_error("analysis.positions must be at least 1"));
        }
        let scored = self.scored_methods();
        for method in &self.analysis.alignment {
            if !scored.contains(method) {
                return Err(config_error(format!(
                    "analysis.alignment: {method} is not scored in this run"
                )));
            }
        }

        let a = &self.applications;
        if !scored.contains(&a.method) {
            return Err(config_error(format!(
                "applications.method = {} is not scored in this run",
                a.method
            )));
        }
        for r in &a.selective_rejects {
            if !(0.0..1.0).contains(r) {
                return Err(config_error(format!(
                    "applications.selective_rejects: {r} outside [0, 1)"
                )));
            }
        }
        for p in &a.ensemble_priority {
            if !m.generators.contains(p) {
                return Err(config_error(format!(
                    "applications.ensemble_priority: unknown model {p}"
                )));
            }
        }
        if a.reunion_samples > 0 {
            if !a.reunion_method.is_discriminative() {
                return Err(config_error(
                    "applications.reunion_method must be dis_single, dis_context or dis_rating",
                ));
            }
            if !(0.0..=1.0).contains(&a.reunion_tau) {
                return Err(config_error("applications.reunion_tau must be in [0, 1]"));
            }
            if a.reunion_samples > e.n_samples {
                return Err(config_error(
                    "applications.reunion_samples exceeds elicitation.n_samples",
                ));
            }
        }
        Ok(())
    }

    /// Elicited methods followed by fused ones.
    pub fn scored_methods(&self) -> Vec<Method> {
        let mut out = self.elicitation.methods.clone();
        out.extend(self.fusion.strategies.iter().map(|s| Method::Fused(*s)));
        out
    }

    pub fn alignment_methods(&self) -> Vec<Method> {
        if self.analysis.alignment.is_empty() {
            self.scored_methods()
        } else {
            self.analysis.alignment.clone()
        }
    }

    pub fn ensemble_priority(&self) -> Vec<String> {
        if self.applications.ensemble_priority.is_empty() {
            self.models.generators.clone()
        } else {
            self.applications.ensemble_priority.clone()
        }
    }

    pub fn judge_for<'a>(&'a self, generator: &'a str) -> &'a str {
        self.models.judge.as_deref().unwrap_or(generator)
    }

    pub fn decomposer_for<'a>(&'a self, generator: &'a str) -> &'a str {
        self.models.decomposer.as_deref().unwrap_or(generator)
    }

    pub fn assembler_for<'a>(&'a self, generator: &'a str) -> &'a str {
        self.models.assembler.as_deref().unwrap_or(generator)
    }

    /// Canonical JSON form, used in the manifest.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Identifier derived from everything that affects outputs. Execution
    /// knobs (gateway mode, cassette location, concurrency) are left out so
    /// a recorded run and its replay share one run directory.
    pub fn run_id(&self) -> String {
        let mut v = self.snapshot();
        if let Some(models) = v.get_mut("models").and_then(|m| m.as_object_mut()) {
            models.remove("mode");
            models.remove("cassette");
            models.remove("in_flight");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(&digest[..6])
    }
}
