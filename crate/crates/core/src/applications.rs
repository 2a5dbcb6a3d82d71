//! Downstream uses of claim confidence: selective answering, picking the
//! most confident model per query, and reassembling confident claims from
//! several samples into one answer.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::compensated_sum;
use crate::corpus::{AtomicClaim, ClaimConfidence, ResponseScore};
use crate::gateway::{Gateway, GatewayError, SamplingParams};
use crate::prompts::{self, PromptError};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("no responses")]
    Empty,
    #[error("reject fraction must be in [0, 1) (got {0})")]
    RejectFraction(f64),
    #[error("threshold must be in [0, 1] (got {0})")]
    Threshold(f64),
    #[error("ensemble for query {0} has no candidate models")]
    NoModels(String),
    #[error("nothing to reunite for query {0}")]
    NothingToReunite(String),
    #[error("claim {0} has no confidence")]
    MissingConfidence(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl AppError {
    pub fn is_cassette_miss(&self) -> bool {
        matches!(self, AppError::Gateway(g) if g.is_cassette_miss())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectivePolicy {
    /// Reject the lowest-confidence `floor(f * n)` responses.
    RejectFraction(f64),
    /// Reject responses with confidence strictly below `t`.
    Threshold(f64),
}

impl SelectivePolicy {
    pub fn validate(&self) -> Result<(), AppError> {
        match *self {
            SelectivePolicy::RejectFraction(f) if !(0.0..1.0).contains(&f) => Err(AppError::RejectFraction(f)),
            SelectivePolicy::Threshold(t) if !(0.0..=1.0).contains(&t) => Err(AppError::Threshold(t)),
            _ => Ok(()),
        }
    }
}

/// Rejection order: lowest confidence first; among equal confidences the
/// later query id goes first.
fn rejection_order(responses: &[ResponseScore]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..responses.len()).collect();
    order.sort_by(|&a, &b| {
        responses[a]
            .confidence
            .total_cmp(&responses[b].confidence)
            .then_with(|| responses[b].query_id.cmp(&responses[a].query_id))
    });
    order
}

/// Confidence threshold that rejects `fraction` of a validation set: the
/// confidence of the first response that survives.
pub fn calibrate_threshold(fraction: f64, validation: &[ResponseScore]) -> Result<f64, AppError> {
    SelectivePolicy::RejectFraction(fraction).validate()?;
    if validation.is_empty() {
        return Err(AppError::Empty);
    }
    let order = rejection_order(validation);
    let cut = (fraction * validation.len() as f64).floor() as usize;
    Ok(validation[order[cut]].confidence)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectiveOutcome {
    pub policy: SelectivePolicy,
    pub kept: Vec<ResponseScore>,
    pub rejected: Vec<ResponseScore>,
    pub mean_factuality_all: f64,
    /// `None` if every response was rejected (threshold policy only).
    pub mean_factuality_kept: Option<f64>,
}

fn mean_factuality(scores: &[ResponseScore]) -> Option<f64> {
    (!scores.is_empty()).then(|| compensated_sum(scores.iter().map(|s| s.factuality)) / scores.len() as f64)
}

/// Splits responses into kept and rejected sets. Both keep the input order.
pub fn selective_qa(responses: &[ResponseScore], policy: SelectivePolicy) -> Result<SelectiveOutcome, AppError> {
    policy.validate()?;
    if responses.is_empty() {
        return Err(AppError::Empty);
    }
    let rejected_idx: HashSet<usize> = match policy {
        SelectivePolicy::RejectFraction(f) => {
            let cut = (f * responses.len() as f64).floor() as usize;
            rejection_order(responses).into_iter().take(cut).collect()
        }
        SelectivePolicy::Threshold(t) => (0..responses.len()).filter(|&i| responses[i].confidence < t).collect(),
    };
    let (rejected, kept): (Vec<_>, Vec<_>) = responses
        .iter()
        .enumerate()
        .partition(|(i, _)| rejected_idx.contains(i));
    let kept: Vec<ResponseScore> = kept.into_iter().map(|(_, r)| r.clone()).collect();
    let rejected: Vec<ResponseScore> = rejected.into_iter().map(|(_, r)| r.clone()).collect();
    Ok(SelectiveOutcome {
        policy,
        mean_factuality_all: mean_factuality(responses).expect("non-empty"),
        mean_factuality_kept: mean_factuality(&kept),
        kept,
        rejected,
    })
}

fn priority_rank<'a>(priority: &'a [String]) -> impl Fn(&str) -> (usize, &str) + 'a {
    move |model: &str| {
        let rank = priority.iter().position(|p| p == model).unwrap_or(priority.len());
        // Models missing from the priority list share the last rank and
        // fall back to name order.
        (rank, if rank == priority.len() { model } else { "" })
    }
}

/// Most confident model for one query. Exact ties go to the model listed
/// first in `priority`.
pub fn ensemble_select<'a>(
    query_id: &str,
    per_model: &'a BTreeMap<String, ResponseScore>,
    priority: &[String],
) -> Result<(&'a str, &'a ResponseScore), AppError> {
    let rank = priority_rank(priority);
    per_model
        .iter()
        .max_by(|(ma, a), (mb, b)| {
            a.confidence
                .total_cmp(&b.confidence)
                .then_with(|| rank(mb).cmp(&rank(ma)))
        })
        .map(|(m, s)| (m.as_str(), s))
        .ok_or_else(|| AppError::NoModels(query_id.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleChoice {
    pub query_id: String,
    pub model_id: String,
    pub confidence: f64,
    pub factuality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutcome {
    pub choices: Vec<EnsembleChoice>,
    /// Fraction of queries answered by each model.
    pub distribution: BTreeMap<String, f64>,
    pub mean_factuality: f64,
}

/// Runs `ensemble_select` over every query (`query -> model -> score`).
pub fn ensemble(
    per_query: &BTreeMap<String, BTreeMap<String, ResponseScore>>,
    priority: &[String],
) -> Result<EnsembleOutcome, AppError> {
    if per_query.is_empty() {
        return Err(AppError::Empty);
    }
    let mut choices = Vec::with_capacity(per_query.len());
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for models in per_query.values() {
        for m in models.keys() {
            counts.entry(m.clone()).or_insert(0);
        }
    }
    for (query_id, models) in per_query {
        let (model, score) = ensemble_select(query_id, models, priority)?;
        *counts.get_mut(model).expect("model counted") += 1;
        choices.push(EnsembleChoice {
            query_id: query_id.clone(),
            model_id: model.to_string(),
            confidence: score.confidence,
            factuality: score.factuality,
        });
    }
    let n = choices.len() as f64;
    Ok(EnsembleOutcome {
        distribution: counts.into_iter().map(|(m, c)| (m, c as f64 / n)).collect(),
        mean_factuality: compensated_sum(choices.iter().map(|c| c.factuality)) / n,
        choices,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReunionConfig {
    pub tau: f64,
    pub n_samples: u32,
    pub assembler_model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedClaim {
    pub claim_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReunionOutcome {
    pub query_id: String,
    pub tau: f64,
    pub retained: Vec<RetainedClaim>,
    pub text: String,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Claims of samples `1..=n_samples` scoring at least `tau`, in (sample,
/// position) order, keeping the first of any texts equal after whitespace
/// and case normalization.
pub fn retain_claims(
    claims: &[AtomicClaim],
    confs: &[ClaimConfidence],
    tau: f64,
    n_samples: u32,
) -> Result<Vec<RetainedClaim>, AppError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(AppError::Threshold(tau));
    }
    let lookup: HashMap<&str, f64> = confs.iter().map(|c| (c.claim_id.as_str(), c.score)).collect();
    let mut ordered: Vec<&AtomicClaim> = claims
        .iter()
        .filter(|c| (1..=n_samples).contains(&c.sample_index))
        .collect();
    ordered.sort_by_key(|c| (c.sample_index, c.position));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in ordered {
        let score = *lookup
            .get(c.claim_id.as_str())
            .ok_or_else(|| AppError::MissingConfidence(c.claim_id.clone()))?;
        if score >= tau && seen.insert(normalize(&c.text)) {
            out.push(RetainedClaim {
                claim_id: c.claim_id.clone(),
                text: c.text.clone(),
                score,
            });
        }
    }
    Ok(out)
}

/// Filters one query's sample claims by confidence and asks the assembler
/// model to write them up as a single answer.
pub fn atomic_reunion(
    gateway: &Gateway,
    query_id: &str,
    question: &str,
    claims: &[AtomicClaim],
    confs: &[ClaimConfidence],
    cfg: &ReunionConfig,
) -> Result<ReunionOutcome, AppError> {
    let retained = retain_claims(claims, confs, cfg.tau, cfg.n_samples)?;
    if retained.is_empty() {
        return Err(AppError::NothingToReunite(query_id.to_string()));
    }
    let list: Vec<String> = retained.iter().map(|c| format!("- {}", c.text)).collect();
    let prompt = prompts::reunion().render(&[("question", question), ("claims", &list.join("\n"))])?;
    let completion = gateway.complete(&cfg.assembler_model, &prompt, &SamplingParams::greedy(), 0)?;
    Ok(ReunionOutcome {
        query_id: query_id.to_string(),
        tau: cfg.tau,
        retained,
        text: completion.text.trim().to_string(),
    })
}
