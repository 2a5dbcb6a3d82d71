//! Splitting a long-form response into ordered atomic claims.

use thiserror::Error;

use crate::corpus::{AtomicClaim, ResponseRecord};
use crate::gateway::{Gateway, GatewayError, SamplingParams};
use crate::prompts::{self, PromptTemplate};

/// Marker the decomposition prompt asks the model to emit for a reference
/// it could not resolve.
pub const UNRESOLVED_MARKER: &str = "[UNRESOLVED]";

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("no claims could be parsed from model output")]
    NoClaims,
    #[error("unparseable decomposition after {attempts} attempts; raw output: {raw:?}")]
    Unparseable { attempts: u32, raw: String },
    #[error("decomposition runaway: {count} claims exceeds cap of {max}")]
    Runaway { count: usize, max: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] prompts::PromptError),
}

impl DecomposeError {
    pub fn is_cassette_miss(&self) -> bool {
        matches!(self, DecomposeError::Gateway(g) if g.is_cassette_miss())
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionConfig {
    pub model_id: String,
    pub template: PromptTemplate,
    pub max_claims: usize,
    /// Attempts after the first one when the output has no bullets.
    pub retries: u32,
}

impl DecompositionConfig {
    pub fn new(model_id: impl Into<String>) -> Self {
        DecompositionConfig {
            model_id: model_id.into(),
            template: prompts::decompose(),
            max_claims: 200,
            retries: 2,
        }
    }
}

/// Bookkeeping for one decomposed response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecompositionStats {
    pub attempts: u32,
    /// Claims dropped because they still carried [`UNRESOLVED_MARKER`].
    pub unresolved_dropped: usize,
}

fn strip_bullet(line: &str) -> Option<&str> {
    let t = line.trim();
    for marker in ['-', '*', '•'] {
        if let Some(rest) = t.strip_prefix(marker) {
            return Some(rest.trim());
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(r.trim());
        }
    }
    None
}

/// Extracts bulleted lines (`- `, `* `, `1. ` styles). Lines without a
/// bullet are ignored and empty bullets are dropped.
pub fn parse_claim_list(raw: &str) -> Result<Vec<String>, DecomposeError> {
    let claims: Vec<String> = raw
        .lines()
        .filter_map(strip_bullet)
        .filter(|c| !c.is_empty())
        .map(str::to_string)
        .collect();
    if claims.is_empty() && !raw.trim().is_empty() {
        return Err(DecomposeError::NoClaims);
    }
    Ok(claims)
}

pub fn decompose(
    gateway: &Gateway,
    response: &ResponseRecord,
    cfg: &DecompositionConfig,
) -> Result<(Vec<AtomicClaim>, DecompositionStats), DecomposeError> {
    let mut stats = DecompositionStats::default();
    if response.text.trim().is_empty() {
        return Ok((Vec::new(), stats));
    }
    let prompt = cfg.template.render(&[("response", &response.text)])?;
    let params = SamplingParams::greedy();
    let mut texts = None;
    let mut last_raw = String::new();
    for attempt in 0..=cfg.retries {
        stats.attempts = attempt + 1;
        // The attempt number keys the cache so a retry is a fresh request.
        let out = gateway.complete(&cfg.model_id, &prompt, &params, attempt)?;
        match parse_claim_list(&out.text) {
            Ok(list) if !list.is_empty() => {
                texts = Some(list);
                break;
            }
            _ => last_raw = out.text,
        }
    }
    let texts = texts.ok_or(DecomposeError::Unparseable {
        attempts: stats.attempts,
        raw: last_raw,
    })?;
    if texts.len() > cfg.max_claims {
        return Err(DecomposeError::Runaway {
            count: texts.len(),
            max: cfg.max_claims,
        });
    }
    let mut claims = Vec::with_capacity(texts.len());
    for text in texts {
        if text.contains(UNRESOLVED_MARKER) {
            stats.unresolved_dropped += 1;
            continue;
        }
        let position = claims.len() as u32;
        claims.push(AtomicClaim::new(
            &response.query_id,
            response.sample_index,
            position,
            text,
        ));
    }
    Ok((claims, stats))
}
