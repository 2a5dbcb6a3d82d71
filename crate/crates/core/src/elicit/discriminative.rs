//! Dis-Single, Dis-Context and Dis-Rating: the generating model judges its
//! own claims, either through the probability of a "True" first token or a
//! 0-10 rating between dollar signs.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::corpus::{AtomicClaim, ClaimConfidence, Method};
use crate::gateway::{Gateway, SamplingParams, TokenAlternative};
use crate::prompts;

use super::ElicitError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PTrueMode {
    /// p_true / (p_true + p_false)
    #[default]
    Normalized,
    /// p_true as reported
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrueFalseProbe {
    pub p_true: f64,
    pub p_false: f64,
    pub source_alternatives: Vec<TokenAlternative>,
}

fn truth_word(token: &str) -> Option<bool> {
    let t = token
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase();
    match t.as_str() {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Sums probability mass on "true"/"false" tokens, ignoring case,
/// surrounding whitespace and punctuation.
pub fn probe(alternatives: &[TokenAlternative]) -> TrueFalseProbe {
    let mut p_true = 0.0;
    let mut p_false = 0.0;
    for a in alternatives {
        match truth_word(&a.token) {
            Some(true) => p_true += a.probability,
            Some(false) => p_false += a.probability,
            None => {}
        }
    }
    TrueFalseProbe {
        p_true,
        p_false,
        source_alternatives: alternatives.to_vec(),
    }
}

pub fn extract_p_true(alternatives: &[TokenAlternative], mode: PTrueMode) -> Result<f64, ElicitError> {
    let p = probe(alternatives);
    let mass = p.p_true + p.p_false;
    if mass <= 0.0 {
        return Err(ElicitError::NoTruthToken);
    }
    Ok(match mode {
        PTrueMode::Normalized => (p.p_true / mass).clamp(0.0, 1.0),
        PTrueMode::Raw => p.p_true.clamp(0.0, 1.0),
    })
}

/// A parsed 0-10 rating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub value: u8,
    /// The model's number fell outside 0..=10.
    pub clamped: bool,
}

impl Rating {
    pub fn confidence(self) -> f64 {
        f64::from(self.value) / 10.0
    }
}

fn rating_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\s*(-?\d+(?:\.\d+)?)\s*\$").expect("rating regex"))
}

/// First number between dollar signs, rounded half up, clamped to 0..=10.
pub fn parse_rating(text: &str) -> Option<Rating> {
    let caps = rating_re().captures(text)?;
    let raw: f64 = caps[1].parse().ok()?;
    let rounded = (raw + 0.5).floor();
    let clamped = !(0.0..=10.0).contains(&rounded);
    Some(Rating {
        value: rounded.clamp(0.0, 10.0) as u8,
        clamped,
    })
}

#[derive(Debug, Clone)]
pub struct DiscriminativeConfig {
    pub model_id: String,
    pub p_true_mode: PTrueMode,
    /// Score 0.5 instead of failing when no truth token is in the top-k.
    pub p_true_fallback: bool,
    /// Score 0.5 instead of failing when no rating can be parsed.
    pub rating_fallback: bool,
    /// Extra attempts for Dis-Rating when the output has no `$n$`.
    pub rating_retries: u32,
}

impl DiscriminativeConfig {
    pub fn new(model_id: impl Into<String>) -> Self {
        DiscriminativeConfig {
            model_id: model_id.into(),
            p_true_mode: PTrueMode::Normalized,
            p_true_fallback: false,
            rating_fallback: false,
            rating_retries: 2,
        }
    }
}

/// A confidence plus the diagnostics that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub confidence: ClaimConfidence,
    pub fallback: bool,
    pub clamped: bool,
}

fn check_claim(claim: &AtomicClaim) -> Result<(), ElicitError> {
    if claim.text.trim().is_empty() {
        return Err(ElicitError::EmptyText);
    }
    Ok(())
}

fn p_true_call(
    gateway: &Gateway,
    claim: &AtomicClaim,
    prompt: &str,
    method: Method,
    cfg: &DiscriminativeConfig,
) -> Result<Scored, ElicitError> {
    let out = gateway.complete(&cfg.model_id, prompt, &SamplingParams::discriminative(), 0)?;
    let alts = out.first_token_alternatives.ok_or(ElicitError::NoAlternatives)?;
    let (score, fallback) = match extract_p_true(&alts, cfg.p_true_mode) {
        Ok(s) => (s, false),
        Err(ElicitError::NoTruthToken) if cfg.p_true_fallback => (0.5, true),
        Err(e) => return Err(e),
    };
    Ok(Scored {
        confidence: ClaimConfidence {
            claim_id: claim.claim_id.clone(),
            method,
            score,
        },
        fallback,
        clamped: false,
    })
}

pub fn dis_single(gateway: &Gateway, claim: &AtomicClaim, cfg: &DiscriminativeConfig) -> Result<Scored, ElicitError> {
    let run = || {
        check_claim(claim)?;
        let prompt = prompts::dis_single().render(&[("atomic_fact_piece", &claim.text)])?;
        p_true_call(gateway, claim, &prompt, Method::DisSingle, cfg)
    };
    run().map_err(|e| e.for_claim(&claim.claim_id))
}

/// `context` is the query topic.
pub fn dis_context(
    gateway: &Gateway,
    claim: &AtomicClaim,
    context: &str,
    cfg: &DiscriminativeConfig,
) -> Result<Scored, ElicitError> {
    let run = || {
        check_claim(claim)?;
        if context.trim().is_empty() {
            return Err(ElicitError::MissingContext(claim.query_id.clone()));
        }
        let prompt = prompts::dis_context().render(&[("context", context), ("atomic_fact_piece", &claim.text)])?;
        p_true_call(gateway, claim, &prompt, Method::DisContext, cfg)
    };
    run().map_err(|e| e.for_claim(&claim.claim_id))
}

pub fn dis_rating(
    gateway: &Gateway,
    claim: &AtomicClaim,
    context: &str,
    cfg: &DiscriminativeConfig,
) -> Result<Scored, ElicitError> {
    let run = || {
        check_claim(claim)?;
        if context.trim().is_empty() {
            return Err(ElicitError::MissingContext(claim.query_id.clone()));
        }
        let prompt = prompts::dis_rating().render(&[("context", context), ("atomic_fact_piece", &claim.text)])?;
        let params = SamplingParams::discriminative();
        let mut raw = String::new();
        let attempts = cfg.rating_retries + 1;
        for attempt in 0..attempts {
            let out = gateway.complete(&cfg.model_id, &prompt, &params, attempt)?;
            if let Some(r) = parse_rating(&out.text) {
                if r.clamped {
                    log::warn!("claim {}: rating {:?} clamped to {}", claim.claim_id, out.text, r.value);
                }
                return Ok(Scored {
                    confidence: ClaimConfidence {
                        claim_id: claim.claim_id.clone(),
                        method: Method::DisRating,
                        score: r.confidence(),
                    },
                    fallback: false,
                    clamped: r.clamped,
                });
            }
            raw = out.text;
        }
        if cfg.rating_fallback {
            return Ok(Scored {
                confidence: ClaimConfidence {
                    claim_id: claim.claim_id.clone(),
                    method: Method::DisRating,
                    score: 0.5,
                },
                fallback: true,
                clamped: false,
            });
        }
        Err(ElicitError::NoRating { attempts, raw })
    };
    run().map_err(|e| e.for_claim(&claim.claim_id))
}

#[derive(Debug, Clone, Default)]
pub struct DiscriminativeOutcome {
    pub confidences: Vec<ClaimConfidence>,
    pub fallbacks: usize,
    pub clamped: usize,
}

/// Scores every claim with one discriminative method. `contexts` maps query
/// id to topic and is consulted by Dis-Context and Dis-Rating.
pub fn elicit_discriminative(
    gateway: &Gateway,
    claims: &[AtomicClaim],
    contexts: &HashMap<String, String>,
    method: Method,
    cfg: &DiscriminativeConfig,
) -> Result<DiscriminativeOutcome, ElicitError> {
    if !method.is_discriminative() {
        return Err(ElicitError::NotElicitable(method.to_string()));
    }
    let results = gateway.map_concurrent(claims, |claim| {
        let context = || contexts.get(&claim.query_id).map(String::as_str).unwrap_or_default();
        match method {
            Method::DisSingle => dis_single(gateway, claim, cfg),
            Method::DisContext => dis_context(gateway, claim, context(), cfg),
            _ => dis_rating(gateway, claim, context(), cfg),
        }
    });
    let mut out = DiscriminativeOutcome::default();
    for r in results {
        let s = r?;
        out.fallbacks += usize::from(s.fallback);
        out.clamped += usize::from(s.clamped);
        out.confidences.push(s.confidence);
    }
    Ok(out)
}
