//! Gen-Binary and Gen-Multi: confidence from how often extra samples
//! support a claim, as judged by an NLI-style prompt.

use crate::corpus::{AtomicClaim, ClaimConfidence, Method};
use crate::gateway::{Gateway, SamplingParams};
use crate::prompts;

use super::ElicitError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Binary,
    Multi,
}

impl GenMode {
    pub fn method(self) -> Method {
        match self {
            GenMode::Binary => Method::GenBinary,
            GenMode::Multi => Method::GenMulti,
        }
    }
}

/// Counts of samples supporting, conflicting with, or not mentioning a
/// claim. In binary mode everything that is not "supported" is stored in
/// `not_mentioned`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SupportTally {
    pub supported: u32,
    pub conflicting: u32,
    pub not_mentioned: u32,
    pub total: u32,
}

impl SupportTally {
    pub fn binary(supported: u32, total: u32) -> Self {
        SupportTally {
            supported,
            conflicting: 0,
            not_mentioned: total.saturating_sub(supported),
            total,
        }
    }

    pub fn multi(supported: u32, conflicting: u32, not_mentioned: u32) -> Self {
        SupportTally {
            supported,
            conflicting,
            not_mentioned,
            total: supported + conflicting + not_mentioned,
        }
    }
}

/// |K_s| / |K|.
pub fn gen_binary_confidence(tally: &SupportTally) -> Result<f64, ElicitError> {
    if tally.total == 0 {
        return Err(ElicitError::EmptyTally);
    }
    Ok(f64::from(tally.supported.min(tally.total)) / f64::from(tally.total))
}

/// |K_s| / (|K_s| + |K_c|), or `fallback` when no sample either supports
/// or contradicts the claim.
pub fn gen_multi_confidence(tally: &SupportTally, fallback: f64) -> f64 {
    let decided = tally.supported + tally.conflicting;
    if decided == 0 {
        fallback
    } else {
        f64::from(tally.supported) / f64::from(decided)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryVerdict {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiVerdict {
    Supported,
    Refuted,
    NotMentioned,
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lowercases, strips punctuation and reads a leading "yes"/"no".
pub fn parse_binary_verdict(text: &str) -> Option<BinaryVerdict> {
    match words(text).first().map(String::as_str) {
        Some("yes") => Some(BinaryVerdict::Yes),
        Some("no") => Some(BinaryVerdict::No),
        _ => None,
    }
}

/// Scans for the first verdict keyword: "support…", "refut…"/"contradict…",
/// or "not mention…". "not support…" is skipped rather than read as a
/// verdict.
pub fn parse_multi_verdict(text: &str) -> Option<MultiVerdict> {
    let w = words(text);
    let mut i = 0;
    while i < w.len() {
        let word = w[i].as_str();
        if word == "not" || word == "never" {
            match w.get(i + 1).map(String::as_str) {
                Some(next) if next.starts_with("mention") => return Some(MultiVerdict::NotMentioned),
                Some(next) if next.starts_with("support") => {
                    i += 2;
                    continue;
                }
                _ => {}
            }
        } else if word.starts_with("unmention") {
            return Some(MultiVerdict::NotMentioned);
        } else if word.starts_with("support") {
            return Some(MultiVerdict::Supported);
        } else if word.starts_with("refut") || word.starts_with("contradict") {
            return Some(MultiVerdict::Refuted);
        }
        i += 1;
    }
    None
}

/// A verdict and whether it came from the unparseable-output fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judged<V> {
    pub verdict: V,
    pub fallback: bool,
}

// One retry: the attempt number is the cache key's sample index.
const JUDGE_ATTEMPTS: u32 = 2;

fn judge<V>(
    gateway: &Gateway,
    prompt: &str,
    judge_model: &str,
    parse: fn(&str) -> Option<V>,
    fallback: V,
) -> Result<Judged<V>, ElicitError> {
    let params = SamplingParams::greedy();
    for attempt in 0..JUDGE_ATTEMPTS {
        let out = gateway.complete(judge_model, prompt, &params, attempt)?;
        if let Some(v) = parse(&out.text) {
            return Ok(Judged {
                verdict: v,
                fallback: false,
            });
        }
    }
    Ok(Judged {
        verdict: fallback,
        fallback: true,
    })
}

/// Unparseable output after a retry counts as "no".
pub fn judge_binary(
    gateway: &Gateway,
    sample: &str,
    claim: &str,
    judge_model: &str,
) -> Result<Judged<BinaryVerdict>, ElicitError> {
    if sample.trim().is_empty() || claim.trim().is_empty() {
        return Err(ElicitError::EmptyText);
    }
    let prompt = prompts::gen_binary().render(&[("sample", sample), ("sentence", claim)])?;
    judge(gateway, &prompt, judge_model, parse_binary_verdict, BinaryVerdict::No)
}

/// Unparseable output after a retry counts as "not mentioned", which leaves
/// the Gen-Multi denominator untouched.
pub fn judge_multi(
    gateway: &Gateway,
    sample: &str,
    claim: &str,
    judge_model: &str,
) -> Result<Judged<MultiVerdict>, ElicitError> {
    if sample.trim().is_empty() || claim.trim().is_empty() {
        return Err(ElicitError::EmptyText);
    }
    let prompt = prompts::gen_multi().render(&[("sample", sample), ("sentence", claim)])?;
    judge(
        gateway,
        &prompt,
        judge_model,
        parse_multi_verdict,
        MultiVerdict::NotMentioned,
    )
}

/// The extra responses K for one query. The original response is not a
/// member.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub query_id: String,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GenerativeConfig {
    pub judge_model: String,
    /// Gen-Multi score when no sample supports or contradicts a claim.
    pub multi_fallback: f64,
}

impl GenerativeConfig {
    pub fn new(judge_model: impl Into<String>) -> Self {
        GenerativeConfig {
            judge_model: judge_model.into(),
            multi_fallback: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerativeOutcome {
    pub confidences: Vec<ClaimConfidence>,
    pub tallies: Vec<SupportTally>,
    /// Judge outputs that fell back after the retry.
    pub unparseable: usize,
}

enum Vote {
    Binary(Judged<BinaryVerdict>),
    Multi(Judged<MultiVerdict>),
}

pub fn elicit_generative(
    gateway: &Gateway,
    claims: &[AtomicClaim],
    samples: &SampleSet,
    mode: GenMode,
    cfg: &GenerativeConfig,
) -> Result<GenerativeOutcome, ElicitError> {
    if claims.is_empty() {
        return Ok(GenerativeOutcome::default());
    }
    if samples.samples.is_empty() {
        return Err(ElicitError::EmptySamples(samples.query_id.clone()));
    }
    let k = samples.samples.len();
    let pairs: Vec<(usize, usize)> = (0..claims.len()).flat_map(|c| (0..k).map(move |s| (c, s))).collect();
    let votes = gateway.map_concurrent(&pairs, |&(c, s)| {
        let claim = &claims[c];
        let sample = &samples.samples[s];
        let vote = match mode {
            GenMode::Binary => judge_binary(gateway, sample, &claim.text, &cfg.judge_model).map(Vote::Binary),
            GenMode::Multi => judge_multi(gateway, sample, &claim.text, &cfg.judge_model).map(Vote::Multi),
        };
        vote.map_err(|e| e.for_claim(&claim.claim_id))
    });

    let mut tallies = vec![SupportTally::default(); claims.len()];
    let mut unparseable = 0;
    for ((c, _), vote) in pairs.iter().zip(votes) {
        let t = &mut tallies[*c];
        t.total += 1;
        match vote? {
            Vote::Binary(j) => {
                unparseable += usize::from(j.fallback);
                match j.verdict {
                    BinaryVerdict::Yes => t.supported += 1,
                    BinaryVerdict::No => t.not_mentioned += 1,
                }
            }
            Vote::Multi(j) => {
                unparseable += usize::from(j.fallback);
                match j.verdict {
                    MultiVerdict::Supported => t.supported += 1,
                    MultiVerdict::Refuted => t.conflicting += 1,
                    MultiVerdict::NotMentioned => t.not_mentioned += 1,
                }
            }
        }
    }

    let mut confidences = Vec::with_capacity(claims.len());
    for (claim, tally) in claims.iter().zip(&tallies) {
        let score = match mode {
            GenMode::Binary => gen_binary_confidence(tally)?,
            GenMode::Multi => gen_multi_confidence(tally, cfg.multi_fallback),
        };
        confidences.push(ClaimConfidence {
            claim_id: claim.claim_id.clone(),
            method: mode.method(),
            score,
        });
    }
    Ok(GenerativeOutcome {
        confidences,
        tallies,
        unparseable,
    })
}
