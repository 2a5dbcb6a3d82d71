//! Per-claim confidence elicitation.
//!
//! Generative methods judge a claim against extra sampled responses;
//! discriminative methods ask the generating model about the claim itself.

pub mod discriminative;
pub mod generative;

pub use discriminative::{
    dis_context, dis_rating, dis_single, elicit_discriminative, extract_p_true, parse_rating, probe,
    DiscriminativeConfig, DiscriminativeOutcome, PTrueMode, Rating, Scored, TrueFalseProbe,
};
pub use generative::{
    elicit_generative, gen_binary_confidence, gen_multi_confidence, judge_binary, judge_multi, parse_binary_verdict,
    parse_multi_verdict, BinaryVerdict, GenMode, GenerativeConfig, GenerativeOutcome, Judged, MultiVerdict, SampleSet,
    SupportTally,
};

use thiserror::Error;

use crate::gateway::GatewayError;
use crate::prompts::PromptError;

#[derive(Debug, Error)]
pub enum ElicitError {
    #[error("tally total must be at least 1")]
    EmptyTally,
    #[error("sample set for query {0} is empty")]
    EmptySamples(String),
    #[error("empty text")]
    EmptyText,
    #[error("no context for query {0}")]
    MissingContext(String),
    #[error("no truth token in top-k")]
    NoTruthToken,
    #[error("logprobs missing from completion")]
    NoAlternatives,
    #[error("no $n$ rating in output after {attempts} attempts: {raw:?}")]
    NoRating { attempts: u32, raw: String },
    #[error("{0} is not a per-claim elicitation method")]
    NotElicitable(String),
    #[error("claim {claim_id}: {source}")]
    Claim {
        claim_id: String,
        #[source]
        source: Box<ElicitError>,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl ElicitError {
    pub fn is_cassette_miss(&self) -> bool {
        match self {
            ElicitError::Gateway(g) => g.is_cassette_miss(),
            ElicitError::Claim { source, .. } => source.is_cassette_miss(),
            _ => false,
        }
    }

    fn for_claim(self, claim_id: &str) -> Self {
        match self {
            ElicitError::Claim { .. } => self,
            other => ElicitError::Claim {
                claim_id: claim_id.to_string(),
                source: Box::new(other),
            },
        }
    }
}
