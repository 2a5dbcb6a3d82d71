//! A deterministic stand-in for a chat model.
//!
//! The simulated world holds a fixed set of facts about any named entity
//! (birthplace, occupation, ...), derived by hashing. Each simulated model
//! knows some of those facts and guesses the rest, so its sampled answers
//! agree on what it knows and scatter on what it does not. The backend
//! recognizes every bundled prompt and answers the way a model would:
//! biographies for generation prompts, bullet lists for decomposition,
//! verdicts for judge prompts, and True/False logprobs or `$n$` ratings for
//! self-evaluation. Answers depend only on the request, so recording and
//! replaying a run through the gateway is reproducible.

use sha2::{Digest, Sha256};

use crate::gateway::{Backend, BackendError, ChatRequest, CompletionResult, TokenAlternative};
use crate::prompts::{self, PromptTemplate};

struct Attribute {
    marker: &'static str,
    values: &'static [&'static str],
}

const ATTRIBUTES: &[Attribute] = &[
    Attribute {
        marker: " was born in ",
        values: &[
            "Lisbon", "Osaka", "Quito", "Tallinn", "Accra", "Perth", "Bergen", "Cusco",
        ],
    },
    Attribute {
        marker: " grew up in ",
        values: &[
            "a fishing village",
            "a mining town",
            "the capital",
            "a farming valley",
            "an island port",
            "a border town",
        ],
    },
    Attribute {
        marker: " worked as ",
        values: &[
            "a chemist",
            "a painter",
            "an architect",
            "a journalist",
            "a violinist",
            "a civil engineer",
            "a botanist",
        ],
    },
    Attribute {
        marker: " studied at ",
        values: &[
            "a technical institute",
            "a music conservatory",
            "a naval academy",
            "a teachers college",
            "a medical school",
        ],
    },
    Attribute {
        marker: " received ",
        values: &[
            "a national science medal",
            "a lifetime achievement award",
            "an honorary doctorate",
            "a regional arts prize",
            "no major awards",
        ],
    },
    Attribute {
        marker: " is best known for ",
        values: &[
            "a series of river bridges",
            "a study of alpine mosses",
            "a cycle of chamber works",
            "reporting on harbor strikes",
            "a method for dating pottery",
            "murals in public libraries",
        ],
    },
    Attribute {
        marker: " married ",
        values: &[
            "a fellow researcher",
            "a stage actor",
            "a ship captain",
            "a school teacher",
            "a diplomat",
        ],
    },
    Attribute {
        marker: " is based in ",
        values: &[
            "Montreal",
            "Nairobi",
            "Seville",
            "Hanoi",
            "Valparaiso",
            "Krakow",
            "Adelaide",
        ],
    },
];

fn hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniform value in [0, 1) derived from `parts`.
fn unit(parts: &[&str]) -> f64 {
    (hash(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// A claim the simulated world can check: `entity`, attribute index, value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub entity: String,
    pub attribute: usize,
    pub value: String,
}

impl Fact {
    pub fn sentence(&self) -> String {
        format!("{}{}{}.", self.entity, ATTRIBUTES[self.attribute].marker, self.value)
    }

    /// Parses sentences of the form "<entity><marker><value>.".
    pub fn parse(text: &str) -> Option<Fact> {
        let text = text.trim().trim_end_matches('.');
        ATTRIBUTES.iter().enumerate().find_map(|(i, a)| {
            let (entity, value) = text.split_once(a.marker)?;
            (!entity.is_empty() && !value.is_empty()).then(|| Fact {
                entity: entity.to_string(),
                attribute: i,
                value: value.to_string(),
            })
        })
    }
}

fn truth(entity: &str, attribute: usize) -> &'static str {
    let values = ATTRIBUTES[attribute].values;
    values[(hash(&["truth", entity, ATTRIBUTES[attribute].marker]) % values.len() as u64) as usize]
}

/// Ground truth label for a claim: 1 if true, 0 if false, `None` if the
/// sentence is not a checkable fact.
pub fn label_for(claim_text: &str) -> Option<u8> {
    let f = Fact::parse(claim_text)?;
    Some(u8::from(truth(&f.entity, f.attribute) == f.value))
}

/// How a simulated model relates to one fact about one entity.
struct Knowledge {
    knows: bool,
    /// The model's internal sense of how sure it is, in [0, 1].
    certainty: f64,
}

fn strength(model: &str) -> f64 {
    0.35 + 0.4 * unit(&["strength", model])
}

fn knowledge(model: &str, entity: &str, attribute: usize) -> Knowledge {
    let marker = ATTRIBUTES[attribute].marker;
    let knows = unit(&["knows", model, entity, marker]) < strength(model);
    let u = unit(&["certainty", model, entity, marker]);
    Knowledge {
        knows,
        certainty: if knows { 0.55 + 0.45 * u } else { 0.05 + 0.6 * u },
    }
}

/// Value the model states for a fact in sample `sample`.
fn belief(model: &str, entity: &str, attribute: usize, sample: u32) -> &'static str {
    if knowledge(model, entity, attribute).knows {
        return truth(entity, attribute);
    }
    let values = ATTRIBUTES[attribute].values;
    let s = sample.to_string();
    values[(hash(&["guess", model, entity, ATTRIBUTES[attribute].marker, &s]) % values.len() as u64) as usize]
}

fn generate(model: &str, entity: &str, sample: u32) -> String {
    let s = sample.to_string();
    let mut sentences = Vec::new();
    for (i, a) in ATTRIBUTES.iter().enumerate() {
        if unit(&["mention", model, entity, a.marker, &s]) < 0.8 || i == 0 {
            sentences.push(
                Fact {
                    entity: entity.to_string(),
                    attribute: i,
                    value: belief(model, entity, i, sample).to_string(),
                }
                .sentence(),
            );
        }
    }
    sentences.join(" ")
}

fn split_sentences(text: &str) -> Vec<String> {
    text.split(". ")
        .map(|s| s.trim().trim_end_matches('.'))
        .filter(|s| !s.is_empty())
        .map(|s| format!("{s}."))
        .collect()
}

fn find_in_sample(sample: &str, fact: &Fact) -> Option<Fact> {
    split_sentences(sample)
        .iter()
        .filter_map(|s| Fact::parse(s))
        .find(|f| f.entity == fact.entity && f.attribute == fact.attribute)
}

/// P(true) the model assigns to `fact`, with per-prompt jitter.
fn self_assessment(model: &str, fact: &Fact, salt: &str) -> f64 {
    let k = knowledge(model, &fact.entity, fact.attribute);
    let agrees = belief(model, &fact.entity, fact.attribute, 0) == fact.value;
    let base = match (k.knows, agrees) {
        (true, true) => k.certainty,
        (true, false) => 1.0 - k.certainty,
        (false, true) => 0.35 + 0.5 * k.certainty,
        (false, false) => 0.4 * k.certainty,
    };
    let jitter = unit(&["jitter", model, &fact.sentence(), salt]) - 0.5;
    (base + 0.2 * jitter).clamp(0.01, 0.99)
}

fn truth_alternatives(p: f64) -> Vec<TokenAlternative> {
    let t = 0.9 * p;
    let f = 0.9 * (1.0 - p);
    let mut alts: Vec<TokenAlternative> = [
        ("True", 0.75 * t),
        (" true", 0.15 * t),
        ("true", 0.1 * t),
        ("False", 0.8 * f),
        (" False", 0.2 * f),
        ("The", 0.04),
        ("Based", 0.025),
        ("I", 0.015),
        ("**", 0.012),
        ("This", 0.008),
    ]
    .into_iter()
    .map(|(token, probability)| TokenAlternative {
        token: token.to_string(),
        probability,
    })
    .collect();
    alts.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.token.cmp(&b.token))
    });
    alts
}

/// Simulated model backend. See the module docs.
#[derive(Debug, Clone, Default)]
pub struct SimulatedBackend;

impl SimulatedBackend {
    pub fn new() -> Self {
        SimulatedBackend
    }

    fn answer(&self, req: &ChatRequest<'_>) -> Option<CompletionResult> {
        let model = req.model_id;
        let prompt = req.prompt;
        let templates: [(&str, PromptTemplate); 7] = [
            ("gen_binary", prompts::gen_binary()),
            ("gen_multi", prompts::gen_multi()),
            ("dis_context", prompts::dis_context()),
            ("dis_rating", prompts::dis_rating()),
            ("dis_single", prompts::dis_single()),
            ("decompose", prompts::decompose()),
            ("reunion", prompts::reunion()),
        ];
        for (name, t) in &templates {
            let Some(v) = t.extract(prompt) else { continue };
            return Some(match *name {
                "gen_binary" | "gen_multi" => {
                    let claim = Fact::parse(&v["sentence"]);
                    let found = claim.as_ref().and_then(|c| find_in_sample(&v["sample"], c));
                    let text = match (*name, claim, found) {
                        ("gen_binary", Some(c), Some(f)) if f.value == c.value => "Yes.",
                        ("gen_binary", _, _) => "No.",
                        (_, Some(c), Some(f)) if f.value == c.value => "Supported.",
                        (_, Some(_), Some(_)) => "refuted",
                        _ => "The sample does not mention this.",
                    };
                    CompletionResult::text(text)
                }
                "dis_single" | "dis_context" => {
                    let fact = Fact::parse(&v["atomic_fact_piece"])?;
                    let p = self_assessment(model, &fact, name);
                    let alts = truth_alternatives(p);
                    CompletionResult {
                        text: alts[0].token.trim().to_string(),
                        first_token_alternatives: Some(alts),
                    }
                }
                "dis_rating" => {
                    let fact = Fact::parse(&v["atomic_fact_piece"])?;
                    let p = self_assessment(model, &fact, "rating");
                    let n = (p * 10.0).round() as u32;
                    let attempt = req.sample_index.to_string();
                    // Now and then the first reply forgets the dollar signs.
                    let sloppy = req.sample_index == 0 && unit(&["sloppy", model, &fact.sentence(), &attempt]) < 0.1;
                    CompletionResult::text(if sloppy {
                        format!("I would say {n}.")
                    } else {
                        format!("${n}$")
                    })
                }
                "decompose" => {
                    let lines: Vec<String> = split_sentences(&v["response"])
                        .iter()
                        .map(|s| format!("- {s}"))
                        .collect();
                    CompletionResult::text(lines.join("\n"))
                }
                _ => {
                    let body: Vec<&str> = v["claims"].lines().filter_map(|l| l.strip_prefix("- ")).collect();
                    CompletionResult::text(body.join(" "))
                }
            });
        }
        let entity = prompt
            .strip_prefix("Tell me a bio of ")
            .and_then(|r| r.strip_suffix('.'))
            .or_else(|| {
                prompt
                    .strip_prefix("In a paragraph, could you tell me what you know about ")
                    .and_then(|r| r.strip_suffix('?'))
            })?;
        Some(CompletionResult::text(generate(model, entity, req.sample_index)))
    }
}

impl Backend for SimulatedBackend {
    fn chat(&self, req: &ChatRequest<'_>) -> Result<CompletionResult, BackendError> {
        self.answer(req).ok_or_else(|| BackendError::Http {
            status: 400,
            body: "simulated backend does not recognize this prompt".to_string(),
        })
    }
}
