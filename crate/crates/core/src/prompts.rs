//! Prompt templates and `{placeholder}` rendering.
//!
//! The five elicitation templates are shipped byte-for-byte as text assets.
//! Rendering is a single left-to-right pass, so substituted values that
//! themselves contain braces are never re-expanded.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::Method;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template}: missing value for {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} must appear exactly once")]
    BadPlaceholder { template: String, name: String },
    #[error("no prompt template for method {0}")]
    NoTemplate(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    name: String,
    text: String,
    segments: Vec<Segment>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

fn parse_segments(text: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                literal.push_str(&rest[..open]);
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Slot(after[..close].to_string()));
                rest = &after[close + 1..];
            }
            _ => {
                literal.push_str(&rest[..=open]);
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

impl PromptTemplate {
    /// Builds a template and checks that each of `required` occurs exactly
    /// once.
    pub fn new(name: &str, text: &str, required: &[&str]) -> Result<Self, PromptError> {
        let segments = parse_segments(text);
        for want in required {
            let n = segments
                .iter()
                .filter(|s| matches!(s, Segment::Slot(n) if n == want))
                .count();
            if n != 1 {
                return Err(PromptError::BadPlaceholder {
                    template: name.to_string(),
                    name: want.to_string(),
                });
            }
        }
        Ok(PromptTemplate {
            name: name.to_string(),
            text: text.to_string(),
            segments,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn placeholders(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(n) => Some(n.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len() + 256);
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Slot(name) => {
                    let v = values.iter().find(|(k, _)| k == name).map(|(_, v)| *v).ok_or_else(|| {
                        PromptError::MissingValue {
                            template: self.name.clone(),
                            name: name.clone(),
                        }
                    })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`render`](Self::render): recovers placeholder values from
    /// a rendered prompt, or `None` if the literal text does not match.
    /// Each value extends to the first occurrence of the following literal
    /// (the last literal is matched as a suffix).
    pub fn extract(&self, rendered: &str) -> Option<BTreeMap<String, String>> {
        let mut values = BTreeMap::new();
        let mut rest = rendered;
        let mut i = 0;
        while i < self.segments.len() {
            match &self.segments[i] {
                Segment::Literal(l) => {
                    rest = rest.strip_prefix(l.as_str())?;
                    i += 1;
                }
                Segment::Slot(name) => {
                    let value = match self.segments.get(i + 1) {
                        None => {
                            let v = rest;
                            rest = "";
                            v
                        }
                        Some(Segment::Literal(next)) => {
                            let at = if i + 2 == self.segments.len() {
                                if !rest.ends_with(next.as_str()) {
                                    return None;
                                }
                                rest.len() - next.len()
                            } else {
                                rest.find(next.as_str())?
                            };
                            let v = &rest[..at];
                            rest = &rest[at..];
                            v
                        }
                        Some(Segment::Slot(_)) => return None,
                    };
                    values.insert(name.clone(), value.to_string());
                    i += 1;
                }
            }
        }
        rest.is_empty().then_some(values)
    }
}

pub const GEN_BINARY: &str = include_str!("../assets/prompts/gen_binary.txt");
pub const GEN_MULTI: &str = include_str!("../assets/prompts/gen_multi.txt");
pub const DIS_SINGLE: &str = include_str!("../assets/prompts/dis_single.txt");
pub const DIS_CONTEXT: &str = include_str!("../assets/prompts/dis_context.txt");
pub const DIS_RATING: &str = include_str!("../assets/prompts/dis_rating.txt");
pub const DECOMPOSE: &str = include_str!("../assets/prompts/decompose.txt");
pub const REUNION: &str = include_str!("../assets/prompts/reunion.txt");

pub fn gen_binary() -> PromptTemplate {
    PromptTemplate::new("gen_binary", GEN_BINARY, &["sample", "sentence"]).expect("bundled template")
}

pub fn gen_multi() -> PromptTemplate {
    PromptTemplate::new("gen_multi", GEN_MULTI, &["sample", "sentence"]).expect("bundled template")
}

pub fn dis_single() -> PromptTemplate {
    PromptTemplate::new("dis_single", DIS_SINGLE, &["atomic_fact_piece"]).expect("bundled template")
}

pub fn dis_context() -> PromptTemplate {
    PromptTemplate::new("dis_context", DIS_CONTEXT, &["context", "atomic_fact_piece"]).expect("bundled template")
}

pub fn dis_rating() -> PromptTemplate {
    PromptTemplate::new("dis_rating", DIS_RATING, &["context", "atomic_fact_piece"]).expect("bundled template")
}

pub fn decompose() -> PromptTemplate {
    PromptTemplate::new("decompose", DECOMPOSE, &["response"]).expect("bundled template")
}

pub fn reunion() -> PromptTemplate {
    PromptTemplate::new("reunion", REUNION, &["question", "claims"]).expect("bundled template")
}

/// Template used by a per-claim elicitation method.
pub fn for_method(method: Method) -> Result<PromptTemplate, PromptError> {
    match method {
        Method::GenBinary => Ok(gen_binary()),
        Method::GenMulti => Ok(gen_multi()),
        Method::DisSingle => Ok(dis_single()),
        Method::DisContext => Ok(dis_context()),
        Method::DisRating => Ok(dis_rating()),
        Method::Fused(_) => Err(PromptError::NoTemplate(method.to_string())),
    }
}

/// Renders the prompt a method sends for one claim. `sample` is used by the
/// generative methods and `context` by Dis-Context and Dis-Rating.
pub fn render_for_method(method: Method, claim: &str, context: &str, sample: &str) -> Result<String, PromptError> {
    let t = for_method(method)?;
    match method {
        Method::GenBinary | Method::GenMulti => t.render(&[("sample", sample), ("sentence", claim)]),
        Method::DisSingle => t.render(&[("atomic_fact_piece", claim)]),
        _ => t.render(&[("context", context), ("atomic_fact_piece", claim)]),
    }
}
