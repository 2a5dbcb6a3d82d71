//! On-disk records: queries, responses, atomic claims, labels and confidences.
//!
//! Every persisted record type is line-delimited JSON, one record per line,
//! written in a canonical order so that a loaded file re-serializes to the
//! same bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::fusion::Strategy;
use crate::gateway::SamplingParams;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate query id {0}")]
    DuplicateQuery(String),
    #[error("duplicate record for claim {claim_id} / method {method}")]
    DuplicateConfidence { claim_id: String, method: String },
    #[error("query {0}: positions not contiguous")]
    PositionGap(String),
    #[error("line {line}: labels must be binary (got {value:?})")]
    NonBinaryLabel { line: usize, value: String },
    #[error("claim {claim_id}: score {score} outside [0, 1]")]
    ScoreOutOfRange { claim_id: String, score: f64 },
}

impl CorpusError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Bios,
    Longfact,
    Wildhallu,
    Custom,
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetTag::Bios => "bios",
            DatasetTag::Longfact => "longfact",
            DatasetTag::Wildhallu => "wildhallu",
            DatasetTag::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl DatasetTag {
    /// Response-generation prompt used by the benchmark for entity-style
    /// datasets. LongFact and custom sets carry their own prompt per question.
    pub fn entity_prompt(self, entity: &str) -> Option<String> {
        match self {
            DatasetTag::Bios => Some(format!("Tell me a bio of {entity}.")),
            DatasetTag::Wildhallu => Some(format!(
                "In a paragraph, could you tell me what you know about {entity}?"
            )),
            DatasetTag::Longfact | DatasetTag::Custom => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub topic: String,
    pub prompt_text: String,
    pub dataset_tag: DatasetTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub query_id: String,
    pub model_id: String,
    /// 0 is the original response; 1..=N are the extra samples.
    pub sample_index: u32,
    pub text: String,
    pub sampling: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicClaim {
    pub claim_id: String,
    pub query_id: String,
    /// Which response of the query the claim came from. Omitted on disk for
    /// the original response.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sample_index: u32,
    pub position: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl AtomicClaim {
    pub fn new(query_id: &str, sample_index: u32, position: u32, text: impl Into<String>) -> Self {
        AtomicClaim {
            claim_id: claim_id(query_id, sample_index, position),
            query_id: query_id.to_string(),
            sample_index,
            position,
            text: text.into(),
            label: None,
        }
    }
}

/// Claim ids are `<query>:<sample>:<position>`.
pub fn claim_id(query_id: &str, sample_index: u32, position: u32) -> String {
    format!("{query_id}:{sample_index}:{position}")
}

/// Elicitation method that produced a confidence. Serialized as its tag,
/// e.g. `gen_binary` or `fused:adjusted_alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    GenBinary,
    GenMulti,
    DisSingle,
    DisContext,
    DisRating,
    Fused(Strategy),
}

impl Method {
    pub const BASE: [Method; 5] = [
        Method::GenBinary,
        Method::GenMulti,
        Method::DisSingle,
        Method::DisContext,
        Method::DisRating,
    ];

    pub fn is_generative(self) -> bool {
        matches!(self, Method::GenBinary | Method::GenMulti)
    }

    pub fn is_discriminative(self) -> bool {
        matches!(self, Method::DisSingle | Method::DisContext | Method::DisRating)
    }

    /// File-name friendly form (`fused:wavg` becomes `fused_wavg`).
    pub fn file_stem(self) -> String {
        self.to_string().replace(':', "_")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::GenBinary => f.write_str("gen_binary"),
            Method::GenMulti => f.write_str("gen_multi"),
            Method::DisSingle => f.write_str("dis_single"),
            Method::DisContext => f.write_str("dis_context"),
            Method::DisRating => f.write_str("dis_rating"),
            Method::Fused(s) => write!(f, "fused:{s}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    /// Accepts both `gen_binary` and the CLI spelling `gen-binary`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        if let Some(rest) = norm.strip_prefix("fused:").or_else(|| norm.strip_prefix("fused_")) {
            return rest.parse::<Strategy>().map(Method::Fused);
        }
        match norm.as_str() {
            "gen_binary" => Ok(Method::GenBinary),
            "gen_multi" => Ok(Method::GenMulti),
            "dis_single" => Ok(Method::DisSingle),
            "dis_context" => Ok(Method::DisContext),
            "dis_rating" => Ok(Method::DisRating),
            _ => Err(format!("unknown method {s:?}")),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimConfidence {
    pub claim_id: String,
    pub method: Method,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseScore {
    pub query_id: String,
    pub method: String,
    pub confidence: f64,
    pub factuality: f64,
}

/// Reads a line-delimited JSON file. Blank lines are ignored; a record that
/// fails to parse is reported with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: idx + 1,
            message: strip_position(&e.to_string()),
        })?;
        out.push(record);
    }
    Ok(out)
}

// serde_json appends " at line 1 column 17"; the line number is ours.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| CorpusError::io(path, e))?;
    }
    w.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let queries: Vec<Query> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for (i, q) in queries.iter().enumerate() {
        if !seen.insert(q.id.as_str()) {
            return Err(CorpusError::DuplicateQuery(q.id.clone()));
        }
        if q.prompt_text.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: i + 1,
                message: "empty prompt_text".into(),
            });
        }
    }
    Ok(queries)
}

pub fn store_queries(queries: &[Query], path: &Path) -> Result<()> {
    write_jsonl(path, queries)
}

pub fn sort_responses(responses: &mut [ResponseRecord]) {
    responses
        .sort_by(|a, b| (&a.query_id, &a.model_id, a.sample_index).cmp(&(&b.query_id, &b.model_id, b.sample_index)));
}

pub fn store_responses(responses: &[ResponseRecord], path: &Path) -> Result<()> {
    let mut sorted = responses.to_vec();
    sort_responses(&mut sorted);
    write_jsonl(path, &sorted)
}

pub fn load_responses(path: &Path) -> Result<Vec<ResponseRecord>> {
    let mut rs: Vec<ResponseRecord> = read_jsonl(path)?;
    sort_responses(&mut rs);
    Ok(rs)
}

/// Canonical claim order: query id, then sample, then position.
pub fn sort_claims(claims: &mut [AtomicClaim]) {
    claims.sort_by(|a, b| (&a.query_id, a.sample_index, a.position).cmp(&(&b.query_id, b.sample_index, b.position)));
}

/// Checks that each response's claims occupy positions `0..N` with no gaps
/// or repeats. Expects canonical order.
pub fn check_positions(claims: &[AtomicClaim]) -> Result<()> {
    let mut expected: HashMap<(&str, u32), u32> = HashMap::new();
    for c in claims {
        let next = expected.entry((c.query_id.as_str(), c.sample_index)).or_insert(0);
        if c.position != *next {
            return Err(CorpusError::PositionGap(c.query_id.clone()));
        }
        *next += 1;
    }
    Ok(())
}

pub fn store_claims(claims: &[AtomicClaim], path: &Path) -> Result<()> {
    let mut sorted = claims.to_vec();
    sort_claims(&mut sorted);
    check_positions(&sorted)?;
    write_jsonl(path, &sorted)
}

pub fn load_claims(path: &Path) -> Result<Vec<AtomicClaim>> {
    let mut claims: Vec<AtomicClaim> = read_jsonl(path)?;
    sort_claims(&mut claims);
    check_positions(&claims)?;
    Ok(claims)
}

/// Parses a `claim_id<TAB>{0|1}` label file.
pub fn load_labels(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut labels = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, value) = line.split_once('\t').ok_or_else(|| CorpusError::Malformed {
            line: idx + 1,
            message: "expected claim_id<TAB>label".into(),
        })?;
        let label = match value.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(CorpusError::NonBinaryLabel {
                    line: idx + 1,
                    value: other.to_string(),
                })
            }
        };
        labels.insert(id.trim().to_string(), label);
    }
    Ok(labels)
}

pub fn store_labels(labels: &BTreeMap<String, u8>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, l) in labels {
        out.push_str(&format!("{id}\t{l}\n"));
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}

/// Sets labels on matching claims and returns the label ids that matched no
/// claim.
pub fn apply_labels(claims: &mut [AtomicClaim], labels: &BTreeMap<String, u8>) -> Vec<String> {
    let mut used = BTreeSet::new();
    for c in claims.iter_mut() {
        if let Some(&l) = labels.get(&c.claim_id) {
            c.label = Some(l);
            used.insert(c.claim_id.as_str());
        }
    }
    labels.keys().filter(|k| !used.contains(k.as_str())).cloned().collect()
}

pub fn attach_labels(claims: &[AtomicClaim], labels: &Path) -> Result<Vec<AtomicClaim>> {
    let map = load_labels(labels)?;
    let mut out = claims.to_vec();
    for unknown in apply_labels(&mut out, &map) {
        log::warn!("label for unknown claim {unknown} skipped");
    }
    Ok(out)
}

pub fn store_confidences(confs: &[ClaimConfidence], path: &Path) -> Result<()> {
    let mut sorted = confs.to_vec();
    sorted.sort_by(|a, b| (&a.claim_id, a.method).cmp(&(&b.claim_id, b.method)));
    write_jsonl(path, &sorted)
}

pub fn load_confidences(path: &Path) -> Result<Vec<ClaimConfidence>> {
    let confs: Vec<ClaimConfidence> = read_jsonl(path)?;
    let mut seen = BTreeSet::new();
    for c in &confs {
        if !(0.0..=1.0).contains(&c.score) {
            return Err(CorpusError::ScoreOutOfRange {
                claim_id: c.claim_id.clone(),
                score: c.score,
            });
        }
        if !seen.insert((c.claim_id.as_str(), c.method)) {
            return Err(CorpusError::DuplicateConfidence {
                claim_id: c.claim_id.clone(),
                method: c.method.to_string(),
            });
        }
    }
    Ok(confs)
}

pub fn store_scores(scores: &[ResponseScore], path: &Path) -> Result<()> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| (&a.query_id, &a.method).cmp(&(&b.query_id, &b.method)));
    write_jsonl(path, &sorted)
}

pub fn load_scores(path: &Path) -> Result<Vec<ResponseScore>> {
    read_jsonl(path)
}
