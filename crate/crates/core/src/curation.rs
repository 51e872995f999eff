//! Noise filtering and near-duplicate removal for generated triples.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::clients::{RetryPolicy, DEFAULT_API_KEY_ENV};
use crate::datagen::{parse_generated_line, InstructionTriple, Reject};
use crate::react::split_arguments;
use crate::registry::Registry;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

const BUILTIN_RULES: &str = include_str!("../assets/keyword_rules.toml");

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("embedding endpoint unavailable: {0}")]
    EmbeddingUnavailable(String),
    #[error("threshold must be in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("keyword rules: {0}")]
    Rules(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectReason {
    FormatError,
    UnknownTool,
    ArityError,
    SemanticFlag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
    /// Human-readable detail for each reason, same order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ValidationVerdict {
    fn from_reasons(reasons: Vec<(RejectReason, String)>) -> Self {
        let accepted = reasons
            .iter()
            .all(|(r, _)| *r == RejectReason::SemanticFlag);
        let (reasons, notes) = reasons.into_iter().unzip();
        Self {
            accepted,
            reasons,
            notes,
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.reasons.contains(&RejectReason::SemanticFlag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keyword: String,
    pub tools: Vec<String>,
}

/// Instruction keyword -> expected tool family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRules {
    #[serde(rename = "rule", default)]
    pub rules: Vec<KeywordRule>,
}

impl Default for KeywordRules {
    fn default() -> Self {
        Self::from_toml_str(BUILTIN_RULES).expect("built-in keyword rules")
    }
}

impl KeywordRules {
    pub fn from_toml_str(text: &str) -> Result<Self, CurationError> {
        let rules: Self = toml::from_str(text).map_err(|e| CurationError::Rules(e.to_string()))?;
        Ok(Self {
            rules: rules
                .rules
                .into_iter()
                .map(|r| KeywordRule {
                    keyword: r.keyword.to_lowercase(),
                    tools: r.tools,
                })
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CurationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CurationError::Rules(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Rules whose keyword starts a word of `instruction` but whose tool set
    /// does not contain `tool`.
    pub fn disagreements<'a>(&'a self, instruction: &str, tool: &str) -> Vec<&'a KeywordRule> {
        let lower = instruction.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        self.rules
            .iter()
            .filter(|r| words.iter().any(|w| w.starts_with(&r.keyword)))
            .filter(|r| !r.tools.iter().any(|t| t == tool))
            .collect()
    }
}

/// Checks one triple against the registry and, if given, the keyword rules.
pub fn validate_item(
    t: &InstructionTriple,
    r: &Registry,
    rules: Option<&KeywordRules>,
) -> ValidationVerdict {
    let mut reasons = Vec::new();
    if t.instruction.trim().is_empty() {
        reasons.push((RejectReason::FormatError, "empty instruction".to_string()));
    }
    match r.get(&t.tool_name) {
        None => reasons.push((
            RejectReason::UnknownTool,
            format!("unknown tool {:?}", t.tool_name),
        )),
        Some(spec) => {
            if let Err(e) = split_arguments(&t.raw_arguments, spec.arity()) {
                reasons.push((RejectReason::ArityError, e.to_string()));
            }
        }
    }
    if let Some(rules) = rules {
        for rule in rules.disagreements(&t.instruction, &t.tool_name) {
            reasons.push((
                RejectReason::SemanticFlag,
                format!(
                    "instruction mentions {:?} but uses {:?}",
                    rule.keyword, t.tool_name
                ),
            ));
        }
    }
    ValidationVerdict::from_reasons(reasons)
}

/// Parses and validates one raw teacher line.
pub fn validate_line(
    line: &str,
    r: &Registry,
    rules: Option<&KeywordRules>,
) -> (Option<InstructionTriple>, ValidationVerdict) {
    match parse_generated_line(line) {
        Ok(t) => {
            let v = validate_item(&t, r, rules);
            (Some(t), v)
        }
        Err(e) => (
            None,
            ValidationVerdict::from_reasons(vec![(RejectReason::FormatError, e.to_string())]),
        ),
    }
}

/// Lowercased whitespace tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// `2 * LCS / (|a| + |b|)` over token sequences; 1 when both are empty.
pub fn lcs_similarity_tokens(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

pub fn lcs_similarity(a: &str, b: &str) -> f64 {
    lcs_similarity_tokens(&tokens(a), &tokens(b))
}

/// A similarity backend. Texts are encoded once, then compared pairwise.
pub trait Similarity: Sync {
    type Repr: Send + Sync;

    fn encode(&self, texts: &[&str]) -> Result<Vec<Self::Repr>, CurationError>;

    /// Symmetric score in `[0, 1]`.
    fn compare(&self, a: &Self::Repr, b: &Self::Repr) -> f64;

    /// Cheap upper bound on `compare`, used to skip hopeless pairs.
    fn upper_bound(&self, _a: &Self::Repr, _b: &Self::Repr) -> f64 {
        1.0
    }

    fn similarity(&self, a: &str, b: &str) -> Result<f64, CurationError> {
        let enc = self.encode(&[a, b])?;
        Ok(self.compare(&enc[0], &enc[1]))
    }
}

/// Token-sequence LCS similarity.
#[derive(Debug, Clone, Copy, Default)]
pub struct LcsSimilarity;

impl Similarity for LcsSimilarity {
    type Repr = Vec<String>;

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<String>>, CurationError> {
        Ok(texts.iter().map(|t| tokens(t)).collect())
    }

    fn compare(&self, a: &Vec<String>, b: &Vec<String>) -> f64 {
        lcs_similarity_tokens(a, b)
    }

    fn upper_bound(&self, a: &Vec<String>, b: &Vec<String>) -> f64 {
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        2.0 * a.len().min(b.len()) as f64 / (a.len() + b.len()) as f64
    }
}

/// Connection settings for an embedding endpoint.
///
/// Request body: `{"model", "input": [texts]}`; response:
/// `{"data": [{"index": i, "embedding": [f32, ..]}, ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEndpoint {
    pub url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub batch_size: usize,
}

impl EmbeddingEndpoint {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 60,
            batch_size: 256,
        }
    }
}

/// Cosine similarity of embeddings fetched over HTTP, clamped to `[0, 1]`.
pub struct EmbeddingSimilarity {
    endpoint: EmbeddingEndpoint,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

impl EmbeddingSimilarity {
    pub fn new(endpoint: EmbeddingEndpoint) -> Result<Self, CurationError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(endpoint.timeout_secs))
            .build()
            .map_err(|e| CurationError::EmbeddingUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint,
            http,
            retry: RetryPolicy::default(),
            cache: Mutex::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn fetch(&self, batch: &[&str]) -> Result<Vec<Vec<f32>>, CurationError> {
        let body = json!({ "model": self.endpoint.model, "input": batch });
        let key = std::env::var(&self.endpoint.api_key_env).ok();
        let value: serde_json::Value = self
            .retry
            .run(|| {
                let mut call = self.http.post(&self.endpoint.url).json(&body);
                if let Some(key) = &key {
                    call = call.bearer_auth(key);
                }
                let resp = call.send().map_err(|e| (true, e.to_string()))?;
                let status = resp.status();
                let text = resp.text().map_err(|e| (true, e.to_string()))?;
                if !status.is_success() {
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    return Err((retryable, format!("HTTP {status}: {text}")));
                }
                serde_json::from_str(&text).map_err(|e| (false, e.to_string()))
            })
            .map_err(|(_, m)| CurationError::EmbeddingUnavailable(m))?;

        let bad = |m: &str| CurationError::EmbeddingUnavailable(m.to_string());
        let data = value["data"]
            .as_array()
            .ok_or_else(|| bad("response has no data array"))?;
        if data.len() != batch.len() {
            return Err(bad("embedding count does not match input count"));
        }
        let mut out = vec![Vec::new(); batch.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let vector = item["embedding"]
                .as_array()
                .ok_or_else(|| bad("item has no embedding"))?
                .iter()
                .map(|x| x.as_f64().map(|x| x as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| bad("non-numeric embedding"))?;
            *out.get_mut(index)
                .ok_or_else(|| bad("embedding index out of range"))? = vector;
        }
        Ok(out)
    }
}

impl Similarity for EmbeddingSimilarity {
    type Repr = Vec<f32>;

    fn encode(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, CurationError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .copied()
                .filter(|t| !cache.contains_key(*t) && seen.insert(*t))
                .collect()
        };
        for batch in missing.chunks(self.endpoint.batch_size.max(1)) {
            let vectors = self.fetch(batch)?;
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            for (t, v) in batch.iter().zip(vectors) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }

    fn compare(&self, a: &Vec<f32>, b: &Vec<f32>) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return if na == nb { 1.0 } else { 0.0 };
        }
        (dot / (na * nb)).clamp(0.0, 1.0)
    }
}

/// Positions of a dedup pass over a list of texts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupIndices {
    pub retained: Vec<usize>,
    /// `(removed, earlier retained item it matched, similarity)`
    pub removed: Vec<(usize, usize, f64)>,
}

/// Greedy first-wins scan: an item is dropped when its token sequence equals
/// an earlier retained one or their similarity exceeds `threshold`.
pub fn dedup_texts<S: Similarity>(
    texts: &[&str],
    threshold: f64,
    sim: &S,
) -> Result<DedupIndices, CurationError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CurationError::InvalidThreshold(threshold));
    }
    let toks: Vec<Vec<String>> = texts.iter().map(|t| tokens(t)).collect();
    let reprs = sim.encode(texts)?;
    let mut out = DedupIndices::default();
    for i in 0..texts.len() {
        let hit = out.retained.par_iter().find_first(|&&j| {
            toks[i] == toks[j]
                || (sim.upper_bound(&reprs[i], &reprs[j]) > threshold
                    && sim.compare(&reprs[i], &reprs[j]) > threshold)
        });
        match hit {
            Some(&j) => {
                let score = if toks[i] == toks[j] {
                    1.0
                } else {
                    sim.compare(&reprs[i], &reprs[j])
                };
                out.removed.push((i, j, score));
            }
            None => out.retained.push(i),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedItem {
    #[serde(flatten)]
    pub triple: InstructionTriple,
    pub duplicate_of: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DedupOutcome {
    pub retained: Vec<InstructionTriple>,
    pub removed: Vec<RemovedItem>,
}

pub fn dedup<S: Similarity>(
    items: &[InstructionTriple],
    threshold: f64,
    sim: &S,
) -> Result<DedupOutcome, CurationError> {
    let texts: Vec<&str> = items.iter().map(|t| t.instruction.as_str()).collect();
    let idx = dedup_texts(&texts, threshold, sim)?;
    Ok(DedupOutcome {
        retained: idx.retained.iter().map(|&i| items[i].clone()).collect(),
        removed: idx
            .removed
            .iter()
            .map(|&(i, j, s)| RemovedItem {
                triple: items[i].clone(),
                duplicate_of: items[j].instruction.clone(),
                similarity: s,
            })
            .collect(),
    })
}

/// A triple or raw line that did not pass validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triple: Option<InstructionTriple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_image: Option<String>,
    pub verdict: ValidationVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedItem {
    #[serde(flatten)]
    pub triple: InstructionTriple,
    pub verdict: ValidationVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationConfig {
    pub threshold: f64,
    pub rules: Option<KeywordRules>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            rules: Some(KeywordRules::default()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationOutput {
    /// Valid, deduplicated triples; includes flagged ones.
    pub retained: Vec<InstructionTriple>,
    /// Retained triples marked for manual review.
    pub flagged: Vec<FlaggedItem>,
    pub rejected: Vec<RejectedRecord>,
    pub removed: Vec<RemovedItem>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationCounts {
    pub input: usize,
    pub format_errors: usize,
    pub rejected: usize,
    pub duplicates: usize,
    pub flagged: usize,
    pub retained: usize,
}

impl CurationOutput {
    pub fn counts(&self) -> CurationCounts {
        let format_errors = self
            .rejected
            .iter()
            .filter(|r| r.verdict.reasons.contains(&RejectReason::FormatError))
            .count();
        CurationCounts {
            input: self.retained.len() + self.rejected.len() + self.removed.len(),
            format_errors,
            rejected: self.rejected.len(),
            duplicates: self.removed.len(),
            flagged: self.flagged.len(),
            retained: self.retained.len(),
        }
    }
}

/// Validates parsed triples, carries upstream parse failures into the
/// rejects as format errors, then deduplicates what remains.
pub fn curate<S: Similarity>(
    triples: &[InstructionTriple],
    upstream_rejects: &[Reject],
    r: &Registry,
    cfg: &CurationConfig,
    sim: &S,
) -> Result<CurationOutput, CurationError> {
    let mut out = CurationOutput::default();
    for rej in upstream_rejects {
        out.rejected.push(RejectedRecord {
            triple: None,
            line: Some(rej.line.clone()),
            source_image: rej.source_image.clone(),
            verdict: ValidationVerdict::from_reasons(vec![(
                RejectReason::FormatError,
                rej.reason.clone(),
            )]),
        });
    }
    let mut valid = Vec::new();
    let mut verdicts = Vec::new();
    for t in triples {
        let v = validate_item(t, r, cfg.rules.as_ref());
        if v.accepted {
            valid.push(t.clone());
            verdicts.push(v);
        } else {
            out.rejected.push(RejectedRecord {
                triple: Some(t.clone()),
                line: None,
                source_image: t.source_image.clone(),
                verdict: v,
            });
        }
    }
    let texts: Vec<&str> = valid.iter().map(|t| t.instruction.as_str()).collect();
    let idx = dedup_texts(&texts, cfg.threshold, sim)?;
    for &i in &idx.retained {
        if verdicts[i].is_flagged() {
            out.flagged.push(FlaggedItem {
                triple: valid[i].clone(),
                verdict: verdicts[i].clone(),
            });
        }
        out.retained.push(valid[i].clone());
    }
    out.removed = idx
        .removed
        .iter()
        .map(|&(i, j, s)| RemovedItem {
            triple: valid[i].clone(),
            duplicate_of: valid[j].instruction.clone(),
            similarity: s,
        })
        .collect();
    Ok(out)
}
