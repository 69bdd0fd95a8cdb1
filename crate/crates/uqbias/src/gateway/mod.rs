//! Uniform access to answer distributions.
//!
//! A backend (HTTP chat-completions client or the synthetic offline model)
//! returns top-k token log-probabilities; this module maps label tokens
//! back to canonical options, renormalizes them into an
//! [`AnswerDistribution`], and persists every reply in a write-once JSONL
//! cache keyed by request digest so finished experiments replay without
//! issuing a single call.

mod cache;
mod http;
mod synthetic;

pub use cache::{CachedQuery, QueryCache, ReplyRecord};
pub use http::HttpChatModel;
pub use synthetic::{synthetic_query, SyntheticInstanceTruth, SyntheticModel, SyntheticModelConfig};

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::perturb::{Bias, CanonicalMap};
use crate::uq::{AnswerDistribution, UqError, OPTION_COUNT};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("none of the four option labels appear in the returned logprobs")]
    LabelsAbsent,
    #[error("cannot parse {0:?} as an option label")]
    UnparsableAnswer(String),
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error(transparent)]
    Uq(#[from] UqError),
    #[error("cache i/o: {0}")]
    CacheIo(String),
}

/// Connection details for a logprob-exposing chat-completions endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. The key
    /// itself is never persisted.
    pub api_key_env: String,
    #[serde(default = "default_top_logprobs_k")]
    pub top_logprobs_k: u32,
    #[serde(default = "default_request_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_top_logprobs_k() -> u32 {
    20
}
fn default_request_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    5
}

/// Top-k log-probabilities at the first answer-token position, plus the
/// token the model actually sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub sampled_token: String,
    /// (token text, logprob in nats); logprobs are at most 0.
    pub top: Vec<(String, f64)>,
}

/// How answer tokens are matched against the labels 0-3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMatch {
    /// Whitespace-stripped token, at most one trailing period, exactly one
    /// character in 0-3.
    #[default]
    Strict,
    /// Additionally strips matching surrounding quotes and one trailing
    /// colon or closing parenthesis.
    Lenient,
}

/// Resolves a raw answer token to a displayed label index.
pub fn normalize_label_token(token: &str, mode: LabelMatch) -> Option<usize> {
    let mut t = token.trim();
    if mode == LabelMatch::Lenient {
        for (open, close) in [('"', '"'), ('\'', '\''), ('`', '`')] {
            if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
                t = &t[1..t.len() - 1];
            }
        }
        t = t.trim().trim_end_matches([':', ')']);
    }
    let t = t.strip_suffix('.').unwrap_or(t);
    if t.len() != 1 {
        return None;
    }
    match t.as_bytes()[0] {
        b @ b'0'..=b'3' => Some((b - b'0') as usize),
        _ => None,
    }
}

/// A distribution recovered from label-token logprobs, plus the total
/// probability mass those labels carried before renormalization. Mass
/// below 0.5 is worth flagging: most of the model's weight went to
/// non-label tokens.
#[derive(Debug, Clone, Copy)]
pub struct LabelExtraction {
    pub dist: AnswerDistribution,
    pub label_mass: f64,
}

/// Turns top-k logprobs into a canonical-order answer distribution.
///
/// Each displayed label gets exp(logprob) (absent labels get zero, tokens
/// that normalize to the same label pool their mass), the four masses are
/// renormalized, and the result is mapped through `canonical_map`.
pub fn extract_option_probs(
    logprobs: &TokenLogprobs,
    canonical_map: &CanonicalMap,
    mode: LabelMatch,
) -> Result<LabelExtraction, GatewayError> {
    let mut mass = [0.0f64; OPTION_COUNT];
    for (token, logprob) in &logprobs.top {
        if let Some(label) = normalize_label_token(token, mode) {
            mass[label] += logprob.min(0.0).exp();
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(GatewayError::LabelsAbsent);
    }
    let displayed = [
        mass[0] / total,
        mass[1] / total,
        mass[2] / total,
        mass[3] / total,
    ];
    let dist = AnswerDistribution::new(canonical_map.to_canonical(displayed))?;
    Ok(LabelExtraction {
        dist,
        label_mass: total,
    })
}

/// Maps the sampled answer token to a canonical option index.
pub fn parse_greedy_answer(
    sampled_token: &str,
    canonical_map: &CanonicalMap,
    mode: LabelMatch,
) -> Result<usize, GatewayError> {
    normalize_label_token(sampled_token, mode)
        .map(|label| canonical_map.option_for_label(label))
        .ok_or_else(|| GatewayError::UnparsableAnswer(sampled_token.to_string()))
}

/// Why a query is being issued; part of the request digest so that e.g.
/// ten repetitive samples of one identical prompt stay ten distinct
/// persisted queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QueryPurpose {
    Greedy,
    Repetitive { replicate: u32 },
    Suite { bias: Bias, replicate: u32 },
}

impl QueryPurpose {
    fn digest_tag(&self) -> String {
        match self {
            QueryPurpose::Greedy => "greedy".to_string(),
            QueryPurpose::Repetitive { replicate } => format!("repetitive:{replicate}"),
            QueryPurpose::Suite { bias, replicate } => format!("suite:{bias}:{replicate}"),
        }
    }
}

/// One fully rendered query, ready for any backend.
#[derive(Debug, Clone)]
pub struct QueryRequest {
    pub instance_id: String,
    pub purpose: QueryPurpose,
    pub text: String,
    pub image_png: Vec<u8>,
    pub canonical_map: CanonicalMap,
    pub temperature: f64,
    pub top_p: f64,
}

impl QueryRequest {
    /// Content digest identifying this query in the cache.
    pub fn digest(&self, model_tag: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"uqbias.query.v1");
        hasher.update(model_tag.as_bytes());
        hasher.update([0]);
        hasher.update(self.instance_id.as_bytes());
        hasher.update([0]);
        hasher.update(self.purpose.digest_tag().as_bytes());
        hasher.update([0]);
        hasher.update(self.temperature.to_bits().to_le_bytes());
        hasher.update(self.top_p.to_bits().to_le_bytes());
        hasher.update(self.text.as_bytes());
        hasher.update([0]);
        hasher.update(&self.image_png);
        hex::encode(hasher.finalize())
    }
}

/// Answer-distribution source: the real HTTP client or the synthetic model.
pub trait QueryBackend: Send + Sync {
    /// Stable identifier entering every request digest.
    fn model_tag(&self) -> String;
    /// Whether replies are a pure function of the request. Deterministic
    /// backends get no wall-clock timestamps, so reruns are byte-identical.
    fn is_deterministic(&self) -> bool;
    fn query(&self, request: &QueryRequest) -> Result<TokenLogprobs, GatewayError>;
}

/// Per-query result inside an otherwise healthy batch.
#[derive(Debug, Clone)]
pub enum QueryOutcome {
    Reply(TokenLogprobs),
    /// The endpoint answered but the reply was unusable; recorded and the
    /// instance flagged, the pipeline continues.
    ProtocolFailure(String),
}

/// Cached, bounded-concurrency query executor.
///
/// Results are keyed by request digest, so aggregation is independent of
/// completion order; cache records are appended in request order, which
/// keeps rerun directories byte-identical.
pub struct Gateway {
    backend: Box<dyn QueryBackend>,
    cache: QueryCache,
    label_match: LabelMatch,
    concurrency: usize,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(
        backend: Box<dyn QueryBackend>,
        cache: QueryCache,
        label_match: LabelMatch,
        concurrency: usize,
    ) -> Self {
        Self {
            backend,
            cache,
            label_match,
            concurrency: concurrency.max(1),
            backend_calls: AtomicU64::new(0),
        }
    }

    /// Number of calls that actually reached the backend (cache misses).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Executes a batch, serving cache hits without touching the backend.
    ///
    /// Protocol failures are persisted and surfaced per query. A transport
    /// failure aborts the batch after persisting every reply that did
    /// complete, leaving a resumable cache.
    pub fn run_batch(
        &mut self,
        requests: &[QueryRequest],
    ) -> Result<Vec<QueryOutcome>, GatewayError> {
        let model_tag = self.backend.model_tag();
        let digests: Vec<String> = requests.iter().map(|r| r.digest(&model_tag)).collect();

        let mut outcomes: Vec<Option<QueryOutcome>> = vec![None; requests.len()];
        let mut misses: Vec<usize> = Vec::new();
        for (i, digest) in digests.iter().enumerate() {
            match self.cache.get(digest) {
                Some(record) => outcomes[i] = Some(record.outcome()),
                None => misses.push(i),
            }
        }

        let executed = self.execute(requests, &misses);

        // Persist completed replies in request order, then fail if any
        // query hit a transport error.
        let mut transport: Option<GatewayError> = None;
        for (slot, result) in executed {
            let request = &requests[slot];
            match result {
                Ok(reply) => {
                    let record = self.make_record(request, &digests[slot], ReplyRecord::Reply {
                        sampled_token: reply.sampled_token.clone(),
                        top: reply.top.clone(),
                    });
                    self.cache.append(record)?;
                    outcomes[slot] = Some(QueryOutcome::Reply(reply));
                }
                Err(GatewayError::Protocol(message)) => {
                    let record = self.make_record(
                        request,
                        &digests[slot],
                        ReplyRecord::ProtocolError {
                            message: message.clone(),
                        },
                    );
                    self.cache.append(record)?;
                    outcomes[slot] = Some(QueryOutcome::ProtocolFailure(message));
                }
                Err(err) => {
                    if transport.is_none() {
                        transport = Some(err);
                    }
                }
            }
        }
        if let Some(err) = transport {
            return Err(err);
        }
        Ok(outcomes
            .into_iter()
            .map(|o| o.expect("every slot resolved"))
            .collect())
    }

    fn make_record(&self, request: &QueryRequest, digest: &str, reply: ReplyRecord) -> CachedQuery {
        let (parsed_dist, label_mass) = match &reply {
            ReplyRecord::Reply { sampled_token, top } => {
                let logprobs = TokenLogprobs {
                    sampled_token: sampled_token.clone(),
                    top: top.clone(),
                };
                match extract_option_probs(&logprobs, &request.canonical_map, self.label_match) {
                    Ok(extraction) => (Some(*extraction.dist.probs()), Some(extraction.label_mass)),
                    Err(_) => (None, None),
                }
            }
            ReplyRecord::ProtocolError { .. } => (None, None),
        };
        let timestamp = if self.backend.is_deterministic() {
            None
        } else {
            Some(now_rfc3339())
        };
        CachedQuery {
            schema_version: cache::SCHEMA_VERSION,
            digest: digest.to_string(),
            instance_id: request.instance_id.clone(),
            purpose: request.purpose,
            temperature: request.temperature,
            top_p: request.top_p,
            prompt_sha256: hex_sha256(request.text.as_bytes()),
            image_sha256: hex_sha256(&request.image_png),
            canonical_map: *request.canonical_map.as_permutation().values(),
            reply,
            parsed_dist,
            label_mass,
            timestamp,
        }
    }

    fn execute(
        &self,
        requests: &[QueryRequest],
        misses: &[usize],
    ) -> Vec<(usize, Result<TokenLogprobs, GatewayError>)> {
        if misses.is_empty() {
            return Vec::new();
        }
        self.backend_calls
            .fetch_add(misses.len() as u64, Ordering::SeqCst);
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<TokenLogprobs, GatewayError>)>> =
            Mutex::new(Vec::with_capacity(misses.len()));
        let workers = self.concurrency.min(misses.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= misses.len() {
                        break;
                    }
                    let slot = misses[i];
                    let result = self.backend.query(&requests[slot]);
                    results.lock().expect("worker panicked").push((slot, result));
                });
            }
        });
        let mut out = results.into_inner().expect("worker panicked");
        out.sort_by_key(|(slot, _)| *slot);
        out
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::Permutation;

    fn logprobs(pairs: &[(&str, f64)]) -> TokenLogprobs {
        TokenLogprobs {
            sampled_token: pairs[0].0.to_string(),
            top: pairs.iter().map(|(t, lp)| (t.to_string(), *lp)).collect(),
        }
    }

    #[test]
    fn extract_renormalizes_over_labels() {
        let lp = logprobs(&[
            ("0", 0.5f64.ln()),
            ("1", 0.3f64.ln()),
            ("2", 0.1f64.ln()),
            ("hello", 0.05f64.ln()),
        ]);
        let out = extract_option_probs(&lp, &CanonicalMap::identity(), LabelMatch::Strict).unwrap();
        let expected = [0.5 / 0.9, 0.3 / 0.9, 0.1 / 0.9, 0.0];
        for (got, want) in out.dist.probs().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((out.label_mass - 0.9).abs() < 1e-12);
    }

    #[test]
    fn extract_single_label_gets_all_mass() {
        let lp = logprobs(&[("2", 0.4f64.ln()), ("no", 0.6f64.ln())]);
        let out = extract_option_probs(&lp, &CanonicalMap::identity(), LabelMatch::Strict).unwrap();
        assert_eq!(*out.dist.probs(), [0.0, 0.0, 1.0, 0.0]);
        assert!(out.label_mass < 0.5, "low mass should be visible to callers");
    }

    #[test]
    fn extract_maps_through_permutation() {
        let lp = logprobs(&[
            ("0", 0.4f64.ln()),
            ("1", 0.3f64.ln()),
            ("2", 0.2f64.ln()),
            ("3", 0.1f64.ln()),
        ]);
        let map = CanonicalMap::from_permutation(Permutation::new([3, 2, 1, 0]).unwrap());
        let out = extract_option_probs(&lp, &map, LabelMatch::Strict).unwrap();
        let got = out.dist.probs();
        for (i, want) in [0.1, 0.2, 0.3, 0.4].iter().enumerate() {
            assert!((got[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn extract_errors_when_all_labels_absent() {
        let lp = logprobs(&[("yes", -0.1), ("no", -2.0)]);
        assert!(matches!(
            extract_option_probs(&lp, &CanonicalMap::identity(), LabelMatch::Strict),
            Err(GatewayError::LabelsAbsent)
        ));
    }

    #[test]
    fn extract_pools_equivalent_tokens() {
        let lp = logprobs(&[("0", 0.25f64.ln()), (" 0", 0.25f64.ln()), ("1", 0.5f64.ln())]);
        let out = extract_option_probs(&lp, &CanonicalMap::identity(), LabelMatch::Strict).unwrap();
        assert!((out.dist.prob(0) - 0.5).abs() < 1e-12);
        assert!((out.dist.prob(1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_parsing() {
        let id = CanonicalMap::identity();
        assert_eq!(parse_greedy_answer(" 2", &id, LabelMatch::Strict).unwrap(), 2);
        assert_eq!(parse_greedy_answer("2.", &id, LabelMatch::Strict).unwrap(), 2);
        assert!(parse_greedy_answer("yes", &id, LabelMatch::Strict).is_err());
        assert!(parse_greedy_answer("12", &id, LabelMatch::Strict).is_err());
        assert!(parse_greedy_answer("\"2\"", &id, LabelMatch::Strict).is_err());
        assert_eq!(
            parse_greedy_answer("\"2\"", &id, LabelMatch::Lenient).unwrap(),
            2
        );

        // Displayed label 2 sits at canonical position 0 under this
        // relabeling: label_perm[0] = 2, so map = inverse.
        let label_perm = Permutation::new([2, 0, 3, 1]).unwrap();
        let map = CanonicalMap::from_permutation(label_perm.inverse());
        assert_eq!(parse_greedy_answer("2", &map, LabelMatch::Strict).unwrap(), 0);
    }

    #[test]
    fn equivariance_of_extraction() {
        let lp = logprobs(&[
            ("0", 0.4f64.ln()),
            ("1", 0.3f64.ln()),
            ("2", 0.2f64.ln()),
            ("3", 0.1f64.ln()),
        ]);
        let base =
            extract_option_probs(&lp, &CanonicalMap::identity(), LabelMatch::Strict).unwrap();
        for raw in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
            let perm = Permutation::new(raw).unwrap();
            let mapped = extract_option_probs(
                &lp,
                &CanonicalMap::from_permutation(perm),
                LabelMatch::Strict,
            )
            .unwrap();
            for label in 0..4 {
                let via = mapped.dist.prob(perm.get(label));
                assert!((via - base.dist.prob(label)).abs() < 1e-15);
            }
        }
    }

}
