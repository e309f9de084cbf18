//! Clients for the three model roles behind one wire protocol.
//!
//! - the generator proposes candidate REs for a prompt (`/generate`)
//! - the describer turns a marked dialogue segment into a referent
//!   description (`/describe`)
//! - the embedder maps texts and images into a shared vector space
//!   (`/embed_text`, `/embed_image`)
//!
//! Every request goes through a [`Transport`]. [`HttpTransport`] talks to a
//! live server, [`ReplayTransport`] serves recorded traffic, and
//! [`mock::FixtureModel`] is a deterministic stand-in used to record fixtures.

pub mod mock;
pub mod replay;
pub mod transport;
pub mod wire;

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::context::{extract_marked, PromptSequence, RE_END, RE_START};
pub use replay::{ReplayCache, ReplayMode, ReplayTransport};
pub use transport::{HttpTransport, Transport, TransportError};
pub use wire::{Decoding, Endpoint};
use wire::*;

/// Environment variables holding the base URL of each role.
pub const GENERATOR_URL_ENV: &str = "REGRANK_GENERATOR_URL";
pub const DESCRIBER_URL_ENV: &str = "REGRANK_DESCRIBER_URL";
pub const EMBEDDER_URL_ENV: &str = "REGRANK_EMBEDDER_URL";

/// Strings generators commonly leave at the end of a hypothesis.
const TERMINATORS: &[&str] = &["</s>", "<end_of_utterance>", "<eos>", "<|endoftext|>"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Sequence log-probability reported by the generator.
    pub score: f64,
    /// Position in the generator's hypothesis list, 0 = best.
    pub beam_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_id: String,
    pub decoding: Decoding,
    /// Sorted by `beam_rank`.
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn by_rank(&self, beam_rank: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.beam_rank == beam_rank)
    }

    /// The best-ranked candidate.
    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferentDescription {
    pub beam_rank: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn raw(values: Vec<f64>) -> Self {
        EmbeddingVector {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Unit-length copy, or `None` for a zero (or non-finite) vector.
    pub fn normalize(&self) -> Option<EmbeddingVector> {
        let n = self.norm();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        Some(EmbeddingVector {
            values: self.values.iter().map(|x| x / n).collect(),
            normalized: true,
        })
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("{endpoint} unavailable after {attempts} attempt(s): {message}")]
    Unavailable {
        endpoint: Endpoint,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint} rejected the request: {message}")]
    Rejected { endpoint: Endpoint, message: String },
    #[error("{endpoint}: no recorded response for digest {digest}")]
    ReplayMiss { endpoint: Endpoint, digest: String },
    #[error("{endpoint}: malformed response: {message}")]
    Protocol { endpoint: Endpoint, message: String },
    #[error("every generated candidate was empty after sanitization")]
    EmptyGeneration,
    #[error("the describer returned an empty description")]
    EmptyDescription,
    #[error("embedding dimension {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

/// Base URLs for the three roles.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoints {
    pub generator: Option<String>,
    pub describer: Option<String>,
    pub embedder: Option<String>,
}

impl Endpoints {
    pub fn from_env() -> Self {
        let var = |k| std::env::var(k).ok().filter(|v: &String| !v.is_empty());
        Endpoints {
            generator: var(GENERATOR_URL_ENV),
            describer: var(DESCRIBER_URL_ENV),
            embedder: var(EMBEDDER_URL_ENV),
        }
    }

    /// Fill unset roles from `other`.
    pub fn or(self, other: Endpoints) -> Endpoints {
        Endpoints {
            generator: self.generator.or(other.generator),
            describer: self.describer.or(other.describer),
            embedder: self.embedder.or(other.embedder),
        }
    }
}

/// Transport per model role.
#[derive(Clone)]
pub struct RoleTransports {
    pub generator: Arc<dyn Transport>,
    pub describer: Arc<dyn Transport>,
    pub embedder: Arc<dyn Transport>,
}

impl RoleTransports {
    pub fn uniform(t: Arc<dyn Transport>) -> Self {
        RoleTransports {
            generator: t.clone(),
            describer: t.clone(),
            embedder: t,
        }
    }

    /// Wrap every role in `f`, e.g. to put a replay cache in front.
    pub fn map(self, f: impl Fn(Arc<dyn Transport>) -> Arc<dyn Transport>) -> Self {
        RoleTransports {
            generator: f(self.generator),
            describer: f(self.describer),
            embedder: f(self.embedder),
        }
    }
}

/// Typed client for all three roles. Shareable across threads.
pub struct BackendClient {
    roles: RoleTransports,
    retry: RetryPolicy,
    max_length: u32,
    dim: OnceLock<usize>,
}

impl BackendClient {
    pub fn new(roles: RoleTransports) -> Self {
        BackendClient {
            roles,
            retry: RetryPolicy::default(),
            max_length: DEFAULT_MAX_LENGTH,
            dim: OnceLock::new(),
        }
    }

    pub fn uniform(transport: Arc<dyn Transport>) -> Self {
        Self::new(RoleTransports::uniform(transport))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_length(mut self, max_length: u32) -> Self {
        self.max_length = max_length;
        self
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        transport: &dyn Transport,
        endpoint: Endpoint,
        request: &Req,
    ) -> Result<Resp, BackendError> {
        let value = serde_json::to_value(request).map_err(|e| BackendError::Rejected {
            endpoint,
            message: e.to_string(),
        })?;
        let attempts = self.retry.attempts.max(1);
        let mut delay = self.retry.base_delay;
        let mut attempt = 1;
        loop {
            match transport.call(endpoint, &value) {
                Ok(v) => {
                    return serde_json::from_value(v).map_err(|e| BackendError::Protocol {
                        endpoint,
                        message: e.to_string(),
                    })
                }
                Err(e) if e.is_transient() && attempt < attempts => {
                    log::warn!("{endpoint} attempt {attempt}/{attempts} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(TransportError::Unavailable(message)) => {
                    return Err(BackendError::Unavailable {
                        endpoint,
                        attempts: attempt,
                        message,
                    })
                }
                Err(TransportError::Rejected(message)) => return Err(BackendError::Rejected { endpoint, message }),
                Err(TransportError::ReplayMiss(digest)) => return Err(BackendError::ReplayMiss { endpoint, digest }),
            }
        }
    }

    /// Candidate REs for `prompt`: sanitized, deduplicated keeping the best
    /// ranked copy, and cut to the decoding width.
    pub fn generate_candidates(
        &self,
        mention_id: &str,
        prompt: &PromptSequence,
        decoding: Decoding,
    ) -> Result<CandidateSet, BackendError> {
        if decoding.width() == 0 {
            return Err(BackendError::Precondition("beam width must be at least 1".into()));
        }
        let req = GenerateRequest {
            version: PROTOCOL_VERSION,
            prompt: prompt.clone(),
            decoding,
            max_length: self.max_length,
        };
        let resp: GenerateResponse = self.call(&*self.roles.generator, Endpoint::Generate, &req)?;
        let mut raw = resp.candidates;
        if raw.iter().any(|c| !c.score.is_finite()) {
            return Err(BackendError::Protocol {
                endpoint: Endpoint::Generate,
                message: "non-finite candidate score".into(),
            });
        }
        // stable: equal scores keep the backend's order
        raw.sort_by(|a, b| b.score.total_cmp(&a.score));

        let mut seen = BTreeSet::new();
        let mut candidates = Vec::new();
        for (beam_rank, c) in raw.into_iter().enumerate() {
            if candidates.len() == decoding.width() {
                break;
            }
            let Some(text) = sanitize_candidate(&c.text) else { continue };
            if seen.insert(text.clone()) {
                candidates.push(Candidate {
                    text,
                    score: c.score,
                    beam_rank,
                });
            }
        }
        if candidates.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        Ok(CandidateSet {
            mention_id: mention_id.to_string(),
            decoding,
            candidates,
        })
    }

    /// Referent description for the candidate marked in `segment`.
    pub fn describe_referent(&self, segment: &str) -> Result<String, BackendError> {
        if extract_marked(segment).is_none() {
            return Err(BackendError::Precondition(
                "segment must contain exactly one balanced RE marker pair".into(),
            ));
        }
        let req = DescribeRequest {
            version: PROTOCOL_VERSION,
            segment: segment.to_string(),
            max_length: self.max_length,
        };
        let resp: DescribeResponse = self.call(&*self.roles.describer, Endpoint::Describe, &req)?;
        let text = resp.description.trim();
        if text.is_empty() {
            return Err(BackendError::EmptyDescription);
        }
        Ok(text.to_string())
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::Precondition("nothing to embed".into()));
        }
        let req = EmbedTextRequest {
            version: PROTOCOL_VERSION,
            texts: texts.to_vec(),
        };
        let resp: EmbedResponse = self.call(&*self.roles.embedder, Endpoint::EmbedText, &req)?;
        self.finish_embeddings(Endpoint::EmbedText, texts.len(), resp)
    }

    pub fn embed_images(&self, image_ids: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        if image_ids.is_empty() {
            return Err(BackendError::Precondition("nothing to embed".into()));
        }
        let req = EmbedImageRequest {
            version: PROTOCOL_VERSION,
            image_ids: image_ids.to_vec(),
        };
        let resp: EmbedResponse = self.call(&*self.roles.embedder, Endpoint::EmbedImage, &req)?;
        self.finish_embeddings(Endpoint::EmbedImage, image_ids.len(), resp)
    }

    fn finish_embeddings(
        &self,
        endpoint: Endpoint,
        expected: usize,
        resp: EmbedResponse,
    ) -> Result<Vec<EmbeddingVector>, BackendError> {
        if resp.vectors.len() != expected {
            return Err(BackendError::Protocol {
                endpoint,
                message: format!("{} vectors for {expected} inputs", resp.vectors.len()),
            });
        }
        let dim = *self.dim.get_or_init(|| resp.vectors[0].len());
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(BackendError::DimensionMismatch {
                        expected: dim,
                        found: v.len(),
                    });
                }
                EmbeddingVector::raw(v).normalize().ok_or_else(|| BackendError::Protocol {
                    endpoint,
                    message: "zero or non-finite embedding".into(),
                })
            })
            .collect()
    }
}

/// Strip marker and terminator residue from a generated RE. Returns `None`
/// when nothing usable is left or a marker remains inside the text.
pub fn sanitize_candidate(raw: &str) -> Option<String> {
    let mut s = raw.split('\n').next().unwrap_or("").trim();
    loop {
        let before = s;
        for t in TERMINATORS {
            if let Some(rest) = s.strip_suffix(t) {
                s = rest.trim_end();
            }
        }
        if let Some(rest) = s.strip_prefix(RE_START) {
            s = rest.trim_start();
        }
        if let Some(rest) = s.strip_suffix(RE_END) {
            s = rest.trim_end();
        }
        if s == before {
            break;
        }
    }
    if s.is_empty() || s.contains(RE_START) || s.contains(RE_END) {
        return None;
    }
    Some(s.to_string())
}
