//! Deterministic stand-in for the three model roles.
//!
//! [`FixtureModel`] knows each image's ground-truth description and nothing
//! else. It proposes REs built from the referent's description words, resolves
//! proforms in a marked segment by borrowing content words from the preceding
//! message, and embeds texts and images as hashed bags of content words. That
//! is enough structure for the reranker to have something to work with, and
//! every response is a pure function of the request.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::transport::{Transport, TransportError};
use super::wire::*;
use crate::context::{extract_marked, RE_START};
use crate::corpus::Corpus;
use crate::metrics::tokenize;

/// Words ignored when building descriptions and bag-of-words embeddings.
const FUNCTION_WORDS: &[&str] = &[
    "a", "about", "already", "an", "and", "are", "be", "both", "do", "done", "for", "go", "honest", "hmm", "i", "i'm",
    "is", "it", "it's", "its", "lets", "let's", "like", "looks", "m", "maybe", "more", "next", "not", "now", "of",
    "ok", "one", "ones", "placed", "rank", "ranked", "really", "should", "similar", "so", "sure", "than", "that",
    "the", "them", "then", "these", "they", "think", "this", "those", "to", "we", "what", "with", "would", "yeah",
    "yes", "you", "agreed", "put", "i'd", "how", "at", "first", "still", "too", "very", "s",
];

const PROFORMS: &[&str] = &["it", "one", "ones", "that", "this", "those", "them", "they", "its"];

/// FNV-1a, 64 bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn content_words(text: &str) -> Vec<String> {
    tokenize(text)
        .tokens
        .into_iter()
        .filter(|t| !FUNCTION_WORDS.contains(&t.as_str()))
        .collect()
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub struct FixtureModel {
    descriptions: BTreeMap<String, String>,
    dim: usize,
}

impl FixtureModel {
    pub const DEFAULT_DIM: usize = 32;

    pub fn new(corpus: &Corpus) -> Self {
        Self::with_dim(corpus, Self::DEFAULT_DIM)
    }

    pub fn with_dim(corpus: &Corpus, dim: usize) -> Self {
        let descriptions = corpus
            .image_sets
            .iter()
            .flat_map(|s| &s.images)
            .map(|i| {
                let d = i.ground_truth_description.clone().unwrap_or_else(|| i.image_id.clone());
                (i.image_id.clone(), d)
            })
            .collect();
        FixtureModel {
            descriptions,
            dim: dim.max(2),
        }
    }

    fn bag(&self, words: &[String], noise_key: &str, noise: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in words {
            let h = fnv1a(w.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(noise_key.as_bytes()));
        for x in v.iter_mut() {
            *x += noise * (rand::Rng::random::<f64>(&mut rng) - 0.5);
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        v.into_iter().map(round4).collect()
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.bag(&content_words(text), text, 0.3)
    }

    pub fn embed_image(&self, image_id: &str) -> Option<Vec<f64>> {
        let d = self.descriptions.get(image_id)?;
        Some(self.bag(&content_words(d), image_id, 0.6))
    }

    /// Candidate REs for a referent description, most to least preferred
    /// before prompt-dependent shuffling.
    fn candidate_pool(description: &str) -> Vec<String> {
        let words: Vec<String> = tokenize(description)
            .tokens
            .into_iter()
            .filter(|t| !matches!(t.as_str(), "the" | "a" | "an"))
            .collect();
        let (noun, adjs) = match words.split_last() {
            Some((n, rest)) => (n.clone(), rest.to_vec()),
            None => ("one".to_string(), vec![]),
        };
        let mut pool = vec![
            "it".to_string(),
            format!("the {}", words.join(" ")),
            format!("the {noun}"),
            "that one".to_string(),
            "it <<".to_string(),
        ];
        if let Some(first) = adjs.first() {
            pool.insert(1, format!("the {first} one"));
            pool.push(format!("the {first} {noun}"));
        }
        if let Some(last) = adjs.last() {
            pool.push(format!("the {last} {noun}"));
        }
        pool
    }

    fn generate(&self, req: GenerateRequest) -> Result<Value, TransportError> {
        let target = req
            .prompt
            .referent_image()
            .or_else(|| req.prompt.image_ids().last())
            .ok_or_else(|| TransportError::Rejected("prompt has no image slot".into()))?;
        let description = self
            .descriptions
            .get(target)
            .ok_or_else(|| TransportError::Rejected(format!("unknown image {target}")))?;
        let text = req.prompt.render();
        let key = fnv1a(text.as_bytes());
        let mut pool = Self::candidate_pool(description);
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        let n = req.decoding.width().min(pool.len());
        let candidates: Vec<Value> = pool
            .into_iter()
            .take(n)
            .enumerate()
            .map(|(k, t)| {
                let jitter = ((key >> (k % 48)) % 100) as f64 / 1000.0;
                json!({ "text": t, "score": round4(-0.3 - 0.45 * k as f64 - jitter) })
            })
            .collect();
        Ok(json!({ "candidates": candidates }))
    }

    /// Description of the marked RE: its own content words, plus content
    /// words of the closest earlier message line when it contains a proform.
    pub fn describe(segment: &str) -> String {
        let Some(re) = extract_marked(segment) else {
            return String::new();
        };
        let mut words = content_words(re);
        let re_tokens = tokenize(re).tokens;
        let has_proform = re_tokens.iter().any(|t| PROFORMS.contains(&t.as_str()));
        if has_proform {
            let lines: Vec<&str> = segment.lines().collect();
            let current = lines.iter().rposition(|l| l.contains(RE_START)).unwrap_or(0);
            let borrowed = lines[..current]
                .iter()
                .rev()
                .filter(|l| !l.starts_with("M: "))
                .map(|l| content_words(l.get(3..).unwrap_or(l)))
                .find(|w| !w.is_empty())
                .unwrap_or_default();
            for w in borrowed {
                if words.len() >= 4 {
                    break;
                }
                if !words.contains(&w) {
                    words.push(w);
                }
            }
        }
        if words.is_empty() {
            return String::new();
        }
        format!("the {}", words.join(" "))
    }
}

fn parse<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, TransportError> {
    serde_json::from_value(v.clone()).map_err(|e| TransportError::Rejected(e.to_string()))
}

impl Transport for FixtureModel {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, TransportError> {
        match endpoint {
            Endpoint::Generate => self.generate(parse(request)?),
            Endpoint::Describe => {
                let req: DescribeRequest = parse(request)?;
                Ok(json!({ "description": Self::describe(&req.segment) }))
            }
            Endpoint::EmbedText => {
                let req: EmbedTextRequest = parse(request)?;
                let vectors: Vec<Vec<f64>> = req.texts.iter().map(|t| self.embed_text(t)).collect();
                Ok(json!({ "vectors": vectors }))
            }
            Endpoint::EmbedImage => {
                let req: EmbedImageRequest = parse(request)?;
                let vectors = req
                    .image_ids
                    .iter()
                    .map(|id| {
                        self.embed_image(id)
                            .ok_or_else(|| TransportError::Rejected(format!("unknown image {id}")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(json!({ "vectors": vectors }))
            }
        }
    }
}
