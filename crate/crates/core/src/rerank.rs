//! Comprehension-guided candidate selection.
//!
//! Each candidate RE is represented by the embedding of its referent
//! description. Against the images of the reduced visual context this gives a
//! candidates × images similarity matrix, read two ways:
//!
//! - **TIM** (text → image): softmax along a row. `a` is the probability the
//!   candidate's description picks the target over the distractors.
//! - **ITM** (image → text): softmax down the target column. `b` is the
//!   probability the target image picks this candidate over the others.
//!
//! The pooled score is `S = w_a·ln(a + ε) + w_b·ln(b + ε)` with
//! `w_a + w_b = 1`. A candidate can have a high `a` from a description that
//! is a poor absolute fit for every image; `b` penalises that.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::{CandidateSet, EmbeddingVector};

/// Slack allowed when checking similarity and weight bounds.
const BOUND_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RerankError {
    #[error("embedding dimension {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("similarity matrix needs at least one candidate and one image")]
    Empty,
    #[error("similarity matrix rows have different lengths")]
    Ragged,
    #[error("target column {0} out of range")]
    TargetOutOfRange(usize),
    #[error("similarity {0} outside [-1, 1]")]
    OutOfBounds(f64),
    #[error("invalid pooling config: {0}")]
    InvalidConfig(String),
    #[error("{scores} scores for {candidates} candidates")]
    Misaligned { scores: usize, candidates: usize },
}

/// Candidate-description × image cosine similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    rows: Vec<Vec<f64>>,
    target_col: usize,
}

impl SimilarityMatrix {
    pub fn new(rows: Vec<Vec<f64>>, target_col: usize) -> Result<Self, RerankError> {
        let width = rows.first().map(Vec::len).ok_or(RerankError::Empty)?;
        if width == 0 {
            return Err(RerankError::Empty);
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(RerankError::Ragged);
        }
        if target_col >= width {
            return Err(RerankError::TargetOutOfRange(target_col));
        }
        if let Some(bad) = rows.iter().flatten().find(|x| x.is_nan() || x.abs() > 1.0 + BOUND_TOL) {
            return Err(RerankError::OutOfBounds(*bad));
        }
        Ok(SimilarityMatrix { rows, target_col })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn target_col(&self) -> usize {
        self.target_col
    }

    pub fn n_candidates(&self) -> usize {
        self.rows.len()
    }

    pub fn n_images(&self) -> usize {
        self.rows[0].len()
    }

    /// Similarities in the target column, one per candidate.
    pub fn target_column(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[self.target_col]).collect()
    }
}

/// Dot products of unit-length description and image embeddings.
pub fn similarity_matrix(
    descriptions: &[EmbeddingVector],
    images: &[EmbeddingVector],
    target_index: usize,
) -> Result<SimilarityMatrix, RerankError> {
    let dim = descriptions.first().ok_or(RerankError::Empty)?.dim();
    if let Some(v) = descriptions.iter().chain(images).find(|v| v.dim() != dim) {
        return Err(RerankError::DimensionMismatch {
            expected: dim,
            found: v.dim(),
        });
    }
    let unit = |v: &EmbeddingVector| {
        if v.normalized {
            v.clone()
        } else {
            v.normalize().unwrap_or_else(|| v.clone())
        }
    };
    let images: Vec<EmbeddingVector> = images.iter().map(unit).collect();
    let rows = descriptions
        .iter()
        .map(unit)
        .map(|d| images.iter().map(|i| d.dot(i).clamp(-1.0, 1.0)).collect())
        .collect();
    SimilarityMatrix::new(rows, target_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    /// Weight on the TIM log-probability.
    pub w_tim: f64,
    /// Weight on the ITM log-probability.
    pub w_itm: f64,
    /// Added inside each logarithm.
    pub epsilon: f64,
    /// Multiplier applied to similarities before either softmax.
    pub logit_scale: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            w_tim: 2.0 / 3.0,
            w_itm: 1.0 / 3.0,
            epsilon: 1e-9,
            logit_scale: 100.0,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        let bad = |m: &str| Err(RerankError::InvalidConfig(m.to_string()));
        if !(self.w_tim >= 0.0 && self.w_itm >= 0.0) {
            return bad("weights must be non-negative");
        }
        if (self.w_tim + self.w_itm - 1.0).abs() > BOUND_TOL {
            return bad("weights must sum to 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad("logit scale must be positive");
        }
        Ok(())
    }
}

/// Numerically stable softmax of `scale * xs`.
pub fn softmax(xs: &[f64], scale: f64) -> Vec<f64> {
    let max = xs.iter().map(|x| scale * x).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (scale * x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Row-wise softmax: each candidate's distribution over the images.
pub fn tim_distribution(matrix: &SimilarityMatrix, config: &PoolingConfig) -> Vec<Vec<f64>> {
    matrix.rows.iter().map(|r| softmax(r, config.logit_scale)).collect()
}

/// Softmax of the target column over candidates.
pub fn itm_distribution(matrix: &SimilarityMatrix, config: &PoolingConfig) -> Vec<f64> {
    softmax(&matrix.target_column(), config.logit_scale)
}

/// `S_i = w_tim·ln(a_i + ε) + w_itm·ln(b_i + ε)`, in input order.
pub fn pooled_scores(a: &[f64], b: &[f64], config: &PoolingConfig) -> Result<Vec<f64>, RerankError> {
    if a.len() != b.len() {
        return Err(RerankError::Misaligned {
            scores: b.len(),
            candidates: a.len(),
        });
    }
    config.validate()?;
    Ok(a.iter()
        .zip(b)
        .map(|(a, b)| config.w_tim * (a + config.epsilon).ln() + config.w_itm * (b + config.epsilon).ln())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub beam_rank: usize,
    /// TIM probability of the target image.
    pub a: f64,
    /// ITM probability of this candidate for the target image.
    pub b: f64,
    /// Pooled score.
    pub s: f64,
}

/// Score every matrix row; `beam_ranks[i]` names the candidate of row `i`.
pub fn score_matrix(
    matrix: &SimilarityMatrix,
    beam_ranks: &[usize],
    config: &PoolingConfig,
) -> Result<Vec<ScoredCandidate>, RerankError> {
    if beam_ranks.len() != matrix.n_candidates() {
        return Err(RerankError::Misaligned {
            scores: matrix.n_candidates(),
            candidates: beam_ranks.len(),
        });
    }
    let t = matrix.target_col;
    let a: Vec<f64> = tim_distribution(matrix, config).iter().map(|row| row[t]).collect();
    let b = itm_distribution(matrix, config);
    let s = pooled_scores(&a, &b, config)?;
    Ok(beam_ranks
        .iter()
        .enumerate()
        .map(|(i, &beam_rank)| ScoredCandidate {
            beam_rank,
            a: a[i],
            b: b[i],
            s: s[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Best beam hypothesis, no guidance.
    Top1,
    /// Highest TIM probability.
    MaxDisc,
    /// Highest pooled score.
    Rerank,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Top1, Strategy::MaxDisc, Strategy::Rerank];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Top1 => "Top-1",
            Strategy::MaxDisc => "Max disc.",
            Strategy::Rerank => "Rerank",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_', '.', ' '], "").as_str() {
            "top1" => Ok(Strategy::Top1),
            "maxdisc" => Ok(Strategy::MaxDisc),
            "rerank" => Ok(Strategy::Rerank),
            _ => Err(format!("unknown strategy {s:?} (top1, max-disc, rerank)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub strategy: Strategy,
    pub beam_rank: usize,
    pub text: String,
    /// Set when a scoring strategy had nothing to score and fell back to Top-1.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

/// Maximal candidate under a lexicographic key; remaining ties go to the
/// lowest beam rank.
fn argmax_by(scored: &[ScoredCandidate], key: impl Fn(&ScoredCandidate) -> (f64, f64)) -> Option<&ScoredCandidate> {
    scored.iter().fold(None, |best: Option<&ScoredCandidate>, c| match best {
        None => Some(c),
        Some(b) => {
            let (kc, kb) = (key(c), key(b));
            let better = match kc.partial_cmp(&kb) {
                Some(std::cmp::Ordering::Greater) => true,
                Some(std::cmp::Ordering::Equal) => c.beam_rank < b.beam_rank,
                _ => false,
            };
            Some(if better { c } else { b })
        }
    })
}

/// Pick a candidate. Scoring strategies with nothing to score degrade to
/// Top-1 and set [`Selection::degraded`]. Rerank breaks exact ties in `S` on
/// `a`, then on beam rank.
///
/// # Panics
///
/// If `candidates` is empty; a [`CandidateSet`] from the client never is.
pub fn select_candidate(candidates: &CandidateSet, scored: &[ScoredCandidate], strategy: Strategy) -> Selection {
    let top = candidates
        .candidates
        .iter()
        .min_by_key(|c| c.beam_rank)
        .expect("candidate set is nonempty");
    let picked = match strategy {
        Strategy::Top1 => None,
        Strategy::MaxDisc => argmax_by(scored, |c| (c.a, 0.0)),
        // When every a is far below epsilon, ln(a + eps) rounds to the same
        // value for all candidates; fall back on a so w = (1, 0) still
        // reproduces Max disc.
        Strategy::Rerank => argmax_by(scored, |c| (c.s, c.a)),
    };
    match picked.and_then(|p| candidates.by_rank(p.beam_rank)) {
        Some(c) => Selection {
            strategy,
            beam_rank: c.beam_rank,
            text: c.text.clone(),
            degraded: false,
        },
        None => {
            let degraded = strategy != Strategy::Top1;
            if degraded {
                log::warn!("{}: no scored candidates, falling back to Top-1", candidates.mention_id);
            }
            Selection {
                strategy,
                beam_rank: top.beam_rank,
                text: top.text.clone(),
                degraded,
            }
        }
    }
}
