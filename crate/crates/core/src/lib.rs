//! Generate-and-rerank referring expression generation for visually grounded
//! dialogue.
//!
//! A generative model proposes candidate referring expressions (REs) for a
//! target image at a point in a conversation. Each candidate is spliced back
//! into the dialogue, a discourse-aware description model turns it into a
//! standalone referent description, and a contrastive vision-language model
//! scores how well that description singles out the target among the images
//! still in play. Candidates are then selected by pooling two softmax views of
//! the same similarity matrix.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: annotated dialogues, image sets, mentions and ranking events
//! - [`context`]: context windows, the reduced visual context, prompt assembly
//! - [`backends`]: wire-protocol clients for the three model roles, with mock
//!   and record/replay transports
//! - [`rerank`]: similarity matrices, TIM/ITM distributions, pooled scores and
//!   selection strategies
//! - [`metrics`]: text-text and text-image metrics and their aggregation
//! - [`harness`]: cross-validation, per-mention execution and reports
//! - [`humaneval`]: the human text-image retrieval study sessions
//! - [`synthetic`]: generators for corpora shaped like the nine-image ranking
//!   game, used for fixtures and baselines
//!
//! ```
//! use regrank::rerank::{PoolingConfig, SimilarityMatrix, score_matrix, select_candidate, Strategy};
//!
//! // Two candidates, two images; the target is image 0.
//! let m = SimilarityMatrix::new(vec![vec![0.30, 0.10], vec![0.60, 0.55]], 0).unwrap();
//! let cfg = PoolingConfig { logit_scale: 10.0, ..PoolingConfig::default() };
//! let scored = score_matrix(&m, &[0, 1], &cfg).unwrap();
//! assert!(scored[0].a > scored[1].a);
//! assert!(scored[1].s > scored[0].s);
//! ```

pub mod backends;
pub mod context;
pub mod corpus;
pub mod harness;
pub mod humaneval;
pub mod metrics;
pub mod rerank;
pub mod synthetic;

#[cfg(test)]
pub(crate) mod testutil;

pub use corpus::{load_corpus, Corpus, Dialogue, ImageRef, ImageSet, Mention, Message, RankingEvent, Speaker};

// Runs every Rust snippet of the guide under `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus-format.md")]
    mod corpus_format {}
    #[doc = include_str!("../../../book/src/context.md")]
    mod context {}
    #[doc = include_str!("../../../book/src/reranking.md")]
    mod reranking {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
    #[doc = include_str!("../../../book/src/wire-protocol.md")]
    mod wire_protocol {}
    #[doc = include_str!("../../../book/src/humaneval.md")]
    mod humaneval {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
