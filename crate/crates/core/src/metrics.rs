//! Text-text and text-image evaluation metrics.
//!
//! All text metrics share one tokenizer: lowercase, punctuation stripped,
//! whitespace separated. Rank metrics assume a single relevant item (the
//! target image), so NDCG reduces to `1 / log2(rank + 1)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backends::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercase word tokens. Punctuation separates tokens and is dropped; an
/// apostrophe inside a word is kept (`"i'm"`).
pub fn tokenize(text: &str) -> TokenSeq {
    let tokens = text
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    TokenSeq { tokens }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU over n-grams up to `max_n`, uniform weights, no smoothing.
pub fn bleu(candidate: &TokenSeq, reference: &TokenSeq, max_n: usize) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    if candidate.is_empty() || max_n == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(&candidate.tokens, n);
        let reff = ngram_counts(&reference.tokens, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(reff.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1).
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let lcs = lcs_len(&candidate.tokens, &reference.tokens);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Jaccard index over token sets. Two empty inputs score 1.0.
pub fn jaccard(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let a: BTreeSet<&str> = candidate.tokens.iter().map(String::as_str).collect();
    let b: BTreeSet<&str> = reference.tokens.iter().map(String::as_str).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Raw cosine similarity in `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, MetricError> {
    if u.dim() != v.dim() {
        return Err(MetricError::DimensionMismatch(u.dim(), v.dim()));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingOutcome {
    /// 1-based rank of the target image.
    pub target_rank: usize,
    pub n_candidates: usize,
}

impl RankingOutcome {
    /// Rank of `target` when `scores` are sorted descending. Ties with the
    /// target are resolved in its favour.
    pub fn from_scores(scores: &[f64], target: usize) -> Self {
        let t = scores[target];
        RankingOutcome {
            target_rank: 1 + scores.iter().filter(|s| **s > t).count(),
            n_candidates: scores.len(),
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.target_rank == 1 {
            1.0
        } else {
            0.0
        }
    }

    pub fn reciprocal_rank(&self) -> f64 {
        1.0 / self.target_rank as f64
    }

    pub fn ndcg(&self) -> f64 {
        1.0 / ((self.target_rank + 1) as f64).log2()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TirScores {
    pub accuracy: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Mean top-1 accuracy, reciprocal rank and NDCG over `outcomes`.
pub fn tir_metrics(outcomes: &[RankingOutcome]) -> Option<TirScores> {
    if outcomes.is_empty() {
        return None;
    }
    let n = outcomes.len() as f64;
    Some(TirScores {
        accuracy: outcomes.iter().map(RankingOutcome::accuracy).sum::<f64>() / n,
        mrr: outcomes.iter().map(RankingOutcome::reciprocal_rank).sum::<f64>() / n,
        ndcg: outcomes.iter().map(RankingOutcome::ndcg).sum::<f64>() / n,
    })
}

/// Metric columns reported per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Unigram BLEU of the RE against the ground-truth RE.
    Bleu,
    RougeL,
    CosineTt,
    Accuracy,
    Mrr,
    Ndcg,
    CosineTi,
    /// Unigram+bigram BLEU of the referent description against the image label.
    DescBleu,
    DescRougeL,
    DescJaccard,
    DescCosineTt,
}

impl Metric {
    pub const RE_TABLE: [Metric; 7] = [
        Metric::Bleu,
        Metric::RougeL,
        Metric::CosineTt,
        Metric::Accuracy,
        Metric::Mrr,
        Metric::Ndcg,
        Metric::CosineTi,
    ];

    pub const DESCRIPTION_TABLE: [Metric; 8] = [
        Metric::DescBleu,
        Metric::DescRougeL,
        Metric::DescJaccard,
        Metric::DescCosineTt,
        Metric::Accuracy,
        Metric::Mrr,
        Metric::Ndcg,
        Metric::CosineTi,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Bleu | Metric::DescBleu => "BLEU",
            Metric::RougeL | Metric::DescRougeL => "ROUGE-L",
            Metric::DescJaccard => "Jaccard",
            Metric::CosineTt | Metric::DescCosineTt => "Cosine_TT",
            Metric::Accuracy => "Accuracy",
            Metric::Mrr => "MRR",
            Metric::Ndcg => "NDCG",
            Metric::CosineTi => "Cosine_TI",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One sample's metric values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricRow(pub BTreeMap<Metric, f64>);

impl MetricRow {
    pub fn set(&mut self, m: Metric, v: f64) {
        self.0.insert(m, v);
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.0.get(&m).copied()
    }
}

/// Per-metric means over a set of samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub n: usize,
    pub means: BTreeMap<Metric, f64>,
}

impl ScoreReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.means.get(&m).copied()
    }
}

fn mean_by_metric<'a>(items: impl Iterator<Item = &'a BTreeMap<Metric, f64>>) -> BTreeMap<Metric, f64> {
    let mut sums: BTreeMap<Metric, (f64, usize)> = BTreeMap::new();
    for map in items {
        for (m, v) in map {
            let e = sums.entry(*m).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(m, (s, c))| (m, s / c as f64)).collect()
}

/// Unweighted mean of each metric over the rows that carry it.
pub fn aggregate(rows: &[MetricRow]) -> ScoreReport {
    ScoreReport {
        n: rows.len(),
        means: mean_by_metric(rows.iter().map(|r| &r.0)),
    }
}

/// Macro average: unweighted mean of per-fold means. Folds with no samples
/// are skipped.
pub fn aggregate_folds(folds: &[ScoreReport]) -> ScoreReport {
    let nonempty: Vec<&ScoreReport> = folds.iter().filter(|f| f.n > 0).collect();
    ScoreReport {
        n: nonempty.iter().map(|f| f.n).sum(),
        means: mean_by_metric(nonempty.iter().map(|f| &f.means)),
    }
}

/// Round to the nearest hundredth.
pub fn round_hundredths(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Display form of a score, e.g. `0.856` → `"0.86"`.
pub fn format_score(x: f64) -> String {
    format!("{:.2}", round_hundredths(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> TokenSeq {
        tokenize(s)
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(t("The black one.").tokens, ["the", "black", "one"]);
        assert!(t("").is_empty());
        assert_eq!(t("Nokia E75!").tokens, ["nokia", "e75"]);
        assert_eq!(t("I'm not 'sure'").tokens, ["i'm", "not", "sure"]);
    }

    #[test]
    fn bleu_cases() {
        assert_eq!(bleu(&t("the husky"), &t("the husky"), 2).unwrap(), 1.0);
        let b = bleu(&t("the white dog"), &t("the white curly dog"), 1).unwrap();
        // precision 1, BP = exp(1 - 4/3)
        assert!(close(b, (1.0f64 - 4.0 / 3.0).exp(), 1e-12));
        assert!(close(b, 0.7165, 1e-4));
        assert_eq!(bleu(&t("red car"), &t("the husky"), 1).unwrap(), 0.0);
        assert_eq!(bleu(&t("x"), &t(""), 1), Err(MetricError::EmptyReference));
        // no matching bigram
        assert_eq!(bleu(&t("white the"), &t("the white"), 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&t("the husky"), &t("the husky")).unwrap(), 1.0);
        let r = rouge_l(&t("the white dog"), &t("the white curly dog")).unwrap();
        assert!(close(r, 6.0 / 7.0, 1e-12));
        assert!(close(r, 0.8571, 1e-4));
        assert_eq!(rouge_l(&t("red car"), &t("the husky")).unwrap(), 0.0);
        assert_eq!(rouge_l(&t("x"), &t("")), Err(MetricError::EmptyReference));
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&t("the black one"), &t("the black nokia")), 0.5);
        assert_eq!(jaccard(&t("a b"), &t("b a")), 1.0);
        assert_eq!(jaccard(&t("a"), &t("b")), 0.0);
        assert_eq!(jaccard(&t(""), &t("")), 1.0);
    }

    #[test]
    fn cosine_cases() {
        let v = EmbeddingVector::raw(vec![0.3, -0.2, 0.9]);
        assert!(close(cosine(&v, &v).unwrap(), 1.0, 1e-12));
        let x = EmbeddingVector::raw(vec![1.0, 0.0]);
        let y = EmbeddingVector::raw(vec![0.0, 2.0]);
        assert_eq!(cosine(&x, &y).unwrap(), 0.0);
        let d = EmbeddingVector::raw(vec![1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt()]);
        assert!(close(cosine(&d, &x).unwrap(), std::f64::consts::FRAC_1_SQRT_2, 1e-12));
        assert_eq!(cosine(&x, &EmbeddingVector::raw(vec![0.0, 0.0])), Err(MetricError::ZeroVector));
    }

    #[test]
    fn tir_cases() {
        let o = |r| RankingOutcome {
            target_rank: r,
            n_candidates: 9,
        };
        let all1 = tir_metrics(&[o(1), o(1)]).unwrap();
        assert_eq!((all1.accuracy, all1.mrr, all1.ndcg), (1.0, 1.0, 1.0));

        let s = tir_metrics(&[o(1), o(2), o(4)]).unwrap();
        // (1 + 1/2 + 1/4) / 3 and (1 + 1/log2 3 + 1/log2 5) / 3
        let ndcg = (1.0 + 1.0 / 3f64.log2() + 1.0 / 5f64.log2()) / 3.0;
        assert!(close(s.accuracy, 1.0 / 3.0, 1e-12));
        assert!(close(s.mrr, 1.75 / 3.0, 1e-12));
        assert!(close(s.ndcg, ndcg, 1e-12));
        assert!(close(s.ndcg, 0.6872, 1e-4));

        let one = tir_metrics(&[o(2)]).unwrap();
        assert_eq!((one.accuracy, one.mrr), (0.0, 0.5));
        assert!(close(one.ndcg, 0.6309, 1e-4));
        assert!(tir_metrics(&[]).is_none());
    }

    #[test]
    fn rank_from_scores() {
        let r = RankingOutcome::from_scores(&[0.1, 0.5, 0.3], 2);
        assert_eq!(r.target_rank, 2);
        assert_eq!(RankingOutcome::from_scores(&[0.5, 0.5], 1).target_rank, 1);
    }

    #[test]
    fn aggregation() {
        let row = |v: f64| MetricRow([(Metric::Bleu, v)].into_iter().collect());
        assert_eq!(aggregate(&[row(0.4)]).get(Metric::Bleu), Some(0.4));
        assert_eq!(aggregate(&[row(0.0), row(1.0)]).get(Metric::Bleu), Some(0.5));
        let folds: Vec<ScoreReport> = [0.6, 0.7, 0.8, 0.9, 1.0].iter().map(|v| aggregate(&[row(*v)])).collect();
        let macro_avg = aggregate_folds(&folds);
        assert!(close(macro_avg.get(Metric::Bleu).unwrap(), 0.8, 1e-12));
        assert_eq!(macro_avg.n, 5);
        // rows missing a metric do not dilute its mean
        let mut partial = row(1.0);
        partial.set(Metric::DescJaccard, 0.5);
        let r = aggregate(&[partial, row(0.0)]);
        assert_eq!(r.get(Metric::DescJaccard), Some(0.5));
    }

    #[test]
    fn display_rounding() {
        assert_eq!(format_score(0.856), "0.86");
        assert_eq!(format_score(0.004), "0.00");
        assert_eq!(format_score(1.0), "1.00");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn words() -> impl Strategy<Value = String> {
            proptest::collection::vec("[a-e]{1,3}", 0..8).prop_map(|w| w.join(" "))
        }

        proptest! {
            #[test]
            fn bounded_and_symmetric(a in words(), b in words()) {
                let (ta, tb) = (tokenize(&a), tokenize(&b));
                let j = jaccard(&ta, &tb);
                prop_assert!((0.0..=1.0).contains(&j));
                prop_assert_eq!(j, jaccard(&tb, &ta));
                if !tb.is_empty() {
                    for n in 1..=2 {
                        let s = bleu(&ta, &tb, n).unwrap();
                        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
                    }
                    let r = rouge_l(&ta, &tb).unwrap();
                    prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
                }
            }

            #[test]
            fn self_similarity_is_one(a in words()) {
                let ta = tokenize(&a);
                prop_assume!(!ta.is_empty());
                prop_assert!((bleu(&ta, &ta, 1).unwrap() - 1.0).abs() < 1e-12);
                prop_assert!((rouge_l(&ta, &ta).unwrap() - 1.0).abs() < 1e-12);
                prop_assert_eq!(jaccard(&ta, &ta), 1.0);
            }

            #[test]
            fn rank_metric_ordering(rank in 1usize..50) {
                let o = RankingOutcome { target_rank: rank, n_candidates: 50 };
                prop_assert!(o.accuracy() <= o.reciprocal_rank());
                prop_assert!(o.reciprocal_rank() <= o.ndcg() + 1e-15);
            }

            #[test]
            fn cosine_symmetric(u in proptest::collection::vec(-1.0f64..1.0, 4), v in proptest::collection::vec(-1.0f64..1.0, 4)) {
                let (u, v) = (EmbeddingVector::raw(u), EmbeddingVector::raw(v));
                prop_assume!(u.norm() > 1e-6 && v.norm() > 1e-6);
                prop_assert!((cosine(&u, &v).unwrap() - cosine(&v, &u).unwrap()).abs() < 1e-12);
            }
        }
    }
}
