//! Cross-validated evaluation runs.
//!
//! One fold per image set: the set's dialogues are the test split and every
//! other dialogue is training data. Training itself happens elsewhere; the
//! train lists are recorded so an external fine-tuning job can honour them,
//! and in-context runs draw their support examples from them.
//!
//! For every single-image mention of a test dialogue, [`run_mention`] walks
//! the whole pipeline: window, prompt, candidates, insertion, descriptions,
//! embeddings, similarity, pooling, selection per strategy and metrics
//! against the annotated RE. Mentions whose target was already ranked are
//! excluded; backend failures mark the sample failed and the run goes on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    BackendClient, BackendError, Candidate, Decoding, EmbeddingVector, Endpoints, HttpTransport, ReplayCache, ReplayMode,
    ReplayTransport, RoleTransports, Transport,
};
use crate::context::{
    assemble_generation_prompt, assemble_icl_prompt, build_window_sized, insert_candidate, visual_context_at,
    ContextError, SupportPool, DEFAULT_WINDOW,
};
use crate::corpus::{validate_corpus, Corpus, Dialogue, ImageSet, Mention, Violation};
use crate::metrics::{
    aggregate, aggregate_folds, bleu, cosine, format_score, jaccard, rouge_l, tokenize, Metric, MetricRow,
    RankingOutcome, ScoreReport,
};
use crate::rerank::{score_matrix, select_candidate, similarity_matrix, PoolingConfig, ScoredCandidate, Selection, Strategy};

/// Bumped whenever the report layout changes.
pub const REPORT_VERSION: u32 = 1;

/// Exclusion reason for mentions whose target left the visual context.
pub const TARGET_NOT_IN_CANDIDATES: &str = "target not in candidates";

/// Support examples kept per RE category when building in-context pools.
const SUPPORT_PER_CATEGORY: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("corpus has no image sets")]
    NoImageSets,
    #[error("corpus failed validation with {} violation(s), first: {}", .0.len(), .0[0])]
    InvalidCorpus(Vec<Violation>),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_id: usize,
    pub test_set_id: String,
    pub test_dialogue_ids: Vec<String>,
    pub train_dialogue_ids: Vec<String>,
}

/// One fold per image set, in corpus order.
pub fn make_folds(corpus: &Corpus) -> Vec<FoldSpec> {
    corpus
        .image_sets
        .iter()
        .enumerate()
        .map(|(fold_id, set)| {
            let (test, train): (Vec<&Dialogue>, Vec<&Dialogue>) =
                corpus.dialogues.iter().partition(|d| d.set_id == set.set_id);
            let ids = |ds: Vec<&Dialogue>| ds.into_iter().map(|d| d.dialogue_id.clone()).collect();
            FoldSpec {
                fold_id,
                test_set_id: set.set_id.clone(),
                test_dialogue_ids: ids(test),
                train_dialogue_ids: ids(train),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PromptMode {
    /// `[context] + [image] + [RE start]` for a fine-tuned generator.
    #[default]
    FineTuned,
    /// User/Assistant prompt with `shots` support examples from the fold's
    /// training dialogues.
    InContext { shots: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of per-fold means.
    #[default]
    Macro,
    /// Mean over all samples.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplaySettings {
    pub mode: ReplayMode,
    pub dir: Option<PathBuf>,
}

/// Missing fields in a config file take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub decoding: Decoding,
    #[serde(default)]
    pub prompt_mode: PromptMode,
    pub strategies: Vec<Strategy>,
    pub pooling: PoolingConfig,
    pub window_size: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Mentions scored concurrently; 0 uses every core.
    #[serde(default)]
    pub parallelism: usize,
    pub seed: u64,
    /// Record wall-clock time in the report. Off by default so replayed
    /// reports are byte-identical.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub replay: ReplaySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            decoding: Decoding::Beam { width: 6 },
            prompt_mode: PromptMode::FineTuned,
            strategies: Strategy::ALL.to_vec(),
            pooling: PoolingConfig::default(),
            window_size: DEFAULT_WINDOW,
            aggregation: Aggregation::Macro,
            parallelism: 0,
            seed: 0,
            record_timing: false,
            endpoints: Endpoints::default(),
            replay: ReplaySettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.decoding.width() == 0 {
            return bad("beam width must be at least 1".into());
        }
        if let PromptMode::InContext { shots } = self.prompt_mode {
            if !(1..=8).contains(&shots) {
                return bad(format!("shot count {shots} outside 1..=8"));
            }
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return bad("strategies listed twice".into());
        }
        self.pooling.validate().or_else(|e| bad(e.to_string()))
    }
}

/// Backends wired according to a [`RunConfig`].
pub struct Backends {
    pub client: BackendClient,
    /// Present when recording or replaying.
    pub cache: Option<Arc<ReplayCache>>,
}

/// Build the backend client for `config`. `offline` stands in for all three
/// HTTP endpoints, e.g. the fixture model.
pub fn connect(config: &RunConfig, offline: Option<Arc<dyn Transport>>) -> Result<Backends, HarnessError> {
    let cache = match (config.replay.mode, &config.replay.dir) {
        (ReplayMode::Off, _) => None,
        (_, None) => return Err(HarnessError::InvalidConfig("replay mode needs a replay directory".into())),
        (_, Some(dir)) => Some(Arc::new(ReplayCache::open(dir).map_err(|source| HarnessError::Io {
            path: dir.clone(),
            source,
        })?)),
    };
    if let (ReplayMode::Replay, Some(cache)) = (config.replay.mode, &cache) {
        let t: Arc<dyn Transport> = Arc::new(ReplayTransport::replay(cache.clone()));
        return Ok(Backends {
            client: BackendClient::uniform(t),
            cache: Some(cache.clone()),
        });
    }
    let roles = match offline {
        Some(t) => RoleTransports::uniform(t),
        None => {
            let e = config.endpoints.clone().or(Endpoints::from_env());
            let http = |url: Option<String>, role: &str| -> Result<Arc<dyn Transport>, HarnessError> {
                let url = url.ok_or_else(|| HarnessError::InvalidConfig(format!("no {role} endpoint configured")))?;
                Ok(Arc::new(HttpTransport::new(url, Duration::from_secs(120))))
            };
            RoleTransports {
                generator: http(e.generator, "generator")?,
                describer: http(e.describer, "describer")?,
                embedder: http(e.embedder, "embedder")?,
            }
        }
    };
    let roles = match &cache {
        Some(c) => roles.map(|t| Arc::new(ReplayTransport::record(c.clone(), t)) as Arc<dyn Transport>),
        None => roles,
    };
    Ok(Backends {
        client: BackendClient::new(roles),
        cache,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum SampleStatus {
    Included,
    Excluded { reason: String },
    Failed { error: String },
}

/// A candidate's referent description, or why it has none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribedCandidate {
    pub beam_rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub selection: Selection,
    /// 1-based rank of the target under the selected candidate's description.
    pub target_rank: usize,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub mention_id: String,
    pub dialogue_id: String,
    pub fold_id: usize,
    pub target_image_id: String,
    pub ground_truth_re: String,
    #[serde(flatten)]
    pub status: SampleStatus,
    /// Images in the reduced visual context, in set order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub visual_context: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub descriptions: Vec<DescribedCandidate>,
    /// Rows of the similarity matrix, one per described candidate.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub similarities: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scored: Vec<ScoredCandidate>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outcomes: BTreeMap<Strategy, StrategyOutcome>,
}

impl SampleRecord {
    fn new(dialogue: &Dialogue, mention: &Mention, fold_id: usize, status: SampleStatus) -> Self {
        SampleRecord {
            mention_id: mention.mention_id.clone(),
            dialogue_id: dialogue.dialogue_id.clone(),
            fold_id,
            target_image_id: mention.target().unwrap_or_default().to_string(),
            ground_truth_re: mention.surface.clone(),
            status,
            visual_context: Vec::new(),
            candidates: Vec::new(),
            descriptions: Vec::new(),
            similarities: Vec::new(),
            scored: Vec::new(),
            outcomes: BTreeMap::new(),
        }
    }

    pub fn is_included(&self) -> bool {
        self.status == SampleStatus::Included
    }
}

/// What [`run_mention`] needs besides the mention itself.
pub struct MentionContext<'a> {
    pub set: &'a ImageSet,
    pub fold_id: usize,
    pub config: &'a RunConfig,
    pub client: &'a BackendClient,
    /// Required for in-context prompting.
    pub support: Option<&'a SupportPool>,
}

enum Step {
    Backend(BackendError),
    Context(ContextError),
}

impl From<BackendError> for Step {
    fn from(e: BackendError) -> Self {
        Step::Backend(e)
    }
}

impl From<ContextError> for Step {
    fn from(e: ContextError) -> Self {
        Step::Context(e)
    }
}

impl std::fmt::Display for Step {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Step::Backend(e) => write!(f, "{e}"),
            Step::Context(e) => write!(f, "{e}"),
        }
    }
}

/// Per-candidate description failures that drop the candidate from scoring
/// instead of failing the sample.
fn candidate_level(e: &BackendError) -> bool {
    matches!(
        e,
        BackendError::EmptyDescription | BackendError::Rejected { .. } | BackendError::Protocol { .. }
    )
}

/// Run the pipeline for one single-image mention.
pub fn run_mention(dialogue: &Dialogue, mention: &Mention, cx: &MentionContext<'_>) -> SampleRecord {
    let mut record = SampleRecord::new(dialogue, mention, cx.fold_id, SampleStatus::Included);
    let Some(target) = mention.target() else {
        record.status = SampleStatus::Excluded {
            reason: "mention has more than one referent".into(),
        };
        return record;
    };
    let visual = match visual_context_at(dialogue, cx.set, mention) {
        Ok(v) => v,
        Err(e) => {
            record.status = SampleStatus::Excluded { reason: e.to_string() };
            return record;
        }
    };
    let Some(target_col) = visual.position(target) else {
        record.status = SampleStatus::Excluded {
            reason: TARGET_NOT_IN_CANDIDATES.into(),
        };
        return record;
    };
    record.visual_context = visual.candidate_image_ids.clone();
    if let Err(e) = pipeline(dialogue, mention, target, target_col, cx, &mut record) {
        record.status = SampleStatus::Failed { error: e.to_string() };
        record.outcomes.clear();
    }
    record
}

fn pipeline(
    dialogue: &Dialogue,
    mention: &Mention,
    target: &str,
    target_col: usize,
    cx: &MentionContext<'_>,
    record: &mut SampleRecord,
) -> Result<(), Step> {
    let window = build_window_sized(dialogue, mention, cx.config.window_size)?;
    let prompt = match cx.config.prompt_mode {
        PromptMode::FineTuned => assemble_generation_prompt(&window, target),
        PromptMode::InContext { shots } => {
            let pool = cx.support.ok_or_else(|| {
                Step::Backend(BackendError::Precondition("in-context prompting without a support pool".into()))
            })?;
            assemble_icl_prompt(shots, pool, &window, target)?
        }
    };
    let candidates = cx.client.generate_candidates(&mention.mention_id, &prompt, cx.config.decoding)?;
    record.candidates = candidates.candidates.clone();

    // descriptions; a candidate whose description fails is not scored
    for c in &candidates.candidates {
        let described = match insert_candidate(&window, &c.text) {
            Err(e) => Err(e.to_string()),
            Ok(segment) => match cx.client.describe_referent(&segment) {
                Ok(d) => Ok(d),
                Err(e) if candidate_level(&e) => Err(e.to_string()),
                Err(e) => return Err(e.into()),
            },
        };
        let (description, error) = match described {
            Ok(d) => (Some(d), None),
            Err(e) => (None, Some(e)),
        };
        record.descriptions.push(DescribedCandidate {
            beam_rank: c.beam_rank,
            description,
            error,
        });
    }

    let described: Vec<(usize, &str)> = record
        .descriptions
        .iter()
        .filter_map(|d| d.description.as_deref().map(|t| (d.beam_rank, t)))
        .collect();
    let gt_description = cx.set.image(target).and_then(|i| i.ground_truth_description.clone());

    // one text-embedding call: GT RE, GT description, candidate REs, descriptions
    let mut texts = vec![mention.surface.clone()];
    texts.extend(gt_description.iter().cloned());
    let cand_offset = texts.len();
    texts.extend(candidates.candidates.iter().map(|c| c.text.clone()));
    let desc_offset = texts.len();
    texts.extend(described.iter().map(|(_, t)| t.to_string()));
    let text_vecs = cx.client.embed_texts(&texts)?;
    let image_vecs = cx.client.embed_images(&record.visual_context)?;

    let desc_vecs = &text_vecs[desc_offset..];
    let ranks: Vec<usize> = described.iter().map(|(r, _)| *r).collect();
    if !described.is_empty() {
        let m = similarity_matrix(desc_vecs, &image_vecs, target_col)
            .map_err(|e| Step::Backend(BackendError::Precondition(e.to_string())))?;
        record.scored = score_matrix(&m, &ranks, &cx.config.pooling)
            .map_err(|e| Step::Backend(BackendError::Precondition(e.to_string())))?;
        record.similarities = m.rows().to_vec();
    }

    let gt_re_vec = &text_vecs[0];
    let gt_desc_vec = gt_description.as_ref().map(|_| &text_vecs[1]);
    for &strategy in &cx.config.strategies {
        let selection = select_candidate(&candidates, &record.scored, strategy);
        let cand_index = candidates
            .candidates
            .iter()
            .position(|c| c.beam_rank == selection.beam_rank)
            .expect("selection comes from the candidate set");
        let row_index = ranks.iter().position(|r| *r == selection.beam_rank);
        let mut metrics = MetricRow::default();
        re_metrics(&mut metrics, &selection.text, &mention.surface, &text_vecs[cand_offset + cand_index], gt_re_vec);
        let target_rank = match row_index {
            Some(i) => {
                let row = &record.similarities[i];
                let outcome = RankingOutcome::from_scores(row, target_col);
                tir_row(&mut metrics, outcome);
                metrics.set(Metric::CosineTi, row[target_col]);
                if let (Some(gt), Some(gt_vec)) = (&gt_description, gt_desc_vec) {
                    description_metrics(&mut metrics, described[i].1, gt, &desc_vecs[i], gt_vec);
                }
                outcome.target_rank
            }
            None => {
                // no description to retrieve with: count as ranked last
                let outcome = RankingOutcome {
                    target_rank: record.visual_context.len(),
                    n_candidates: record.visual_context.len(),
                };
                tir_row(&mut metrics, outcome);
                outcome.target_rank
            }
        };
        record.outcomes.insert(
            strategy,
            StrategyOutcome {
                selection,
                target_rank,
                metrics,
            },
        );
    }
    Ok(())
}

fn tir_row(row: &mut MetricRow, outcome: RankingOutcome) {
    row.set(Metric::Accuracy, outcome.accuracy());
    row.set(Metric::Mrr, outcome.reciprocal_rank());
    row.set(Metric::Ndcg, outcome.ndcg());
}

fn re_metrics(row: &mut MetricRow, re: &str, gt: &str, re_vec: &EmbeddingVector, gt_vec: &EmbeddingVector) {
    let (c, r) = (tokenize(re), tokenize(gt));
    if let Ok(v) = bleu(&c, &r, 1) {
        row.set(Metric::Bleu, v);
    }
    if let Ok(v) = rouge_l(&c, &r) {
        row.set(Metric::RougeL, v);
    }
    if let Ok(v) = cosine(re_vec, gt_vec) {
        row.set(Metric::CosineTt, v);
    }
}

fn description_metrics(row: &mut MetricRow, desc: &str, gt: &str, desc_vec: &EmbeddingVector, gt_vec: &EmbeddingVector) {
    let (c, r) = (tokenize(desc), tokenize(gt));
    if let Ok(v) = bleu(&c, &r, 2) {
        row.set(Metric::DescBleu, v);
    }
    if let Ok(v) = rouge_l(&c, &r) {
        row.set(Metric::DescRougeL, v);
    }
    row.set(Metric::DescJaccard, jaccard(&c, &r));
    if let Ok(v) = cosine(desc_vec, gt_vec) {
        row.set(Metric::DescCosineTt, v);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub total: usize,
    pub included: usize,
    pub excluded: usize,
    pub failed: usize,
    /// Included samples where a scoring strategy fell back to Top-1.
    pub degraded: usize,
}

impl Tallies {
    fn count(samples: &[SampleRecord]) -> Self {
        let mut t = Tallies {
            total: samples.len(),
            ..Tallies::default()
        };
        for s in samples {
            match s.status {
                SampleStatus::Included => t.included += 1,
                SampleStatus::Excluded { .. } => t.excluded += 1,
                SampleStatus::Failed { .. } => t.failed += 1,
            }
            if s.outcomes.values().any(|o| o.selection.degraded) {
                t.degraded += 1;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    #[serde(flatten)]
    pub fold: FoldSpec,
    pub tallies: Tallies,
    pub scores: BTreeMap<Strategy, ScoreReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub config: RunConfig,
    pub tallies: Tallies,
    pub overall: BTreeMap<Strategy, ScoreReport>,
    pub folds: Vec<FoldReport>,
    pub samples: Vec<SampleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

fn strategy_scores(samples: &[&SampleRecord], strategies: &[Strategy]) -> BTreeMap<Strategy, ScoreReport> {
    strategies
        .iter()
        .map(|s| {
            let rows: Vec<MetricRow> = samples.iter().filter_map(|r| r.outcomes.get(s)).map(|o| o.metrics.clone()).collect();
            (*s, aggregate(&rows))
        })
        .collect()
}

/// Evaluate every fold's test dialogues.
pub fn run_experiment(corpus: &Corpus, config: &RunConfig, client: &BackendClient) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    if corpus.image_sets.is_empty() {
        return Err(HarnessError::NoImageSets);
    }
    let violations = validate_corpus(corpus);
    if !violations.is_empty() {
        return Err(HarnessError::InvalidCorpus(violations));
    }
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;

    let mut samples = Vec::new();
    let mut folds = Vec::new();
    for fold in make_folds(corpus) {
        let set = corpus.image_set(&fold.test_set_id).expect("fold set exists");
        let support = match config.prompt_mode {
            PromptMode::InContext { .. } => Some(SupportPool::from_dialogues(
                fold.train_dialogue_ids.iter().filter_map(|id| corpus.dialogue(id)),
                SUPPORT_PER_CATEGORY,
                config.window_size,
            )),
            PromptMode::FineTuned => None,
        };
        let cx = MentionContext {
            set,
            fold_id: fold.fold_id,
            config,
            client,
            support: support.as_ref(),
        };
        let mut work: Vec<(&Dialogue, &Mention)> = fold
            .test_dialogue_ids
            .iter()
            .filter_map(|id| corpus.dialogue(id))
            .flat_map(|d| d.mentions.iter().filter(|m| m.is_single_image()).map(move |m| (d, m)))
            .collect();
        work.sort_by(|a, b| {
            (&a.1.dialogue_id, a.1.message_index, a.1.char_start).cmp(&(&b.1.dialogue_id, b.1.message_index, b.1.char_start))
        });
        let records: Vec<SampleRecord> = pool.install(|| work.par_iter().map(|(d, m)| run_mention(d, m, &cx)).collect());
        for r in &records {
            if let SampleStatus::Failed { error } = &r.status {
                log::warn!("{}: {error}", r.mention_id);
            }
        }
        let refs: Vec<&SampleRecord> = records.iter().collect();
        folds.push(FoldReport {
            tallies: Tallies::count(&records),
            scores: strategy_scores(&refs, &config.strategies),
            fold,
        });
        samples.extend(records);
    }

    let overall = match config.aggregation {
        Aggregation::Macro => config
            .strategies
            .iter()
            .map(|s| {
                let per_fold: Vec<ScoreReport> = folds.iter().filter_map(|f| f.scores.get(s).cloned()).collect();
                (*s, aggregate_folds(&per_fold))
            })
            .collect(),
        Aggregation::Micro => strategy_scores(&samples.iter().collect::<Vec<_>>(), &config.strategies),
    };
    Ok(RunReport {
        version: REPORT_VERSION,
        config: config.clone(),
        tallies: Tallies::count(&samples),
        overall,
        folds,
        samples,
        timing: config.record_timing.then(|| Timing {
            wall_ms: started.elapsed().as_millis() as u64,
        }),
    })
}

/// Report as pretty JSON with a trailing newline.
pub fn report_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn emit_report(report: &RunReport, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    std::fs::write(path, report_json(report)).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_report(path: impl AsRef<Path>) -> Result<RunReport, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn table(out: &mut String, title: &str, columns: &[Metric], rows: &[(Strategy, &ScoreReport)]) {
    if rows.is_empty() {
        return;
    }
    let _ = writeln!(out, "### {title}\n");
    let _ = write!(out, "| Strategy |");
    for c in columns {
        let _ = write!(out, " {} |", c.label());
    }
    let _ = write!(out, "\n|---|");
    for _ in columns {
        let _ = write!(out, "---:|");
    }
    out.push('\n');
    for (s, r) in rows {
        let _ = write!(out, "| {} |", s.label());
        for c in columns {
            let cell = r.get(*c).map(format_score).unwrap_or_else(|| "-".into());
            let _ = write!(out, " {cell} |");
        }
        let _ = writeln!(out);
    }
    out.push('\n');
}

/// Markdown tables, overall then per fold, scores rounded to hundredths.
pub fn render_tables(report: &RunReport) -> String {
    let mut out = String::from("## Results\n\n");
    let t = report.tallies;
    let _ = writeln!(
        out,
        "{} of {} single-image mentions scored; {} excluded, {} failed.\n",
        t.included, t.total, t.excluded, t.failed
    );
    let rows = |scores: &BTreeMap<Strategy, ScoreReport>| -> Vec<(Strategy, ScoreReport)> {
        report.config.strategies.iter().filter_map(|s| scores.get(s).map(|r| (*s, r.clone()))).collect()
    };
    let sections: Vec<(String, Vec<(Strategy, ScoreReport)>)> = std::iter::once(("Overall".to_string(), rows(&report.overall)))
        .chain(report.folds.iter().map(|f| (format!("Fold {} ({})", f.fold.fold_id, f.fold.test_set_id), rows(&f.scores))))
        .collect();
    for (name, rows) in &sections {
        let refs: Vec<(Strategy, &ScoreReport)> = rows.iter().map(|(s, r)| (*s, r)).collect();
        table(&mut out, &format!("{name}: generated REs"), &Metric::RE_TABLE, &refs);
        table(&mut out, &format!("{name}: referent descriptions"), &Metric::DESCRIPTION_TABLE[..4], &refs);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    /// Monte-Carlo accuracy of uniform guessing.
    pub accuracy: f64,
    /// Mean of 1/|visual context| over the same mentions.
    pub analytic: f64,
    pub mentions: usize,
    pub trials: usize,
}

/// Accuracy of guessing uniformly among the reduced visual context, over the
/// single-image mentions the harness would include.
pub fn random_guess_baseline(corpus: &Corpus, trials: usize, seed: u64) -> BaselineResult {
    let trials = trials.max(1);
    let contexts: Vec<(usize, usize)> = corpus
        .mentions()
        .filter_map(|(d, m)| {
            let set = corpus.set_of(d)?;
            let v = visual_context_at(d, set, m).ok()?;
            Some((v.len(), v.position(m.target()?)?))
        })
        .collect();
    if contexts.is_empty() {
        return BaselineResult {
            accuracy: 0.0,
            analytic: 0.0,
            mentions: 0,
            trials,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        for &(k, target) in &contexts {
            if rng.random_range(0..k) == target {
                hits += 1;
            }
        }
    }
    let n = contexts.len();
    BaselineResult {
        accuracy: hits as f64 / (trials * n) as f64,
        analytic: contexts.iter().map(|(k, _)| 1.0 / *k as f64).sum::<f64>() / n as f64,
        mentions: n,
        trials,
    }
}
