//! Human text-image retrieval study.
//!
//! A participant is assigned one dialogue and one RE source (greedy output,
//! reranked output or the human ground truth). They read the dialogue as it
//! unfolds, up to and including the RE of each mention, and click the image
//! they think it refers to in a grid of the images still unranked at that
//! point. Grid order is shuffled per question from the session seed, and an
//! attention check follows every 25 task questions.
//!
//! All state changes go through an append-only JSONL event log. Opening a
//! [`Service`] on an existing log replays it, so a crashed survey resumes
//! where it left off.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::visual_context_at;
use crate::corpus::{char_slice, Corpus, Dialogue, Mention};
use crate::harness::RunReport;
use crate::rerank::Strategy;

/// Task questions between consecutive attention checks.
pub const CHECK_EVERY: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReSource {
    Greedy,
    Rerank,
    GroundTruth,
}

impl ReSource {
    pub const ALL: [ReSource; 3] = [ReSource::Greedy, ReSource::Rerank, ReSource::GroundTruth];

    pub fn label(self) -> &'static str {
        match self {
            ReSource::Greedy => "Greedy",
            ReSource::Rerank => "Rerank",
            ReSource::GroundTruth => "Ground truth",
        }
    }
}

impl std::str::FromStr for ReSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(ReSource::Greedy),
            "rerank" => Ok(ReSource::Rerank),
            "ground_truth" => Ok(ReSource::GroundTruth),
            _ => Err(format!("unknown RE source {s:?}")),
        }
    }
}

/// Corpus-supplied item with a known answer, shown in the same layout as a
/// task question. One JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCheck {
    pub check_id: String,
    /// Text shown in place of the dialogue, e.g. an instruction to click a
    /// particular image.
    pub text: String,
    pub image_ids: Vec<String>,
    pub answer: String,
}

pub fn load_attention_checks(path: impl AsRef<Path>) -> std::io::Result<Vec<AttentionCheck>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

/// Everything the service needs to build questions.
#[derive(Debug, Clone, Default)]
pub struct Study {
    pub corpus: Corpus,
    /// RE text per mention id, per source.
    pub res: BTreeMap<ReSource, BTreeMap<String, String>>,
    pub attention_checks: Vec<AttentionCheck>,
}

impl Study {
    pub fn new(corpus: Corpus) -> Self {
        let mut study = Study {
            corpus,
            ..Study::default()
        };
        let gt = study
            .corpus
            .mentions()
            .filter(|(_, m)| m.is_single_image())
            .map(|(_, m)| (m.mention_id.clone(), m.surface.clone()))
            .collect();
        study.res.insert(ReSource::GroundTruth, gt);
        study
    }

    /// Use the selections of `strategy` in `report` as the REs of `source`.
    pub fn with_report(mut self, source: ReSource, report: &RunReport, strategy: Strategy) -> Self {
        let res = report
            .samples
            .iter()
            .filter_map(|s| Some((s.mention_id.clone(), s.outcomes.get(&strategy)?.selection.text.clone())))
            .collect();
        self.res.insert(source, res);
        self
    }

    pub fn with_attention_checks(mut self, checks: Vec<AttentionCheck>) -> Self {
        self.attention_checks = checks;
        self
    }

    fn image_uri(&self, image_id: &str) -> String {
        self.corpus.image(image_id).map(|i| i.uri.clone()).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant_id: String,
    pub dialogue_id: String,
    pub re_source: ReSource,
    pub seed: u64,
    /// Index of the next unanswered question.
    pub cursor: usize,
    pub consent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridImage {
    pub image_id: String,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub session_id: String,
    pub question_index: usize,
    pub total_questions: usize,
    pub task_description: String,
    /// Dialogue so far, one `A: `/`B: ` line per message, ending with the RE.
    pub dialogue: String,
    /// Char offsets of the RE within `dialogue`; absent for attention checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub re_span: Option<(usize, usize)>,
    pub grid: Vec<GridImage>,
    pub is_attention_check: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Next {
    Question(QuestionItem),
    Done { session_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub session_id: String,
    pub question_index: usize,
    pub choice: String,
    pub correct: bool,
    pub is_attention_check: bool,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub accuracy: f64,
    /// Task questions answered.
    pub n: usize,
    pub attention_checks: usize,
    pub attention_pass: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HumanEvalError {
    #[error("participant {participant_id} already has a session on image set {set_id}")]
    EligibilityViolation { participant_id: String, set_id: String },
    #[error("unknown dialogue {0}")]
    UnknownDialogue(String),
    #[error("no REs loaded for source {0:?}")]
    NoMaterial(ReSource),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("consent has not been given")]
    ConsentRequired,
    #[error("session is complete")]
    SessionComplete,
    #[error("question {0} was already answered")]
    DuplicateAnswer(usize),
    #[error("{choice} is not in the grid of question {question_index}")]
    InvalidChoice { question_index: usize, choice: String },
    #[error("expected an answer to question {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("session has {answered} of {total} answers")]
    IncompleteSession { answered: usize, total: usize },
    #[error("event log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Task(usize),
    Check(usize),
}

/// Task mentions of `dialogue` for `source`, in reading order: single-image
/// mentions that have an RE and whose target is still unranked.
fn task_mentions<'a>(study: &'a Study, dialogue: &'a Dialogue, source: ReSource) -> Vec<&'a Mention> {
    let Some(res) = study.res.get(&source) else { return Vec::new() };
    let Some(set) = study.corpus.set_of(dialogue) else { return Vec::new() };
    let mut ms: Vec<&Mention> = dialogue
        .mentions
        .iter()
        .filter(|m| res.contains_key(&m.mention_id))
        .filter(|m| {
            m.target()
                .is_some_and(|t| visual_context_at(dialogue, set, m).is_ok_and(|v| v.contains(t)))
        })
        .collect();
    ms.sort_by_key(|m| (m.message_index, m.char_start));
    ms
}

/// Task questions interleaved with a check after every [`CHECK_EVERY`].
fn stream(n_tasks: usize, n_checks: usize, seed: u64) -> Vec<Entry> {
    let mut out = Vec::with_capacity(n_tasks + n_tasks / CHECK_EVERY);
    for i in 0..n_tasks {
        out.push(Entry::Task(i));
        let k = (i + 1) / CHECK_EVERY;
        if n_checks > 0 && (i + 1) % CHECK_EVERY == 0 {
            out.push(Entry::Check((seed as usize).wrapping_add(k - 1) % n_checks));
        }
    }
    out
}

/// Grid order for question `question_index`: the session seed picks the
/// generator, the question index picks the stream.
pub fn grid_permutation<T: Clone>(items: &[T], seed: u64, question_index: usize) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(question_index as u64);
    let mut out = items.to_vec();
    out.shuffle(&mut rng);
    out
}

struct Plan {
    entries: Vec<Entry>,
    mentions: Vec<Mention>,
}

fn plan(study: &Study, session: &Session) -> Plan {
    let dialogue = study.corpus.dialogue(&session.dialogue_id).expect("session dialogue exists");
    let mentions: Vec<Mention> = task_mentions(study, dialogue, session.re_source).into_iter().cloned().collect();
    Plan {
        entries: stream(mentions.len(), study.attention_checks.len(), session.seed),
        mentions,
    }
}

/// Dialogue text up to the end of the RE: full history, then the current
/// message cut at the mention with the source's RE in its place.
fn unfolded(dialogue: &Dialogue, mention: &Mention, re: &str) -> (String, (usize, usize)) {
    let mut text = String::new();
    for m in &dialogue.messages[..mention.message_index] {
        text.push_str(m.speaker.prefix());
        text.push_str(&m.text);
        text.push('\n');
    }
    let current = &dialogue.messages[mention.message_index];
    text.push_str(current.speaker.prefix());
    text.push_str(char_slice(&current.text, 0, mention.char_start).unwrap_or_default());
    let start = text.chars().count();
    text.push_str(re);
    (text, (start, start + re.chars().count()))
}

fn question(study: &Study, session: &Session, plan: &Plan, index: usize) -> QuestionItem {
    let dialogue = study.corpus.dialogue(&session.dialogue_id).expect("session dialogue exists");
    let grid = |ids: &[String]| {
        grid_permutation(ids, session.seed, index)
            .into_iter()
            .map(|id| GridImage {
                uri: study.image_uri(&id),
                image_id: id,
            })
            .collect()
    };
    let (text, re_span, grid, is_check) = match plan.entries[index] {
        Entry::Task(i) => {
            let m = &plan.mentions[i];
            let re = &study.res[&session.re_source][&m.mention_id];
            let set = study.corpus.set_of(dialogue).expect("dialogue set exists");
            let visual = visual_context_at(dialogue, set, m).expect("checked when planning");
            let (text, span) = unfolded(dialogue, m, re);
            (text, Some(span), grid(&visual.candidate_image_ids), false)
        }
        Entry::Check(c) => {
            let check = &study.attention_checks[c];
            (check.text.clone(), None, grid(&check.image_ids), true)
        }
    };
    QuestionItem {
        session_id: session.session_id.clone(),
        question_index: index,
        total_questions: plan.entries.len(),
        task_description: dialogue.task_description.clone(),
        dialogue: text,
        re_span,
        grid,
        is_attention_check: is_check,
    }
}

fn answer_of(study: &Study, plan: &Plan, index: usize) -> String {
    match plan.entries[index] {
        Entry::Task(i) => plan.mentions[i].target().unwrap_or_default().to_string(),
        Entry::Check(c) => study.attention_checks[c].answer.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Created(Session),
    Consented { session_id: String },
    Answered(ResponseRecord),
}

struct SessionState {
    session: Session,
    plan: Plan,
    served: Option<usize>,
    responses: Vec<ResponseRecord>,
}

/// Session store with an optional backing event log.
pub struct Service {
    study: Arc<Study>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    log: Mutex<Option<BufWriter<File>>>,
    /// Serializes session creation so the eligibility check and insert are
    /// atomic.
    creating: Mutex<()>,
    clock: fn() -> u64,
}

fn system_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Service {
    pub fn in_memory(study: Study) -> Self {
        Service {
            study: Arc::new(study),
            sessions: RwLock::new(HashMap::new()),
            log: Mutex::new(None),
            creating: Mutex::new(()),
            clock: system_ms,
        }
    }

    /// Open the log at `path`, replaying any events already in it.
    pub fn open(study: Study, path: impl AsRef<Path>) -> Result<Self, HumanEvalError> {
        let path: PathBuf = path.as_ref().to_path_buf();
        let io = |e: std::io::Error| HumanEvalError::Log(format!("{}: {e}", path.display()));
        let svc = Service::in_memory(study);
        if path.exists() {
            let reader = BufReader::new(File::open(&path).map_err(io)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: Event = serde_json::from_str(&line)
                    .map_err(|e| HumanEvalError::Log(format!("{}:{}: {e}", path.display(), n + 1)))?;
                svc.apply(event);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        *svc.log.lock().unwrap() = Some(BufWriter::new(file));
        Ok(svc)
    }

    /// Replace the timestamp source, e.g. with a fixed clock in tests.
    pub fn with_clock(mut self, clock: fn() -> u64) -> Self {
        self.clock = clock;
        self
    }

    pub fn study(&self) -> &Study {
        &self.study
    }

    fn apply(&self, event: Event) {
        match event {
            Event::Created(session) => {
                let plan = plan(&self.study, &session);
                let state = SessionState {
                    session,
                    plan,
                    served: None,
                    responses: Vec::new(),
                };
                let id = state.session.session_id.clone();
                self.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(state)));
            }
            Event::Consented { session_id } => {
                if let Some(s) = self.state(&session_id) {
                    s.lock().unwrap().session.consent = true;
                }
            }
            Event::Answered(r) => {
                if let Some(s) = self.state(&r.session_id) {
                    let mut s = s.lock().unwrap();
                    // a repeated line in the log is ignored
                    if r.question_index == s.session.cursor {
                        s.session.cursor += 1;
                        s.responses.push(r);
                    }
                }
            }
        }
    }

    fn persist(&self, event: &Event) -> Result<(), HumanEvalError> {
        let mut log = self.log.lock().unwrap();
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(event).map_err(|e| HumanEvalError::Log(e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| HumanEvalError::Log(e.to_string()))?;
        }
        Ok(())
    }

    fn state(&self, session_id: &str) -> Option<Arc<Mutex<SessionState>>> {
        self.sessions.read().unwrap().get(session_id).cloned()
    }

    fn require(&self, session_id: &str) -> Result<Arc<Mutex<SessionState>>, HumanEvalError> {
        self.state(session_id).ok_or_else(|| HumanEvalError::UnknownSession(session_id.to_string()))
    }

    pub fn create_session(
        &self,
        participant_id: &str,
        dialogue_id: &str,
        re_source: ReSource,
        seed: u64,
    ) -> Result<Session, HumanEvalError> {
        let dialogue = self
            .study
            .corpus
            .dialogue(dialogue_id)
            .ok_or_else(|| HumanEvalError::UnknownDialogue(dialogue_id.to_string()))?;
        if !self.study.res.contains_key(&re_source) {
            return Err(HumanEvalError::NoMaterial(re_source));
        }
        let _guard = self.creating.lock().unwrap();
        let taken = self.sessions.read().unwrap().values().any(|s| {
            let s = s.lock().unwrap();
            s.session.participant_id == participant_id
                && self.study.corpus.dialogue(&s.session.dialogue_id).map(|d| &d.set_id) == Some(&dialogue.set_id)
        });
        if taken {
            return Err(HumanEvalError::EligibilityViolation {
                participant_id: participant_id.to_string(),
                set_id: dialogue.set_id.clone(),
            });
        }
        let session = Session {
            session_id: format!("session-{:05}", self.sessions.read().unwrap().len() + 1),
            participant_id: participant_id.to_string(),
            dialogue_id: dialogue_id.to_string(),
            re_source,
            seed,
            cursor: 0,
            consent: false,
        };
        let event = Event::Created(session.clone());
        self.persist(&event)?;
        self.apply(event);
        Ok(session)
    }

    pub fn give_consent(&self, session_id: &str) -> Result<Session, HumanEvalError> {
        let state = self.require(session_id)?;
        let mut s = state.lock().unwrap();
        if !s.session.consent {
            self.persist(&Event::Consented {
                session_id: session_id.to_string(),
            })?;
            s.session.consent = true;
        }
        Ok(s.session.clone())
    }

    pub fn session(&self, session_id: &str) -> Result<Session, HumanEvalError> {
        Ok(self.require(session_id)?.lock().unwrap().session.clone())
    }

    /// The question at the cursor. Asking again before answering returns the
    /// same item.
    pub fn next_question(&self, session_id: &str) -> Result<Next, HumanEvalError> {
        let state = self.require(session_id)?;
        let mut s = state.lock().unwrap();
        if !s.session.consent {
            return Err(HumanEvalError::ConsentRequired);
        }
        let cursor = s.session.cursor;
        if cursor >= s.plan.entries.len() {
            return Ok(Next::Done {
                session_id: session_id.to_string(),
            });
        }
        s.served = Some(cursor);
        Ok(Next::Question(question(&self.study, &s.session, &s.plan, cursor)))
    }

    /// Every question of `session` in order, without touching its state.
    pub fn question_stream(&self, session: &Session) -> Vec<QuestionItem> {
        let plan = plan(&self.study, session);
        (0..plan.entries.len()).map(|i| question(&self.study, session, &plan, i)).collect()
    }

    pub fn submit_answer(&self, session_id: &str, question_index: usize, choice: &str) -> Result<ResponseRecord, HumanEvalError> {
        let state = self.require(session_id)?;
        let mut s = state.lock().unwrap();
        if !s.session.consent {
            return Err(HumanEvalError::ConsentRequired);
        }
        let cursor = s.session.cursor;
        if question_index < cursor {
            return Err(HumanEvalError::DuplicateAnswer(question_index));
        }
        if cursor >= s.plan.entries.len() {
            return Err(HumanEvalError::SessionComplete);
        }
        if question_index > cursor || s.served != Some(cursor) {
            return Err(HumanEvalError::OutOfOrder {
                expected: cursor,
                got: question_index,
            });
        }
        let item = question(&self.study, &s.session, &s.plan, cursor);
        if !item.grid.iter().any(|g| g.image_id == choice) {
            return Err(HumanEvalError::InvalidChoice {
                question_index,
                choice: choice.to_string(),
            });
        }
        let record = ResponseRecord {
            session_id: session_id.to_string(),
            question_index,
            correct: answer_of(&self.study, &s.plan, cursor) == choice,
            choice: choice.to_string(),
            is_attention_check: item.is_attention_check,
            timestamp_ms: (self.clock)(),
        };
        self.persist(&Event::Answered(record.clone()))?;
        s.session.cursor += 1;
        s.responses.push(record.clone());
        Ok(record)
    }

    pub fn responses(&self, session_id: &str) -> Result<Vec<ResponseRecord>, HumanEvalError> {
        Ok(self.require(session_id)?.lock().unwrap().responses.clone())
    }

    pub fn session_score(&self, session_id: &str) -> Result<SessionScore, HumanEvalError> {
        let state = self.require(session_id)?;
        let s = state.lock().unwrap();
        let total = s.plan.entries.len();
        if s.responses.len() < total {
            return Err(HumanEvalError::IncompleteSession {
                answered: s.responses.len(),
                total,
            });
        }
        Ok(score_responses(&s.responses))
    }

    /// Completed sessions with their source and score.
    pub fn completed(&self) -> Vec<(Session, SessionScore)> {
        let mut out: Vec<(Session, SessionScore)> = self
            .sessions
            .read()
            .unwrap()
            .values()
            .filter_map(|s| {
                let s = s.lock().unwrap();
                (s.responses.len() == s.plan.entries.len()).then(|| (s.session.clone(), score_responses(&s.responses)))
            })
            .collect();
        out.sort_by(|a, b| a.0.session_id.cmp(&b.0.session_id));
        out
    }
}

pub fn score_responses(responses: &[ResponseRecord]) -> SessionScore {
    let (tasks, checks): (Vec<&ResponseRecord>, Vec<&ResponseRecord>) =
        responses.iter().partition(|r| !r.is_attention_check);
    let n = tasks.len();
    SessionScore {
        accuracy: if n == 0 { 0.0 } else { tasks.iter().filter(|r| r.correct).count() as f64 / n as f64 },
        n,
        attention_checks: checks.len(),
        attention_pass: checks.iter().all(|r| r.correct),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub sessions: usize,
    /// Mean of per-session accuracies.
    pub accuracy: f64,
}

/// One row per source, averaging session accuracies. Sessions that failed an
/// attention check are dropped when `require_attention` is set.
pub fn summarize(sessions: &[(Session, SessionScore)], require_attention: bool) -> BTreeMap<ReSource, SourceSummary> {
    let mut acc: BTreeMap<ReSource, Vec<f64>> = BTreeMap::new();
    for (session, score) in sessions {
        if require_attention && !score.attention_pass {
            continue;
        }
        acc.entry(session.re_source).or_default().push(score.accuracy);
    }
    acc.into_iter()
        .map(|(src, v)| {
            (
                src,
                SourceSummary {
                    sessions: v.len(),
                    accuracy: v.iter().sum::<f64>() / v.len() as f64,
                },
            )
        })
        .collect()
}

/// Markdown table with one accuracy row per source.
pub fn render_summary(summary: &BTreeMap<ReSource, SourceSummary>) -> String {
    let mut out = String::from("| Source | Sessions | Accuracy |\n|---|---:|---:|\n");
    for (src, s) in summary {
        out.push_str(&format!(
            "| {} | {} | {} |\n",
            src.label(),
            s.sessions,
            crate::metrics::format_score(s.accuracy)
        ));
    }
    out
}
