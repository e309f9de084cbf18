//! Linguistic and visual context at the point a referring expression is due.
//!
//! The linguistic context is a bounded window of preceding messages plus the
//! current message up to the start of the mention. The visual context is the
//! set of images not yet ranked in the current round. Both feed the prompt
//! formats used by the generator and the description model.

use serde::{Deserialize, Serialize};

use crate::corpus::{char_slice, Dialogue, ImageSet, Mention, Message, Speaker};

/// Default number of preceding messages kept in a window.
pub const DEFAULT_WINDOW: usize = 7;

/// Opens a referring expression in generation and insertion prompts.
pub const RE_START: &str = ">>";
/// Closes a referring expression in insertion prompts.
pub const RE_END: &str = "<<";
/// Prefix of the task description line.
pub const TASK_PREFIX: &str = "M: ";
/// Placeholder an image slot renders to in plain-text views of a prompt.
pub const IMAGE_TOKEN: &str = "<referent_image>";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ContextError {
    #[error("mention `{0}` does not belong to dialogue `{1}`")]
    ForeignMention(String, String),
    #[error("every image is already ranked at mention `{0}`")]
    EmptyVisualContext(String),
    #[error("candidate RE is empty")]
    EmptyCandidate,
    #[error("candidate RE {0:?} contains a marker string")]
    MarkerInCandidate(String),
    #[error("shot count {0} outside 1..=8")]
    InvalidShots(usize),
    #[error("support pool has no example #{index} of category {category:?}")]
    InsufficientSupport { category: ReCategory, index: usize },
}

/// The text a model sees before a mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub task_description: String,
    /// Up to `window` messages immediately preceding the mention's message.
    pub prior_messages: Vec<Message>,
    pub current_speaker: Speaker,
    /// Current message text up to the mention's `char_start`.
    pub current_prefix: String,
}

impl ContextWindow {
    /// Task line, prior messages and current prefix joined by newlines.
    pub fn render(&self) -> String {
        let mut lines = Vec::with_capacity(self.prior_messages.len() + 2);
        lines.push(format!("{TASK_PREFIX}{}", self.task_description));
        for m in &self.prior_messages {
            lines.push(format!("{}{}", m.speaker.prefix(), m.text));
        }
        lines.push(format!("{}{}", self.current_speaker.prefix(), self.current_prefix));
        lines.join("\n")
    }
}

fn check_owner(dialogue: &Dialogue, mention: &Mention) -> Result<(), ContextError> {
    if mention.dialogue_id != dialogue.dialogue_id || dialogue.message(mention.message_index).is_none() {
        return Err(ContextError::ForeignMention(
            mention.mention_id.clone(),
            dialogue.dialogue_id.clone(),
        ));
    }
    Ok(())
}

/// Window with the default seven prior messages.
pub fn build_window(dialogue: &Dialogue, mention: &Mention) -> Result<ContextWindow, ContextError> {
    build_window_sized(dialogue, mention, DEFAULT_WINDOW)
}

/// Window with at most `size` prior messages. The current message is not
/// counted against `size`.
pub fn build_window_sized(dialogue: &Dialogue, mention: &Mention, size: usize) -> Result<ContextWindow, ContextError> {
    check_owner(dialogue, mention)?;
    let idx = mention.message_index;
    let current = &dialogue.messages[idx];
    let first = idx.saturating_sub(size);
    Ok(ContextWindow {
        task_description: dialogue.task_description.clone(),
        prior_messages: dialogue.messages[first..idx].to_vec(),
        current_speaker: current.speaker,
        current_prefix: char_slice(&current.text, 0, mention.char_start)
            .unwrap_or(&current.text)
            .to_string(),
    })
}

/// Images still unranked when a mention is produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualContextState {
    /// In image-set order.
    pub candidate_image_ids: Vec<String>,
}

impl VisualContextState {
    pub fn contains(&self, image_id: &str) -> bool {
        self.candidate_image_ids.iter().any(|i| i == image_id)
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.candidate_image_ids.iter().position(|i| i == image_id)
    }

    pub fn len(&self) -> usize {
        self.candidate_image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_image_ids.is_empty()
    }
}

/// Images of `set` not ranked in the mention's round strictly before the
/// mention's message. A ranking event on the mention's own message does not
/// count yet.
pub fn visual_context_at(dialogue: &Dialogue, set: &ImageSet, mention: &Mention) -> Result<VisualContextState, ContextError> {
    check_owner(dialogue, mention)?;
    let round = dialogue.messages[mention.message_index].round;
    let ranked: Vec<&str> = dialogue
        .ranking_events
        .iter()
        .filter(|ev| ev.message_index < mention.message_index)
        .filter(|ev| dialogue.message(ev.message_index).is_some_and(|m| m.round == round))
        .map(|ev| ev.image_id.as_str())
        .collect();
    let candidate_image_ids: Vec<String> = set
        .image_ids()
        .filter(|id| !ranked.contains(id))
        .map(str::to_string)
        .collect();
    if candidate_image_ids.is_empty() {
        return Err(ContextError::EmptyVisualContext(mention.mention_id.clone()));
    }
    Ok(VisualContextState { candidate_image_ids })
}

/// One piece of an interleaved text/image prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "WireSegment", try_from = "WireSegment")]
pub enum Segment {
    Text(String),
    ImageSlot(String),
    ReStart,
    ReEnd,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WireSegment {
    Text(String),
    Image { image: String },
    Marker { marker: String },
}

impl From<Segment> for WireSegment {
    fn from(s: Segment) -> Self {
        match s {
            Segment::Text(t) => WireSegment::Text(t),
            Segment::ImageSlot(id) => WireSegment::Image { image: id },
            Segment::ReStart => WireSegment::Marker { marker: "re_start".into() },
            Segment::ReEnd => WireSegment::Marker { marker: "re_end".into() },
        }
    }
}

impl TryFrom<WireSegment> for Segment {
    type Error = String;

    fn try_from(w: WireSegment) -> Result<Self, String> {
        Ok(match w {
            WireSegment::Text(t) => Segment::Text(t),
            WireSegment::Image { image } => Segment::ImageSlot(image),
            WireSegment::Marker { marker } => match marker.as_str() {
                "re_start" => Segment::ReStart,
                "re_end" => Segment::ReEnd,
                other => return Err(format!("unknown marker {other:?}")),
            },
        })
    }
}

/// An interleaved text/image prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSequence {
    pub segments: Vec<Segment>,
}

impl PromptSequence {
    /// Plain-text view with image slots shown as [`IMAGE_TOKEN`].
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_str(t),
                Segment::ImageSlot(_) => out.push_str(IMAGE_TOKEN),
                Segment::ReStart => {
                    out.push(' ');
                    out.push_str(RE_START);
                    out.push(' ');
                }
                Segment::ReEnd => {
                    out.push(' ');
                    out.push_str(RE_END);
                }
            }
        }
        out
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::ImageSlot(id) => Some(id.as_str()),
            _ => None,
        })
    }

    /// The image slot that directly precedes the RE start marker.
    pub fn referent_image(&self) -> Option<&str> {
        self.segments.windows(2).find_map(|w| match w {
            [Segment::ImageSlot(id), Segment::ReStart] => Some(id.as_str()),
            _ => None,
        })
    }
}

/// `[context] + [referent image] + [RE start]`: the fine-tuned generator's
/// input layout.
pub fn assemble_generation_prompt(window: &ContextWindow, referent_image_id: &str) -> PromptSequence {
    PromptSequence {
        segments: vec![
            Segment::Text(window.render()),
            Segment::ImageSlot(referent_image_id.to_string()),
            Segment::ReStart,
        ],
    }
}

fn check_candidate(candidate: &str) -> Result<(), ContextError> {
    if candidate.trim().is_empty() {
        return Err(ContextError::EmptyCandidate);
    }
    if candidate.contains(RE_START) || candidate.contains(RE_END) {
        return Err(ContextError::MarkerInCandidate(candidate.to_string()));
    }
    Ok(())
}

/// Splice a candidate RE into the window at the generation point, wrapped in
/// the RE markers. Text after the mention is not included.
pub fn insert_candidate(window: &ContextWindow, candidate: &str) -> Result<String, ContextError> {
    check_candidate(candidate)?;
    Ok(format!("{}{RE_START} {candidate} {RE_END}", window.render()))
}

/// The text between the only marker pair of `segment`, or `None` unless there
/// is exactly one balanced pair.
pub fn extract_marked(segment: &str) -> Option<&str> {
    if segment.matches(RE_START).count() != 1 || segment.matches(RE_END).count() != 1 {
        return None;
    }
    let start = segment.find(RE_START)? + RE_START.len();
    let end = segment.find(RE_END)?;
    if end < start {
        return None;
    }
    let inner = &segment[start..end];
    let inner = inner.strip_prefix(' ').unwrap_or(inner);
    Some(inner.strip_suffix(' ').unwrap_or(inner))
}

/// Surface form class of an RE, in support-example priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReCategory {
    DefiniteDescription,
    Pronoun,
    ProformWithContent,
    NoContentProform,
}

impl ReCategory {
    pub const PRIORITY: [ReCategory; 4] = [
        ReCategory::DefiniteDescription,
        ReCategory::Pronoun,
        ReCategory::ProformWithContent,
        ReCategory::NoContentProform,
    ];

    /// Heuristic surface classification, used to build support pools from
    /// annotated mentions.
    pub fn classify(surface: &str) -> ReCategory {
        const PRONOUNS: &[&str] = &[
            "it", "its", "it's", "this", "that", "these", "those", "they", "them", "he", "him", "she", "her",
        ];
        const FUNCTION: &[&str] = &[
            "the", "a", "an", "this", "that", "these", "those", "one", "ones", "other", "another", "which", "what",
            "some", "any", "same",
        ];
        let tokens: Vec<String> = surface
            .split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        if tokens.len() == 1 && PRONOUNS.contains(&tokens[0].as_str()) {
            return ReCategory::Pronoun;
        }
        if tokens.iter().any(|t| t == "one" || t == "ones") {
            let has_content = tokens.iter().any(|t| !FUNCTION.contains(&t.as_str()));
            return if has_content {
                ReCategory::ProformWithContent
            } else {
                ReCategory::NoContentProform
            };
        }
        ReCategory::DefiniteDescription
    }
}

/// A support example for in-context generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub category: ReCategory,
    pub segment: ContextWindow,
    pub referent_image_id: String,
    pub re: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportPool {
    pub examples: Vec<IclExample>,
}

impl SupportPool {
    /// Pick `n` examples: categories in priority order, wrapping around for
    /// `n > 4`, taking the k-th example of a category on its k-th use.
    pub fn select(&self, n: usize) -> Result<Vec<&IclExample>, ContextError> {
        if !(1..=8).contains(&n) {
            return Err(ContextError::InvalidShots(n));
        }
        (0..n)
            .map(|i| {
                let category = ReCategory::PRIORITY[i % 4];
                let index = i / 4;
                self.examples
                    .iter()
                    .filter(|e| e.category == category)
                    .nth(index)
                    .ok_or(ContextError::InsufficientSupport { category, index })
            })
            .collect()
    }

    /// Build a pool from single-image mentions of `dialogues`, keeping at most
    /// `per_category` examples of each category in dialogue order.
    pub fn from_dialogues<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>, per_category: usize, window: usize) -> Self {
        let mut examples = Vec::new();
        let mut counts = [0usize; 4];
        for d in dialogues {
            let mut mentions: Vec<&Mention> = d.mentions.iter().filter(|m| m.is_single_image()).collect();
            mentions.sort_by_key(|m| (m.message_index, m.char_start));
            for m in mentions {
                let category = ReCategory::classify(&m.surface);
                let slot = &mut counts[category as usize];
                if *slot >= per_category {
                    continue;
                }
                let Ok(segment) = build_window_sized(d, m, window) else { continue };
                *slot += 1;
                examples.push(IclExample {
                    category,
                    segment,
                    referent_image_id: m.referent_image_ids[0].clone(),
                    re: m.surface.clone(),
                });
            }
        }
        SupportPool { examples }
    }
}

/// `n` User/Assistant support examples followed by the query as a User turn.
pub fn assemble_icl_prompt(
    n: usize,
    pool: &SupportPool,
    window: &ContextWindow,
    referent_image_id: &str,
) -> Result<PromptSequence, ContextError> {
    let mut segments = Vec::with_capacity(3 * (n + 1));
    for ex in pool.select(n)? {
        segments.push(Segment::Text(format!("User: {}", ex.segment.render())));
        segments.push(Segment::ImageSlot(ex.referent_image_id.clone()));
        segments.push(Segment::Text(format!("\nAssistant: {}\n", ex.re)));
    }
    segments.push(Segment::Text(format!("User: {}", window.render())));
    segments.push(Segment::ImageSlot(referent_image_id.to_string()));
    segments.push(Segment::Text("\nAssistant:".to_string()));
    Ok(PromptSequence { segments })
}
