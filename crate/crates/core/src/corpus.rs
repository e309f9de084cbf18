//! Annotated visually grounded dialogues.
//!
//! A corpus is a list of nine-image sets plus the dialogues played over them.
//! Each dialogue carries its messages, the character-span mentions annotated on
//! those messages, and the explicit ranking events that shrink the visual
//! context during a round.
//!
//! On disk a corpus is line-delimited JSON, one record per image set or
//! dialogue. See `book/src/corpus-format.md` for the schema.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Number of images in every image set.
pub const IMAGES_PER_SET: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub set_id: String,
    pub uri: String,
    /// Manually constructed referent description used as the reference label
    /// when scoring generated descriptions.
    pub ground_truth_description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSet {
    pub set_id: String,
    pub category: String,
    pub images: Vec<ImageRef>,
}

impl ImageSet {
    pub fn image(&self, image_id: &str) -> Option<&ImageRef> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &str> {
        self.images.iter().map(|i| i.image_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    /// The prefix used when a message is rendered into a prompt, e.g. `"A: "`.
    pub fn prefix(self) -> &'static str {
        match self {
            Speaker::A => "A: ",
            Speaker::B => "B: ",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Speaker::A => f.write_str("A"),
            Speaker::B => f.write_str("B"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    /// 1-based game round.
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub mention_id: String,
    pub dialogue_id: String,
    pub message_index: usize,
    /// Inclusive offset in Unicode scalar values.
    pub char_start: usize,
    /// Exclusive offset in Unicode scalar values.
    pub char_end: usize,
    pub referent_image_ids: Vec<String>,
    pub surface: String,
}

impl Mention {
    pub fn is_single_image(&self) -> bool {
        self.referent_image_ids.len() == 1
    }

    /// The referent of a single-image mention.
    pub fn target(&self) -> Option<&str> {
        match self.referent_image_ids.as_slice() {
            [only] => Some(only.as_str()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingEvent {
    pub message_index: usize,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub set_id: String,
    pub task_description: String,
    pub messages: Vec<Message>,
    pub mentions: Vec<Mention>,
    pub ranking_events: Vec<RankingEvent>,
}

impl Dialogue {
    pub fn message(&self, index: usize) -> Option<&Message> {
        self.messages.get(index).filter(|m| m.index == index)
    }

    pub fn mention(&self, mention_id: &str) -> Option<&Mention> {
        self.mentions.iter().find(|m| m.mention_id == mention_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub image_sets: Vec<ImageSet>,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn image_set(&self, set_id: &str) -> Option<&ImageSet> {
        self.image_sets.iter().find(|s| s.set_id == set_id)
    }

    pub fn dialogue(&self, dialogue_id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.dialogue_id == dialogue_id)
    }

    /// Image set a dialogue is played over.
    pub fn set_of(&self, dialogue: &Dialogue) -> Option<&ImageSet> {
        self.image_set(&dialogue.set_id)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRef> {
        self.image_sets.iter().find_map(|s| s.image(image_id))
    }

    /// Every mention in the corpus, with its dialogue.
    pub fn mentions(&self) -> impl Iterator<Item = (&Dialogue, &Mention)> {
        self.dialogues
            .iter()
            .flat_map(|d| d.mentions.iter().map(move |m| (d, m)))
    }

    /// Parse a corpus from line-delimited records, then validate it.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        let mut set_lines = BTreeMap::new();
        let mut dialogue_lines = BTreeMap::new();

        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(CorpusError::Io)?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            match record {
                Record::ImageSet(r) => {
                    set_lines.insert(r.set_id.clone(), line_no);
                    corpus.image_sets.push(r.into_image_set());
                }
                Record::Dialogue(r) => {
                    dialogue_lines.insert(r.dialogue_id.clone(), line_no);
                    let dialogue = r.into_dialogue().map_err(|message| CorpusError::Malformed {
                        line: line_no,
                        message,
                    })?;
                    corpus.dialogues.push(dialogue);
                }
            }
        }

        if let Some(v) = validate_corpus(&corpus).into_iter().next() {
            let line = match v.entity {
                "ImageSet" | "ImageRef" => set_lines.get(v.owner()).copied(),
                _ => dialogue_lines.get(v.owner()).copied(),
            };
            return Err(match v.rule {
                Rule::DuplicateId => CorpusError::DuplicateId { line, violation: v },
                Rule::DanglingReference => CorpusError::DanglingReference { line, violation: v },
                _ => CorpusError::Invalid { line, violation: v },
            });
        }
        Ok(corpus)
    }

    /// Serialize to the line-delimited record format. Image sets come first.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for set in &self.image_sets {
            let rec = Record::ImageSet(ImageSetRecord::from(set));
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        for d in &self.dialogues {
            let rec = Record::Dialogue(DialogueRecord::from(d));
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// Load and validate a corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path.as_ref()).map_err(CorpusError::Io)?;
    Corpus::from_reader(BufReader::new(file))
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[source] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("{}duplicate id: {violation}", line_prefix(*.line))]
    DuplicateId { line: Option<usize>, violation: Violation },
    #[error("{}dangling reference: {violation}", line_prefix(*.line))]
    DanglingReference { line: Option<usize>, violation: Violation },
    #[error("{}{violation}", line_prefix(*.line))]
    Invalid { line: Option<usize>, violation: Violation },
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

/// The invariant a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NineImages,
    EmptyCategory,
    DuplicateId,
    DanglingReference,
    WrongSet,
    MessageIndex,
    RoundOrder,
    SpanBounds,
    SurfaceMismatch,
    EmptyReferents,
    OverlappingMentions,
    RankedTwice,
    TooManyRankings,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::NineImages => "an image set holds exactly 9 images",
            Rule::EmptyCategory => "image set category must be nonempty",
            Rule::DuplicateId => "ids must be unique",
            Rule::DanglingReference => "referenced entity must exist",
            Rule::WrongSet => "referenced image must belong to the dialogue's image set",
            Rule::MessageIndex => "message indices are contiguous from 0",
            Rule::RoundOrder => "rounds are 1-based and non-decreasing",
            Rule::SpanBounds => "0 <= char_start < char_end <= message length",
            Rule::SurfaceMismatch => "surface equals the message text slice",
            Rule::EmptyReferents => "a mention has at least one referent",
            Rule::OverlappingMentions => "mentions within a message do not overlap",
            Rule::RankedTwice => "an image is ranked at most once per round",
            Rule::TooManyRankings => "at most 9 ranking events per round",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Type name of the offending entity.
    pub entity: &'static str,
    /// Id of the offending entity.
    pub id: String,
    pub rule: Rule,
    pub detail: String,
    #[serde(skip)]
    owner: String,
}

impl Violation {
    fn new(entity: &'static str, id: impl Into<String>, owner: &str, rule: Rule, detail: String) -> Self {
        Violation {
            entity,
            id: id.into(),
            rule,
            detail,
            owner: owner.to_string(),
        }
    }

    /// Id of the top-level record (image set or dialogue) the violation sits in.
    pub fn owner(&self) -> &str {
        &self.owner
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} `{}`: {} ({})", self.entity, self.id, self.rule, self.detail)
    }
}

/// Slice `text` by Unicode scalar offsets, end-exclusive.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut it = text.char_indices().map(|(b, _)| b).chain(std::iter::once(text.len()));
    let b_start = it.nth(start)?;
    let b_end = if end == start {
        b_start
    } else {
        it.nth(end - start - 1)?
    };
    Some(&text[b_start..b_end])
}

/// Check every corpus invariant; an empty result means the corpus is valid.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut set_ids = BTreeSet::new();
    let mut image_owner: BTreeMap<&str, &str> = BTreeMap::new();
    for set in &corpus.image_sets {
        let sid = set.set_id.as_str();
        if !set_ids.insert(sid) {
            out.push(Violation::new("ImageSet", sid, sid, Rule::DuplicateId, "set_id repeated".into()));
        }
        if set.images.len() != IMAGES_PER_SET {
            out.push(Violation::new(
                "ImageSet",
                sid,
                sid,
                Rule::NineImages,
                format!("found {} images", set.images.len()),
            ));
        }
        if set.category.trim().is_empty() {
            out.push(Violation::new("ImageSet", sid, sid, Rule::EmptyCategory, String::new()));
        }
        let mut local = BTreeSet::new();
        for img in &set.images {
            if !local.insert(img.image_id.as_str()) {
                out.push(Violation::new(
                    "ImageRef",
                    &img.image_id,
                    sid,
                    Rule::DuplicateId,
                    format!("image_id repeated within set `{sid}`"),
                ));
            } else if let Some(other) = image_owner.insert(&img.image_id, sid) {
                out.push(Violation::new(
                    "ImageRef",
                    &img.image_id,
                    sid,
                    Rule::DuplicateId,
                    format!("image_id also belongs to set `{other}`"),
                ));
            }
            if img.set_id != set.set_id {
                out.push(Violation::new(
                    "ImageRef",
                    &img.image_id,
                    sid,
                    Rule::WrongSet,
                    format!("declares set `{}` but is listed in `{sid}`", img.set_id),
                ));
            }
        }
    }

    let mut dialogue_ids = BTreeSet::new();
    let mut mention_ids = BTreeSet::new();
    for d in &corpus.dialogues {
        let did = d.dialogue_id.as_str();
        if !dialogue_ids.insert(did) {
            out.push(Violation::new("Dialogue", did, did, Rule::DuplicateId, "dialogue_id repeated".into()));
        }
        let set = corpus.image_set(&d.set_id);
        if set.is_none() {
            out.push(Violation::new(
                "Dialogue",
                did,
                did,
                Rule::DanglingReference,
                format!("unknown set `{}`", d.set_id),
            ));
        }
        validate_messages(d, &mut out);
        validate_mentions(corpus, d, set, &mut mention_ids, &mut out);
        validate_rankings(corpus, d, set, &mut out);
    }
    out
}

fn validate_messages(d: &Dialogue, out: &mut Vec<Violation>) {
    let did = d.dialogue_id.as_str();
    let mut prev_round = 1;
    for (i, m) in d.messages.iter().enumerate() {
        if m.index != i {
            out.push(Violation::new(
                "Message",
                format!("{did}#{i}"),
                did,
                Rule::MessageIndex,
                format!("position {i} carries index {}", m.index),
            ));
        }
        if m.round < prev_round {
            out.push(Violation::new(
                "Message",
                format!("{did}#{i}"),
                did,
                Rule::RoundOrder,
                format!("round {} after round {prev_round}", m.round),
            ));
        }
        prev_round = prev_round.max(m.round);
    }
}

fn validate_mentions<'a>(
    corpus: &Corpus,
    d: &'a Dialogue,
    set: Option<&ImageSet>,
    seen: &mut BTreeSet<&'a str>,
    out: &mut Vec<Violation>,
) {
    let did = d.dialogue_id.as_str();
    let mut spans: BTreeMap<usize, Vec<(usize, usize, &str)>> = BTreeMap::new();
    for m in &d.mentions {
        let mid = m.mention_id.as_str();
        if !seen.insert(mid) {
            out.push(Violation::new("Mention", mid, did, Rule::DuplicateId, "mention_id repeated".into()));
        }
        if m.dialogue_id != d.dialogue_id {
            out.push(Violation::new(
                "Mention",
                mid,
                did,
                Rule::DanglingReference,
                format!("claims dialogue `{}`", m.dialogue_id),
            ));
        }
        match d.message(m.message_index) {
            None => out.push(Violation::new(
                "Mention",
                mid,
                did,
                Rule::DanglingReference,
                format!("no message {}", m.message_index),
            )),
            Some(msg) => {
                let len = msg.text.chars().count();
                if !(m.char_start < m.char_end && m.char_end <= len) {
                    out.push(Violation::new(
                        "Mention",
                        mid,
                        did,
                        Rule::SpanBounds,
                        format!("span {}..{} over message of length {len}", m.char_start, m.char_end),
                    ));
                } else {
                    let slice = char_slice(&msg.text, m.char_start, m.char_end).unwrap_or_default();
                    if slice != m.surface {
                        out.push(Violation::new(
                            "Mention",
                            mid,
                            did,
                            Rule::SurfaceMismatch,
                            format!("surface {:?} but text slice {:?}", m.surface, slice),
                        ));
                    }
                    spans.entry(m.message_index).or_default().push((m.char_start, m.char_end, mid));
                }
            }
        }
        if m.referent_image_ids.is_empty() {
            out.push(Violation::new("Mention", mid, did, Rule::EmptyReferents, String::new()));
        }
        for img in &m.referent_image_ids {
            check_image_ref(corpus, set, did, "Mention", mid, img, out);
        }
    }
    for (_, mut list) in spans {
        list.sort();
        for pair in list.windows(2) {
            if pair[1].0 < pair[0].1 {
                out.push(Violation::new(
                    "Mention",
                    pair[1].2,
                    did,
                    Rule::OverlappingMentions,
                    format!("overlaps `{}`", pair[0].2),
                ));
            }
        }
    }
}

fn validate_rankings(corpus: &Corpus, d: &Dialogue, set: Option<&ImageSet>, out: &mut Vec<Violation>) {
    let did = d.dialogue_id.as_str();
    let mut per_round: BTreeMap<u32, BTreeSet<&str>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, ev) in d.ranking_events.iter().enumerate() {
        let id = format!("{did}/rank{i}");
        let Some(msg) = d.message(ev.message_index) else {
            out.push(Violation::new(
                "RankingEvent",
                id,
                did,
                Rule::DanglingReference,
                format!("no message {}", ev.message_index),
            ));
            continue;
        };
        check_image_ref(corpus, set, did, "RankingEvent", &id, &ev.image_id, out);
        if !per_round.entry(msg.round).or_default().insert(&ev.image_id) {
            out.push(Violation::new(
                "RankingEvent",
                &id,
                did,
                Rule::RankedTwice,
                format!("`{}` ranked twice in round {}", ev.image_id, msg.round),
            ));
        }
        let c = counts.entry(msg.round).or_default();
        *c += 1;
        if *c == IMAGES_PER_SET + 1 {
            out.push(Violation::new(
                "RankingEvent",
                &id,
                did,
                Rule::TooManyRankings,
                format!("round {}", msg.round),
            ));
        }
    }
}

fn check_image_ref(
    corpus: &Corpus,
    set: Option<&ImageSet>,
    did: &str,
    entity: &'static str,
    id: &str,
    image_id: &str,
    out: &mut Vec<Violation>,
) {
    if set.is_some_and(|s| s.image(image_id).is_some()) {
        return;
    }
    if corpus.image(image_id).is_some() {
        out.push(Violation::new(
            entity,
            id,
            did,
            Rule::WrongSet,
            format!("image `{image_id}` is not in the dialogue's set"),
        ));
    } else {
        out.push(Violation::new(
            entity,
            id,
            did,
            Rule::DanglingReference,
            format!("unknown image `{image_id}`"),
        ));
    }
}

/// Mentions with exactly one referent image, ordered by
/// `(dialogue_id, message_index, char_start)`.
pub fn single_image_mentions(corpus: &Corpus) -> Vec<&Mention> {
    let mut out: Vec<&Mention> = corpus
        .mentions()
        .map(|(_, m)| m)
        .filter(|m| m.is_single_image())
        .collect();
    out.sort_by(|a, b| {
        (&a.dialogue_id, a.message_index, a.char_start).cmp(&(&b.dialogue_id, b.message_index, b.char_start))
    });
    out
}

// On-disk records. Child records omit the ids implied by their parent.

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    ImageSet(ImageSetRecord),
    Dialogue(DialogueRecord),
}

#[derive(Serialize, Deserialize)]
struct ImageSetRecord {
    set_id: String,
    category: String,
    images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    image_id: String,
    uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth_description: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    dialogue_id: String,
    set_id: String,
    task_description: String,
    messages: Vec<Message>,
    #[serde(default)]
    mentions: Vec<MentionRecord>,
    #[serde(default)]
    ranking_events: Vec<RankingEvent>,
}

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    mention_id: String,
    message_index: usize,
    char_start: usize,
    char_end: usize,
    referent_image_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    surface: Option<String>,
}

impl ImageSetRecord {
    fn into_image_set(self) -> ImageSet {
        let set_id = self.set_id;
        ImageSet {
            images: self
                .images
                .into_iter()
                .map(|i| ImageRef {
                    image_id: i.image_id,
                    set_id: set_id.clone(),
                    uri: i.uri,
                    ground_truth_description: i.ground_truth_description,
                })
                .collect(),
            set_id,
            category: self.category,
        }
    }
}

impl From<&ImageSet> for ImageSetRecord {
    fn from(s: &ImageSet) -> Self {
        ImageSetRecord {
            set_id: s.set_id.clone(),
            category: s.category.clone(),
            images: s
                .images
                .iter()
                .map(|i| ImageRecord {
                    image_id: i.image_id.clone(),
                    uri: i.uri.clone(),
                    ground_truth_description: i.ground_truth_description.clone(),
                })
                .collect(),
        }
    }
}

impl DialogueRecord {
    fn into_dialogue(self) -> Result<Dialogue, String> {
        let mut mentions = Vec::with_capacity(self.mentions.len());
        for m in self.mentions {
            let text = self
                .messages
                .iter()
                .find(|msg| msg.index == m.message_index)
                .map(|msg| msg.text.as_str());
            let slice = text.and_then(|t| {
                let len = t.chars().count();
                (m.char_start < m.char_end && m.char_end <= len)
                    .then(|| char_slice(t, m.char_start, m.char_end))
                    .flatten()
            });
            let surface = match (m.surface, slice) {
                (Some(s), _) => s,
                (None, Some(s)) => s.to_string(),
                (None, None) => {
                    return Err(format!(
                        "mention `{}`: span {}..{} does not fit message {}",
                        m.mention_id, m.char_start, m.char_end, m.message_index
                    ))
                }
            };
            mentions.push(Mention {
                mention_id: m.mention_id,
                dialogue_id: self.dialogue_id.clone(),
                message_index: m.message_index,
                char_start: m.char_start,
                char_end: m.char_end,
                referent_image_ids: m.referent_image_ids,
                surface,
            });
        }
        Ok(Dialogue {
            dialogue_id: self.dialogue_id,
            set_id: self.set_id,
            task_description: self.task_description,
            messages: self.messages,
            mentions,
            ranking_events: self.ranking_events,
        })
    }
}

impl From<&Dialogue> for DialogueRecord {
    fn from(d: &Dialogue) -> Self {
        DialogueRecord {
            dialogue_id: d.dialogue_id.clone(),
            set_id: d.set_id.clone(),
            task_description: d.task_description.clone(),
            messages: d.messages.clone(),
            mentions: d
                .mentions
                .iter()
                .map(|m| MentionRecord {
                    mention_id: m.mention_id.clone(),
                    message_index: m.message_index,
                    char_start: m.char_start,
                    char_end: m.char_end,
                    referent_image_ids: m.referent_image_ids.clone(),
                    surface: Some(m.surface.clone()),
                })
                .collect(),
            ranking_events: d.ranking_events.clone(),
        }
    }
}
