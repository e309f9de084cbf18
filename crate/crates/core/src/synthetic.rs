//! Seeded AGOS-shaped corpora for tests, fixtures and the chance baseline.
//!
//! Every round ranks the nine images of a set one at a time. Before each
//! ranking the players talk about the image about to be ranked, so a round
//! has mention phases with 9, 8, ..., 2 unranked images; the ninth image is
//! ranked by elimination without being discussed. Each dialogue optionally
//! carries one two-image mention and one mention of an image that was already
//! ranked in the current round (which the harness must exclude).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Dialogue, ImageRef, ImageSet, Mention, Message, RankingEvent, Speaker, IMAGES_PER_SET};

/// Category name, task, and (adjective, adjective, noun) per image.
type CategorySpec = (&'static str, &'static str, [(&'static str, &'static str, &'static str); 9]);

pub const CATEGORIES: [CategorySpec; 5] = [
    (
        "dogs",
        "rank the dogs from best to worst family pet",
        [
            ("grey", "fluffy", "husky"),
            ("white", "curly", "poodle"),
            ("brown", "curly", "poodle"),
            ("black", "shiny", "labrador"),
            ("small", "wrinkly", "pug"),
            ("spotted", "tall", "dalmatian"),
            ("sleepy", "brown", "beagle"),
            ("white", "scruffy", "terrier"),
            ("golden", "happy", "retriever"),
        ],
    ),
    (
        "phones",
        "rank the phones from most to least useful on a camping trip",
        [
            ("black", "flip", "nokia"),
            ("silver", "slim", "iphone"),
            ("red", "chunky", "motorola"),
            ("white", "old", "blackberry"),
            ("blue", "rugged", "samsung"),
            ("pink", "tiny", "sony"),
            ("green", "sliding", "phone"),
            ("gold", "curved", "pixel"),
            ("orange", "cracked", "smartphone"),
        ],
    ),
    (
        "cars",
        "rank the cars from best to worst for a family holiday",
        [
            ("red", "sporty", "convertible"),
            ("blue", "boxy", "van"),
            ("white", "electric", "hatchback"),
            ("black", "long", "limousine"),
            ("green", "vintage", "beetle"),
            ("yellow", "small", "taxi"),
            ("silver", "muddy", "jeep"),
            ("grey", "huge", "truck"),
            ("orange", "tiny", "smartcar"),
        ],
    ),
    (
        "lamps",
        "rank the lamps from most to least suitable for reading",
        [
            ("tall", "brass", "floorlamp"),
            ("green", "glass", "bankerlamp"),
            ("white", "paper", "lantern"),
            ("red", "bendy", "desklamp"),
            ("round", "wooden", "lamp"),
            ("purple", "lava", "lamp"),
            ("tiny", "clip", "booklight"),
            ("black", "industrial", "spotlight"),
            ("old", "oil", "lantern"),
        ],
    ),
    (
        "mugs",
        "rank the mugs from best to worst for a long meeting",
        [
            ("white", "plain", "mug"),
            ("blue", "striped", "mug"),
            ("steel", "insulated", "flask"),
            ("tiny", "espresso", "cup"),
            ("glass", "tall", "latte"),
            ("red", "chipped", "mug"),
            ("black", "travel", "tumbler"),
            ("floral", "china", "teacup"),
            ("giant", "yellow", "bowl"),
        ],
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticConfig {
    /// At most `CATEGORIES.len()`.
    pub n_sets: usize,
    pub dialogues_per_set: usize,
    pub rounds: u32,
    /// Single-image mentions of each image before it is ranked.
    pub mentions_per_image: usize,
    /// Add one two-image mention per dialogue.
    pub multi_image_mention: bool,
    /// Add one mention of an already-ranked image per dialogue.
    pub stale_mention: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_sets: 5,
            dialogues_per_set: 3,
            rounds: 1,
            mentions_per_image: 1,
            multi_image_mention: true,
            stale_mention: true,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Only the round structure: no multi-image or stale mentions.
    pub fn round_structure(seed: u64) -> Self {
        SyntheticConfig {
            multi_image_mention: false,
            stale_mention: false,
            seed,
            ..Self::default()
        }
    }
}

/// Analytic chance accuracy of the round structure: every phase k = 9..2
/// holds the same number of included mentions, so the mean of 1/k.
pub fn analytic_chance() -> f64 {
    let ks = 2..=IMAGES_PER_SET;
    ks.clone().map(|k| 1.0 / k as f64).sum::<f64>() / ks.count() as f64
}

pub fn image_set(category_index: usize) -> ImageSet {
    let (category, _, items) = &CATEGORIES[category_index];
    let set_id = format!("set{}", category_index + 1);
    ImageSet {
        set_id: set_id.clone(),
        category: category.to_string(),
        images: items
            .iter()
            .enumerate()
            .map(|(i, (a1, a2, noun))| ImageRef {
                image_id: format!("{set_id}-img{i}"),
                set_id: set_id.clone(),
                uri: format!("images/{set_id}/{i}.jpg"),
                ground_truth_description: Some(format!("the {a1} {a2} {noun}")),
            })
            .collect(),
    }
}

/// Message text under construction, with the mentions placed in it.
struct Line {
    speaker: Speaker,
    text: String,
    spans: Vec<(usize, usize, Vec<String>)>,
    ranks: Option<String>,
}

impl Line {
    fn new(speaker: Speaker) -> Self {
        Line {
            speaker,
            text: String::new(),
            spans: Vec::new(),
            ranks: None,
        }
    }

    fn text(mut self, s: &str) -> Self {
        self.text.push_str(s);
        self
    }

    fn mention(mut self, surface: &str, refs: &[&str]) -> Self {
        let start = self.text.chars().count();
        self.text.push_str(surface);
        let end = self.text.chars().count();
        self.spans.push((start, end, refs.iter().map(|r| r.to_string()).collect()));
        self
    }

    fn ranking(mut self, image_id: &str) -> Self {
        self.ranks = Some(image_id.to_string());
        self
    }
}

struct DialogueBuilder {
    dialogue: Dialogue,
    round: u32,
}

impl DialogueBuilder {
    fn push(&mut self, line: Line) {
        let index = self.dialogue.messages.len();
        for (start, end, refs) in line.spans {
            let surface: String = line.text.chars().skip(start).take(end - start).collect();
            let n = self.dialogue.mentions.len();
            self.dialogue.mentions.push(Mention {
                mention_id: format!("{}-m{n:03}", self.dialogue.dialogue_id),
                dialogue_id: self.dialogue.dialogue_id.clone(),
                message_index: index,
                char_start: start,
                char_end: end,
                referent_image_ids: refs,
                surface,
            });
        }
        if let Some(image_id) = line.ranks {
            self.dialogue.ranking_events.push(RankingEvent {
                message_index: index,
                image_id,
            });
        }
        self.dialogue.messages.push(Message {
            index,
            speaker: line.speaker,
            text: line.text,
            round: self.round,
        });
    }
}

const OPENERS: [&str; 4] = ["what about ", "i would go with ", "next maybe ", "how about "];
const REPLIES: [&str; 4] = [" seems fine", " is good", " works for me", " is a solid pick"];

/// The RE used for the `nth` mention of an image within a phase: a full or
/// short definite description first, then pronouns and one-anaphora.
fn surface_for(nth: usize, rng: &mut ChaCha8Rng, (a1, a2, noun): (&str, &str, &str)) -> String {
    match (nth, rng.random_range(0..3)) {
        (0, 0) => format!("the {a1} {a2} {noun}"),
        (0, 1) => format!("the {a1} {noun}"),
        (0, _) => format!("the {a2} {noun}"),
        (_, 0) => "it".to_string(),
        (_, 1) => format!("the {a1} one"),
        (_, _) => "that one".to_string(),
    }
}

pub fn dialogue(set: &ImageSet, category_index: usize, dialogue_id: &str, config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Dialogue {
    let (_, task, items) = &CATEGORIES[category_index];
    let mut b = DialogueBuilder {
        dialogue: Dialogue {
            dialogue_id: dialogue_id.to_string(),
            set_id: set.set_id.clone(),
            task_description: task.to_string(),
            messages: Vec::new(),
            mentions: Vec::new(),
            ranking_events: Vec::new(),
        },
        round: 1,
    };
    let ids: Vec<&str> = set.image_ids().collect();
    for round in 1..=config.rounds {
        b.round = round;
        let mut order: Vec<usize> = (0..IMAGES_PER_SET).collect();
        order.shuffle(rng);
        b.push(Line::new(Speaker::A).text(if round == 1 { "hi, lets start" } else { "same images again, new round" }));
        if round == 1 && config.multi_image_mention {
            let (x, y) = (order[order.len() - 1], order[order.len() - 2]);
            b.push(
                Line::new(Speaker::B)
                    .text("hmm ")
                    .mention("those two", &[ids[x], ids[y]])
                    .text(" at the end look alike"),
            );
        }
        for (phase, &img) in order.iter().enumerate() {
            let last = phase == IMAGES_PER_SET - 1;
            if last {
                b.push(Line::new(Speaker::A).text("and the last one goes last").ranking(ids[img]));
                continue;
            }
            let mut speaker = if phase % 2 == 0 { Speaker::A } else { Speaker::B };
            let n = config.mentions_per_image;
            for nth in 0..n {
                let surface = surface_for(nth, rng, items[img]);
                let line = if nth == 0 {
                    Line::new(speaker).text(OPENERS[rng.random_range(0..OPENERS.len())]).mention(&surface, &[ids[img]])
                } else {
                    Line::new(speaker).text("yes ").mention(&surface, &[ids[img]]).text(REPLIES[rng.random_range(0..REPLIES.len())])
                };
                let line = if nth + 1 == n { line.text(", ranked").ranking(ids[img]) } else { line };
                b.push(line);
                speaker = if speaker == Speaker::A { Speaker::B } else { Speaker::A };
            }
            if n == 0 {
                b.push(Line::new(speaker).text("ranked").ranking(ids[img]));
            }
            if round == 1 && config.stale_mention && phase == 2 {
                let (a1, _, noun) = items[order[0]];
                let stale = format!("the {a1} {noun}");
                b.push(Line::new(Speaker::B).text("still happy with ").mention(&stale, &[ids[order[0]]]).text(" first"));
            }
        }
    }
    b.dialogue
}

/// A corpus of `n_sets` image sets with `dialogues_per_set` dialogues each.
pub fn agos_corpus(config: &SyntheticConfig) -> Corpus {
    assert!(config.n_sets <= CATEGORIES.len(), "at most {} categories", CATEGORIES.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut corpus = Corpus::default();
    for c in 0..config.n_sets {
        let set = image_set(c);
        for d in 0..config.dialogues_per_set {
            let id = format!("{}-d{}", set.set_id, d + 1);
            corpus.dialogues.push(dialogue(&set, c, &id, config, &mut rng));
        }
        corpus.image_sets.push(set);
    }
    corpus
}
