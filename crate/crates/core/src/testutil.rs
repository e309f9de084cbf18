use crate::corpus::*;

pub fn span(text: &str, needle: &str) -> (usize, usize) {
    let byte = text.find(needle).expect("needle in text");
    let start = text[..byte].chars().count();
    (start, start + needle.chars().count())
}

pub fn dogs_set() -> ImageSet {
    let descs = [
        "the grey husky with blue eyes",
        "the white curly poodle",
        "the brown curly poodle",
        "the black labrador",
        "the fluffy chow",
        "the small pug",
        "the spotted dalmatian",
        "the white attentive terrier",
        "the sleepy beagle",
    ];
    ImageSet {
        set_id: "s1".into(),
        category: "dogs".into(),
        images: descs
            .iter()
            .enumerate()
            .map(|(i, d)| ImageRef {
                image_id: format!("img{i}"),
                set_id: "s1".into(),
                uri: format!("images/s1/{i}.jpg"),
                ground_truth_description: Some(d.to_string()),
            })
            .collect(),
    }
}

pub fn mention(did: &str, id: &str, msg: &Message, surface: &str, refs: &[&str]) -> Mention {
    let (s, e) = span(&msg.text, surface);
    Mention {
        mention_id: id.into(),
        dialogue_id: did.into(),
        message_index: msg.index,
        char_start: s,
        char_end: e,
        referent_image_ids: refs.iter().map(|r| r.to_string()).collect(),
        surface: surface.into(),
    }
}

/// One set, one dialogue, three single-image mentions and one two-image mention.
pub fn tiny_corpus() -> Corpus {
    let texts = [
        (Speaker::A, "lets start with the husky"),
        (Speaker::B, "yeah it is scary"),
        (Speaker::A, "ok ranked. now both of those poodles"),
        (Speaker::B, "the black one is cute"),
    ];
    let messages: Vec<Message> = texts
        .iter()
        .enumerate()
        .map(|(i, (s, t))| Message {
            index: i,
            speaker: *s,
            text: t.to_string(),
            round: 1,
        })
        .collect();
    let mentions = vec![
        mention("d1", "m0", &messages[0], "the husky", &["img0"]),
        mention("d1", "m1", &messages[1], "it", &["img0"]),
        mention("d1", "m2", &messages[2], "those poodles", &["img1", "img2"]),
        mention("d1", "m3", &messages[3], "the black one", &["img3"]),
    ];
    Corpus {
        image_sets: vec![dogs_set()],
        dialogues: vec![Dialogue {
            dialogue_id: "d1".into(),
            set_id: "s1".into(),
            task_description: "Which of these dogs would be most effective in scaring off the neighbour's cat?".into(),
            messages,
            mentions,
            ranking_events: vec![RankingEvent {
                message_index: 2,
                image_id: "img0".into(),
            }],
        }],
    }
}
