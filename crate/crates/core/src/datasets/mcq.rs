//! Caption annotations to four-option multiple-choice questions.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::vision::ImageGrid;

use super::scene::{level, rgb, GRAY};

pub const PLACEHOLDER: &str = "{POS}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    Left,
    Right,
}

impl Position {
    pub fn word(self) -> &'static str {
        match self {
            Position::Left => "left",
            Position::Right => "right",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Position::Left => Position::Right,
            Position::Right => Position::Left,
        }
    }
}

/// Which of the two annotated people a caption describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetPerson {
    Inactive,
    Intervening,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub position: Position,
    pub event_id: usize,
    pub target: TargetPerson,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub options: [String; 4],
    pub correct: usize,
    pub caption_id: usize,
    pub target: TargetPerson,
    pub position: Position,
}

impl McqItem {
    pub fn check(&self) -> Result<()> {
        let distinct: BTreeSet<&String> = self.options.iter().collect();
        if distinct.len() != 4 {
            return Err(Error::Dataset("duplicate options".into()));
        }
        if self.correct >= 4 {
            return Err(Error::Dataset("correct index out of range".into()));
        }
        if self.question.contains(PLACEHOLDER) || self.options.iter().any(|o| o.contains(PLACEHOLDER)) {
            return Err(Error::Dataset("unresolved position placeholder".into()));
        }
        Ok(())
    }

    /// Question followed by lettered options.
    pub fn prompt(&self) -> String {
        let mut s = self.question.clone();
        for (l, o) in LETTERS.iter().zip(&self.options) {
            s.push(' ');
            s.push_str(l);
            s.push(' ');
            s.push_str(o);
        }
        s
    }

    pub fn answer_letter(&self) -> &'static str {
        LETTERS[self.correct]
    }
}

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Replaces "left person" / "right person" with the placeholder.
pub fn normalize(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let next_is_person = words.get(i + 1) == Some(&"person");
        if next_is_person && (*w == "left" || *w == "right") {
            out.push(PLACEHOLDER);
        } else {
            out.push(w);
        }
    }
    out.join(" ")
}

pub fn instantiate(template: &str, position: Position) -> String {
    template.replace(PLACEHOLDER, position.word())
}

/// One item per caption. The template pool is every distinct normalized
/// caption; distractors are three other templates re-instantiated at the
/// item's own position, and the correct option lands in a uniformly drawn
/// slot.
pub fn build_mcq(captions: &[Caption], seeds: &SeedStream) -> Result<Vec<McqItem>> {
    let templates: Vec<String> = captions.iter().map(|c| normalize(&c.text)).collect();
    let pool: Vec<&String> = templates.iter().collect::<BTreeSet<_>>().into_iter().collect();
    if pool.len() < 4 {
        return Err(Error::Dataset(format!(
            "template pool has {} entries; 4 are needed for distinct options",
            pool.len()
        )));
    }
    let mut items = Vec::with_capacity(captions.len());
    for (i, (c, t)) in captions.iter().zip(&templates).enumerate() {
        let mut rng = seeds.index(i as u64).rng();
        let others: Vec<&String> = pool.iter().copied().filter(|p| *p != t).collect();
        let picks = sample(&mut rng, others.len(), 3);
        let correct = rng.random_range(0..4);
        let mut distractors = picks.iter().map(|j| instantiate(others[j], c.position));
        let options: [String; 4] = std::array::from_fn(|slot| {
            if slot == correct {
                instantiate(t, c.position)
            } else {
                distractors.next().expect("three distractors")
            }
        });
        let item = McqItem {
            question: format!("which option describes the {} person ?", c.position.word()),
            options,
            correct,
            caption_id: i,
            target: c.target,
            position: c.position,
        };
        item.check()?;
        items.push(item);
    }
    Ok(items)
}

/// Option index named by the first standalone option letter (`A`–`D`) or
/// 1-based digit in `answer`.
pub fn parse_option(answer: &str) -> Option<usize> {
    answer
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .find_map(|t| match t {
            "A" | "1" => Some(0),
            "B" | "2" => Some(1),
            "C" | "3" => Some(2),
            "D" | "4" => Some(3),
            _ => None,
        })
}

/// Unparseable answers score as incorrect.
pub fn score_mcq(answer: &str, item: &McqItem) -> bool {
    parse_option(answer) == Some(item.correct)
}

pub const INACTIVE_TEMPLATES: [&str; 8] = [
    "the {POS} person waits for their turn",
    "the {POS} person listens calmly",
    "the {POS} person looks at the robot",
    "the {POS} person stands still",
    "the {POS} person checks their phone",
    "the {POS} person nods while the other talks",
    "the {POS} person watches quietly",
    "the {POS} person looks at the map",
];

pub const INTERVENING_TEMPLATES: [&str; 8] = [
    "the {POS} person approaches to interrupt the conversation",
    "the {POS} person raises their hand to speak",
    "the {POS} person steps closer and asks a question",
    "the {POS} person waves at the robot",
    "the {POS} person points at the map",
    "the {POS} person leans in and signals intent to speak",
    "the {POS} person walks to the desk urgently",
    "the {POS} person gestures at the robot calmly",
];

/// Synthetic annotations: per event, one inactive and one intervening
/// person on opposite sides.
pub fn gen_captions(events: usize, seeds: &SeedStream) -> Vec<Caption> {
    let mut out = Vec::with_capacity(2 * events);
    for e in 0..events {
        let mut rng = seeds.index(e as u64).rng();
        let pos = if rng.random_bool(0.5) { Position::Left } else { Position::Right };
        let inactive = INACTIVE_TEMPLATES.choose(&mut rng).expect("nonempty");
        let intervening = INTERVENING_TEMPLATES.choose(&mut rng).expect("nonempty");
        out.push(Caption {
            text: instantiate(inactive, pos),
            position: pos,
            event_id: e,
            target: TargetPerson::Inactive,
        });
        out.push(Caption {
            text: instantiate(intervening, pos.other()),
            position: pos.other(),
            event_id: e,
            target: TargetPerson::Intervening,
        });
    }
    out
}

/// Index of a caption's activity among all templates.
pub fn template_index(text: &str) -> Option<usize> {
    let t = normalize(text);
    INACTIVE_TEMPLATES
        .iter()
        .chain(&INTERVENING_TEMPLATES)
        .position(|&k| k == t)
}

/// Schematic frame: a robot in the middle and two people whose color and
/// arm pose encode their activity.
pub fn render_event(left: &str, right: &str, size: usize) -> ImageGrid {
    let mut img = ImageGrid::filled(size, size, 3, 0.0);
    let u = size / 12;
    for y in 5 * u..9 * u {
        for x in 5 * u..7 * u {
            img.set(y, x, [level(GRAY); 3]);
        }
    }
    for (text, x0) in [(left, u), (right, 8 * u)] {
        let k = template_index(text).unwrap_or(0);
        let color = rgb(k % 8);
        for y in 2 * u..11 * u {
            for x in x0 + u..x0 + 2 * u {
                img.set(y, x, color);
            }
        }
        // Head.
        for y in u..2 * u {
            for x in x0 + u..x0 + 2 * u {
                img.set(y, x, [1.0, 1.0, 1.0]);
            }
        }
        // Raised arm for intervening people.
        if k >= 8 {
            for y in u..4 * u {
                for x in x0..x0 + u {
                    img.set(y, x, color);
                }
            }
        }
    }
    img
}
