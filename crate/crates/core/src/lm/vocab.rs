//! Fixed synthetic vocabulary and a whitespace/punctuation tokenizer.

use std::collections::HashMap;
use std::sync::OnceLock;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const IMG_SEP: u32 = 2;
pub const ANS: u32 = 3;
pub const UNK: u32 = 4;

const WORDS: &[&str] = &[
    "<pad>", "<eos>", "<img_sep>", "<ans>", "<unk>",
    // option letters
    "A", "B", "C", "D",
    // colors
    "red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange",
    // shapes
    "square", "circle", "triangle", "cross",
    // scene questions
    "what", "is", "the", "color", "of", "shape", "left", "right", "above", "below", "to",
    "which", "?", ".", ",", "a", "an", "and", "there", "in", "on", "with", "image", "scene",
    "describe", "describes", "answer", "option", "options", "one", "two", "three", "four", "no", "yes",
    // navigation
    "go", "navigate", "toward", "towards", "find", "reach", "goal", "agent", "heading",
    "move", "forward", "rotate", "stay", "step", "{", "}", ":",
    "\"action\"", "\"stay\"", "\"move_forward\"", "\"rotate_left\"", "\"rotate_right\"",
    // interaction captions
    "person", "robot", "doing", "waits", "for", "their", "turn", "approaches", "interrupt",
    "conversation", "calmly", "urgently", "signals", "intent", "speak", "talks", "while",
    "other", "listens", "looks", "at", "stands", "still", "nods", "leaves", "walks", "away",
    "raises", "hand", "steps", "closer", "asks", "question", "smiles", "checks", "phone",
    "waves", "points", "map", "desk", "tourist", "engaged", "by", "watches", "quietly",
    "leans", "in", "gestures",
];

#[derive(Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, u32>,
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| {
            let mut words = Vec::new();
            let mut index = HashMap::new();
            for &w in WORDS {
                if !index.contains_key(w) {
                    index.insert(w, words.len() as u32);
                    words.push(w);
                }
            }
            Vocab { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).copied().unwrap_or("<unused>")
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split(text)
            .into_iter()
            .map(|t| self.id(&t).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined words; stops at nothing, includes every id.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Decoded answer text with special tokens dropped.
    pub fn decode_answer(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i > UNK)
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn contains_all(&self, text: &str) -> bool {
        split(text).iter().all(|t| self.id(t).is_some())
    }
}

/// Splits on whitespace, isolates `{ } : , ? .`, and keeps `"quoted"` runs whole.
pub fn split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    let flush = |cur: &mut String, out: &mut Vec<String>| {
        if !cur.is_empty() {
            out.push(std::mem::take(cur));
        }
    };
    while let Some(c) = chars.next() {
        match c {
            c if c.is_whitespace() => flush(&mut cur, &mut out),
            '{' | '}' | ':' | ',' | '?' | '.' => {
                flush(&mut cur, &mut out);
                out.push(c.to_string());
            }
            '"' => {
                flush(&mut cur, &mut out);
                let mut q = String::from('"');
                for d in chars.by_ref() {
                    q.push(d);
                    if d == '"' {
                        break;
                    }
                }
                out.push(q);
            }
            c => cur.push(c),
        }
    }
    flush(&mut cur, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::standard();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<img_sep>"), Some(IMG_SEP));
        assert_eq!(v.id("<ans>"), Some(ANS));
        assert!(v.len() < 512);
    }

    #[test]
    fn json_action_round_trips() {
        let v = Vocab::standard();
        let ids = v.encode(r#"{"action": "move_forward"}"#);
        assert_eq!(ids.len(), 5);
        assert!(!ids.contains(&UNK));
        assert_eq!(v.decode(&ids), r#"{ "action" : "move_forward" }"#);
    }

    #[test]
    fn question_mark_is_split() {
        assert_eq!(split("color of the square?"), ["color", "of", "the", "square", "?"]);
    }
}
