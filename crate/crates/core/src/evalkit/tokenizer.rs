use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
/// Line break.
pub const NL: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<nl>"];

/// Whitespace word tokenizer. Ids 0..4 are the special tokens; the remaining
/// words are sorted, so the vocabulary depends only on the set of words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        Self::from_words(SPECIALS.iter().copied().chain(set).map(String::from).collect())
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// One token per line, specials first.
    pub fn to_vocab_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_vocab_text(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(String::from).collect();
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Format("vocabulary must start with <pad> <eos> <unk> <nl>".into()));
        }
        let t = Self::from_words(words);
        if t.index.len() != t.words.len() {
            return Err(Error::Format("vocabulary has duplicate tokens".into()));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                ids.push(NL);
            }
            ids.extend(line.split_whitespace().map(|w| *self.index.get(w).unwrap_or(&UNK)));
        }
        ids
    }

    /// Words joined by single spaces, line breaks restored; padding and end
    /// tokens are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        let mut line_start = true;
        for &id in ids {
            match id {
                PAD | EOS => {}
                NL => {
                    s.push('\n');
                    line_start = true;
                }
                _ => {
                    if !line_start {
                        s.push(' ');
                    }
                    s.push_str(self.words.get(id).map_or("<unk>", String::as_str));
                    line_start = false;
                }
            }
        }
        s
    }
}
