use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
/// Placeholder id at visual positions; the input there is a visual token.
pub const IMG: &str = "<img>";

const SPECIALS: [&str; 5] = [PAD, BOS, EOS, UNK, IMG];
const PUNCT: [char; 7] = ['[', ']', ':', ',', '.', '?', '!'];

/// Word-level tokenizer. Text is lower-cased, split on whitespace, and the
/// punctuation marks `[ ] : , . ? !` become tokens of their own.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.extend(ch.to_lowercase());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

impl Tokenizer {
    /// Specials first, then every word of `texts` in sorted order, so ids are
    /// stable for a fixed corpus.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(split_words)
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let vocab: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from(vocab)
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    fn special(&self, s: &str) -> usize {
        self.index[s]
    }

    pub fn pad(&self) -> usize {
        self.special(PAD)
    }

    pub fn bos(&self) -> usize {
        self.special(BOS)
    }

    pub fn eos(&self) -> usize {
        self.special(EOS)
    }

    pub fn unk(&self) -> usize {
        self.special(UNK)
    }

    pub fn img(&self) -> usize {
        self.special(IMG)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or_else(|| self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.vocab.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::synth::write_json(path, &self.vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vocab: Vec<String> = crate::synth::read_json(path)?;
        for s in SPECIALS {
            if !vocab.iter().any(|w| w == s) {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("vocabulary lacks special token {s}"),
                });
            }
        }
        Ok(Self::from(vocab))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build([
            "Describe the object. [Detected: bollard, cone]",
            "what is it ?",
        ])
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(
            split_words("Describe it. [Detected: bollard, cone]"),
            vec!["describe", "it", ".", "[", "detected", ":", "bollard", ",", "cone", "]"]
        );
    }

    #[test]
    fn specials_come_first_and_unknowns_map_to_unk() {
        let t = tok();
        assert_eq!(t.pad(), 0);
        assert_eq!(t.bos(), 1);
        assert_eq!(t.eos(), 2);
        assert_eq!(t.encode("zebra"), vec![t.unk()]);
    }

    #[test]
    fn ids_are_stable() {
        assert_eq!(tok(), tok());
    }

    #[test]
    fn text_round_trip() {
        let t = tok();
        let text = "describe the object . [ detected : bollard , cone ]";
        assert_eq!(t.decode(&t.encode(text)), text);
    }

    proptest! {
        #[test]
        fn id_round_trip(ids in proptest::collection::vec(5usize..15, 0..12)) {
            let t = tok();
            let ids: Vec<usize> = ids.into_iter().filter(|&i| i < t.len()).collect();
            prop_assert_eq!(t.encode(&t.decode(&ids)), ids);
        }
    }
}
