//! Whitespace word-level vocabulary shared by the policy and the classifier.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const CLS: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<cls>"];

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Builds a vocabulary from the special tokens followed by `words` in
    /// order of first appearance.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut list: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, usize> = list.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            if !seen.contains_key(w) {
                seen.insert(w.to_string(), list.len());
                list.push(w.to_string());
            }
        }
        Vocab::from(list)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Splits on whitespace; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    /// Like [`Vocab::encode`] but rejects unknown words.
    pub fn encode_strict(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match self.id(w) {
                Some(id) => Ok(id),
                None => bail!(Data, "word {w:?} is not in the vocabulary"),
            })
            .collect()
    }

    /// Joins non-special tokens with single spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !Self::is_special(i) || i == UNK)
            .map(|&i| self.words[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Stable 64-bit digest of the word list.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in &self.words {
            for b in w.bytes().chain(std::iter::once(0xff)) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first_and_round_trip() {
        let v = Vocab::build(["the", "cat", "the", "sat"]);
        assert_eq!(v.len(), 8);
        assert_eq!(v.id("<eos>"), Some(EOS));
        let ids = v.encode("the cat sat on");
        assert_eq!(ids, vec![5, 6, 7, UNK]);
        assert_eq!(v.decode(&[BOS, 5, 6, EOS]), "the cat");
        assert!(v.encode_strict("the dog").is_err());
    }

    #[test]
    fn fingerprint_depends_on_order() {
        let a = Vocab::build(["x", "y"]);
        let b = Vocab::build(["y", "x"]);
        assert_ne!(a.fingerprint(), b.fingerprint());
        let json = serde_json::to_string(&a).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
        assert_eq!(a.fingerprint(), back.fingerprint());
    }
}
