use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered character set followed by the EOS, PAD and UNK specials.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    chars: String,
}

impl TryFrom<VocabRepr> for CharVocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        CharVocab::new(r.chars.chars().collect())
    }
}

impl From<CharVocab> for VocabRepr {
    fn from(v: CharVocab) -> Self {
        VocabRepr {
            chars: v.chars.iter().collect(),
        }
    }
}

impl Default for CharVocab {
    fn default() -> Self {
        CharVocab::printable()
    }
}

impl CharVocab {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::invalid("vocabulary needs at least one character"));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(CharVocab { chars, index })
    }

    /// Digits, upper case, lower case, then the 32 ASCII punctuation marks:
    /// 94 characters, 97 symbols with the specials.
    pub fn printable() -> Self {
        let chars = ('0'..='9')
            .chain('A'..='Z')
            .chain('a'..='z')
            .chain(('!'..='~').filter(|c| c.is_ascii_punctuation()))
            .collect();
        CharVocab::new(chars).expect("printable ASCII is duplicate-free")
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of symbols including the three specials.
    pub fn len(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> usize {
        self.chars.len()
    }

    pub fn pad(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Symbol indices of `label` followed by EOS. Unknown characters map to UNK.
    pub fn encode(&self, label: &str) -> Vec<usize> {
        let mut out: Vec<usize> = label
            .chars()
            .map(|c| {
                self.index_of(c).unwrap_or_else(|| {
                    log::warn!("character {c:?} in label {label:?} is not in the vocabulary; using UNK");
                    self.unk()
                })
            })
            .collect();
        out.push(self.eos());
        out
    }

    /// Text of a symbol sequence, stopping at EOS; PAD is skipped and UNK
    /// renders as U+FFFD.
    pub fn decode(&self, symbols: &[usize]) -> String {
        let mut out = String::new();
        for &s in symbols {
            if s == self.eos() {
                break;
            }
            if s < self.chars.len() {
                out.push(self.chars[s]);
            } else if s == self.unk() {
                out.push('\u{FFFD}');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printable_has_97_symbols() {
        let v = CharVocab::printable();
        assert_eq!(v.len(), 97);
        assert_eq!(v.chars().iter().filter(|c| c.is_ascii_digit()).count(), 10);
        assert_eq!(v.chars().iter().filter(|c| c.is_ascii_uppercase()).count(), 26);
        assert_eq!(v.chars().iter().filter(|c| c.is_ascii_lowercase()).count(), 26);
        assert_eq!(v.chars().iter().filter(|c| c.is_ascii_punctuation()).count(), 32);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let v = CharVocab::printable();
        let e = v.encode("Here9!");
        assert_eq!(*e.last().unwrap(), v.eos());
        assert_eq!(v.decode(&e), "Here9!");
        assert_eq!(v.encode("é"), vec![v.unk(), v.eos()]);
    }

    #[test]
    fn serde_roundtrip_and_duplicates() {
        let v = CharVocab::new(vec!['a', 'b']).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<CharVocab>(&json).unwrap(), v);
        assert!(CharVocab::new(vec!['a', 'a']).is_err());
    }
}
