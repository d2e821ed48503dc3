use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{Specials, SubwordModel};
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
const FIRST_WORD_ID: u32 = 3;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[SEP]"];

/// Whitespace word vocabulary with UTF-8 byte fallback.
///
/// Ids 0..3 are `[PAD] [CLS] [SEP]`. Word ids come from the vocabulary; the 256
/// byte tokens follow the largest word id, so any input is encodable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TinyVocabFile", into = "TinyVocabFile")]
pub struct TinyTokenizer {
    words: HashMap<String, u32>,
    byte_base: u32,
}

#[derive(Serialize, Deserialize)]
struct TinyVocabFile {
    words: BTreeMap<String, u32>,
}

impl From<TinyVocabFile> for TinyTokenizer {
    fn from(f: TinyVocabFile) -> Self {
        TinyTokenizer::from_words(f.words.into_iter().collect())
    }
}

impl From<TinyTokenizer> for TinyVocabFile {
    fn from(t: TinyTokenizer) -> Self {
        TinyVocabFile {
            words: t.words.into_iter().collect(),
        }
    }
}

impl TinyTokenizer {
    fn from_words(words: HashMap<String, u32>) -> Self {
        let max_id = words.values().copied().max().unwrap_or(SEP_ID).max(SEP_ID);
        TinyTokenizer {
            words,
            byte_base: max_id + 1,
        }
    }

    /// Parse `token<TAB>id` lines. Reserved special names may appear only at
    /// their fixed ids.
    pub fn parse(text: &str) -> Result<Self> {
        let mut words = HashMap::new();
        let mut used = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |msg: &str| Error::config(format!("tiny vocab line {}: {msg}", lineno + 1));
            let (token, id) = line.split_once('\t').ok_or_else(|| corrupt("expected token<TAB>id"))?;
            let id: u32 = id.trim().parse().map_err(|_| corrupt("id is not an integer"))?;
            if let Some(pos) = RESERVED.iter().position(|r| *r == token) {
                if id != pos as u32 {
                    return Err(corrupt("special token at a non-reserved id"));
                }
                continue;
            }
            if id < FIRST_WORD_ID {
                return Err(corrupt("ids 0..3 are reserved"));
            }
            if let Some(prev) = used.insert(id, token.to_string()) {
                return Err(corrupt(&format!("id {id} already used by {prev:?}")));
            }
            if words.insert(token.to_string(), id).is_some() {
                return Err(corrupt(&format!("duplicate token {token:?}")));
            }
        }
        Ok(Self::from_words(words))
    }

    /// Most frequent words first, ties by byte order; at most `max_words`.
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = ranked
            .into_iter()
            .take(max_words)
            .enumerate()
            .map(|(i, (w, _))| (w.to_string(), FIRST_WORD_ID + i as u32))
            .collect();
        Self::from_words(words)
    }

    /// `token<TAB>id` lines sorted by id.
    pub fn to_vocab_file(&self) -> String {
        let mut entries: Vec<(&String, &u32)> = self.words.iter().collect();
        entries.sort_by_key(|(_, id)| **id);
        entries
            .into_iter()
            .map(|(w, id)| format!("{w}\t{id}\n"))
            .collect()
    }

    pub fn word_id(&self, word: &str) -> Option<u32> {
        self.words.get(word).copied()
    }
}

impl SubwordModel for TinyTokenizer {
    fn encode_content(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.words.get(word) {
                Some(&id) => ids.push(id),
                None => ids.extend(word.bytes().map(|b| self.byte_base + b as u32)),
            }
        }
        ids
    }

    fn specials(&self) -> Specials {
        Specials {
            pad: PAD_ID,
            prefix: vec![CLS_ID],
            suffix: vec![SEP_ID],
        }
    }

    fn vocab_size(&self) -> usize {
        self.byte_base as usize + 256
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_fallback_for_unknown_words() {
        let t = TinyTokenizer::parse("a\t5\n").unwrap();
        assert_eq!(t.byte_base, 6);
        let ids = t.encode_content("a 😀");
        assert_eq!(ids[0], 5);
        let bytes: Vec<u32> = "😀".bytes().map(|b| 6 + b as u32).collect();
        assert_eq!(&ids[1..], bytes.as_slice());
    }

    #[test]
    fn fit_orders_by_frequency() {
        let t = TinyTokenizer::fit(["b a a", "c a b"], 10);
        assert_eq!(t.word_id("a"), Some(3));
        assert_eq!(t.word_id("b"), Some(4));
        assert_eq!(t.word_id("c"), Some(5));
        let back = TinyTokenizer::parse(&t.to_vocab_file()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_vocab_rejected() {
        assert!(TinyTokenizer::parse("a 5\n").is_err());
        assert!(TinyTokenizer::parse("a\tx\n").is_err());
        assert!(TinyTokenizer::parse("a\t1\n").is_err());
        assert!(TinyTokenizer::parse("a\t5\nb\t5\n").is_err());
        assert!(TinyTokenizer::parse("[PAD]\t0\na\t3\n").is_ok());
    }
}
