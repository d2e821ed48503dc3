use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Specials, SubwordModel};
use crate::error::{Error, Result};

const MAX_CHARS_PER_WORD: usize = 100;

/// Greedy longest-match-first WordPiece over a BERT-style `vocab.txt`
/// (one token per line, id = line number). Unmatchable words map to `[UNK]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "WordPieceFile", into = "WordPieceFile")]
pub struct WordPieceTokenizer {
    vocab: HashMap<String, u32>,
    tokens: Vec<String>,
    pad: u32,
    unk: u32,
    cls: u32,
    sep: u32,
}

#[derive(Serialize, Deserialize)]
struct WordPieceFile {
    tokens: Vec<String>,
}

impl From<WordPieceFile> for WordPieceTokenizer {
    fn from(f: WordPieceFile) -> Self {
        // Serialized form was produced from a validated tokenizer.
        WordPieceTokenizer::from_tokens(f.tokens).expect("validated wordpiece vocabulary")
    }
}

impl From<WordPieceTokenizer> for WordPieceFile {
    fn from(t: WordPieceTokenizer) -> Self {
        WordPieceFile { tokens: t.tokens }
    }
}

impl WordPieceTokenizer {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            vocab.entry(t.clone()).or_insert(i as u32);
        }
        let special = |name: &str| {
            vocab
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("wordpiece vocab lacks {name}")))
        };
        Ok(WordPieceTokenizer {
            pad: special("[PAD]")?,
            unk: special("[UNK]")?,
            cls: special("[CLS]")?,
            sep: special("[SEP]")?,
            vocab,
            tokens,
        })
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_CHARS_PER_WORD {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let from = chars[start].0;
                let to = chars.get(end).map(|c| c.0).unwrap_or(word.len());
                let piece = &word[from..to];
                let key = if start > 0 {
                    format!("##{piece}")
                } else {
                    piece.to_string()
                };
                if let Some(&id) = self.vocab.get(&key) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

/// Whitespace split, then every punctuation or symbol char becomes its own word.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in chunk.char_indices() {
            if c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace()) {
                if start < i {
                    words.push(&chunk[start..i]);
                }
                words.push(&chunk[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < chunk.len() {
            words.push(&chunk[start..]);
        }
    }
    words
}

impl SubwordModel for WordPieceTokenizer {
    fn encode_content(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in pre_tokenize(text) {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn specials(&self) -> Specials {
        Specials {
            pad: self.pad,
            prefix: vec![self.cls],
            suffix: vec![self.sep],
        }
    }

    fn vocab_size(&self) -> usize {
        self.tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> WordPieceTokenizer {
        WordPieceTokenizer::parse("[PAD]\n[UNK]\n[CLS]\n[SEP]\nspiel\n##platz\n##e\nber\n##lin\n,\n").unwrap()
    }

    #[test]
    fn greedy_longest_match() {
        let t = vocab();
        assert_eq!(t.encode_content("spielplatz"), vec![4, 5]);
        assert_eq!(t.encode_content("spiele, berlin"), vec![4, 6, 9, 7, 8]);
    }

    #[test]
    fn unmatched_word_is_unk() {
        let t = vocab();
        assert_eq!(t.encode_content("xyz spiel"), vec![1, 4]);
        assert_eq!(t.encode_content("😀"), vec![1]);
    }

    #[test]
    fn missing_specials_rejected() {
        assert!(WordPieceTokenizer::parse("[PAD]\n[CLS]\n[SEP]\n").is_err());
    }
}
