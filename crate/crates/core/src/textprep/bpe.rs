use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Specials, SubwordModel};
use crate::error::{Error, Result};

const END_OF_TEXT: &str = "<|endoftext|>";

/// GPT-2 byte-level BPE (`vocab.json` + `merges.txt`).
///
/// Sequences start with `<|endoftext|>`, which doubles as the pad token, so the
/// empty string still has one real position to pool from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "BpeFile", into = "BpeFile")]
pub struct ByteBpeTokenizer {
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    byte_chars: [char; 256],
    eot: u32,
}

#[derive(Serialize, Deserialize)]
struct BpeFile {
    vocab: HashMap<String, u32>,
    merges: Vec<(String, String)>,
}

impl From<BpeFile> for ByteBpeTokenizer {
    fn from(f: BpeFile) -> Self {
        ByteBpeTokenizer::build(f.vocab, f.merges).expect("validated bpe vocabulary")
    }
}

impl From<ByteBpeTokenizer> for BpeFile {
    fn from(t: ByteBpeTokenizer) -> Self {
        BpeFile {
            vocab: t.vocab,
            merges: t.merges,
        }
    }
}

/// GPT-2's reversible byte → printable char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut n = 0u32;
    for b in 0..=255u32 {
        let printable = (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            n += 1;
            char::from_u32(255 + n).unwrap()
        };
    }
    table
}

impl ByteBpeTokenizer {
    pub fn parse(vocab_json: &str, merges_txt: &str) -> Result<Self> {
        let vocab: HashMap<String, u32> = serde_json::from_str(vocab_json)
            .map_err(|e| Error::config(format!("bpe vocab.json corrupt: {e}")))?;
        let mut merges = Vec::new();
        for (i, line) in merges_txt.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || (i == 0 && line.starts_with("#version")) {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::config(format!("bpe merges line {}: expected two symbols", i + 1)))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::build(vocab, merges)
    }

    fn build(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let byte_chars = bytes_to_unicode();
        if let Some(c) = byte_chars.iter().find(|c| !vocab.contains_key(&c.to_string())) {
            return Err(Error::config(format!(
                "bpe vocab lacks byte symbol {c:?}; not a byte-level vocabulary"
            )));
        }
        let eot = *vocab
            .get(END_OF_TEXT)
            .ok_or_else(|| Error::config(format!("bpe vocab lacks {END_OF_TEXT}")))?;
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(ByteBpeTokenizer {
            vocab,
            merges,
            ranks,
            byte_chars,
            eot,
        })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word
            .bytes()
            .map(|b| self.byte_chars[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Number,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphabetic() {
        CharClass::Letter
    } else if c.is_numeric() {
        CharClass::Number
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// GPT-2 pre-tokenization:
/// `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map(|c| c.0).unwrap_or(text.len());
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let rest = &text[chars[i].0..];
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(**c)) {
            out.push(&rest[..c.len()]);
            i += c.chars().count();
            continue;
        }
        let (c, cls) = (chars[i].1, class_of(chars[i].1));
        // Optional single leading space before a letter/number/other run.
        let (run_start, first) = if c == ' ' && i + 1 < chars.len() && class_of(chars[i + 1].1) != CharClass::Space {
            (i, i + 1)
        } else {
            (i, i)
        };
        let first_cls = class_of(chars[first].1);
        if first_cls != CharClass::Space {
            let mut j = first + 1;
            while j < chars.len() && class_of(chars[j].1) == first_cls {
                j += 1;
            }
            out.push(&text[chars[run_start].0..end_of(j)]);
            i = j;
            continue;
        }
        debug_assert!(cls == CharClass::Space);
        let mut j = i + 1;
        while j < chars.len() && class_of(chars[j].1) == CharClass::Space {
            j += 1;
        }
        if j == chars.len() || j - i == 1 {
            out.push(&text[chars[i].0..end_of(j)]);
            i = j;
        } else {
            // Leave the last whitespace char for the next token.
            out.push(&text[chars[i].0..end_of(j - 1)]);
            i = j - 1;
        }
    }
    out
}

impl SubwordModel for ByteBpeTokenizer {
    fn encode_content(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            for sym in self.bpe(word) {
                match self.vocab.get(&sym) {
                    Some(&id) => ids.push(id),
                    // Merged symbol missing from vocab: spell it out bytewise.
                    None => ids.extend(sym.chars().map(|c| self.vocab[&c.to_string()])),
                }
            }
        }
        ids
    }

    fn specials(&self) -> Specials {
        Specials {
            pad: self.eot,
            prefix: vec![self.eot],
            suffix: vec![],
        }
    }

    fn vocab_size(&self) -> usize {
        self.vocab.values().copied().max().map_or(0, |m| m as usize + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ByteBpeTokenizer {
        let table = bytes_to_unicode();
        let mut vocab: HashMap<String, u32> = table
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as u32))
            .collect();
        let g = table[b' ' as usize];
        for (i, t) in ["ha", "hal", "lo", "hallo", &format!("{g}hallo")].iter().enumerate() {
            vocab.insert(t.to_string(), 256 + i as u32);
        }
        vocab.insert(END_OF_TEXT.into(), 300);
        let merges = format!("#version: 0.2\nh a\nha l\nl o\nhal lo\n{g} hallo\n");
        ByteBpeTokenizer::parse(&serde_json::to_string(&vocab).unwrap(), &merges).unwrap()
    }

    #[test]
    fn pre_tokenizer_matches_gpt2_pattern() {
        assert_eq!(pre_tokenize("Hallo Welt!"), vec!["Hallo", " Welt", "!"]);
        assert_eq!(pre_tokenize("it's  2021"), vec!["it", "'s", " ", " 2021"]);
        assert_eq!(pre_tokenize("a\n\nb "), vec!["a", "\n", "\n", "b", " "]);
        assert_eq!(pre_tokenize("über 😀"), vec!["über", " 😀"]);
    }

    #[test]
    fn merges_apply_by_rank() {
        let t = toy();
        assert_eq!(t.encode_content("hallo hallo"), vec![259, 260]);
    }

    #[test]
    fn emoji_falls_back_to_bytes() {
        let t = toy();
        let ids = t.encode_content("😀");
        assert_eq!(ids.len(), 4);
        // Byte symbol ids in the toy vocab equal the byte values.
        let expected: Vec<u32> = "😀".bytes().map(u32::from).collect();
        assert_eq!(ids, expected);
    }

    #[test]
    fn non_byte_level_vocab_rejected() {
        assert!(ByteBpeTokenizer::parse("{\"a\": 0}", "").is_err());
    }
}
