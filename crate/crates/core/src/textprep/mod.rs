//! Text normalization and the tokenizer adapter boundary.
//!
//! Every backbone owns a [`Tokenizer`]: a [`NormalizationPolicy`] applied to the
//! raw text followed by a subword model. Three subword models are built in:
//!
//! * [`TinyTokenizer`]: whitespace words with byte fallback, fitted from a
//!   corpus or read from a `token<TAB>id` file. Used by the desk-scale backbone.
//! * [`WordPieceTokenizer`]: BERT/ELECTRA style `vocab.txt`.
//! * [`ByteBpeTokenizer`]: GPT-2 style `vocab.json` + `merges.txt`.

mod bpe;
mod tiny;
mod wordpiece;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use bpe::ByteBpeTokenizer;
pub use tiny::TinyTokenizer;
pub use wordpiece::WordPieceTokenizer;

use crate::backbones::BackboneSpec;
use crate::error::{Error, Result};

/// Sharp s stays `ß` under lowercasing; it is never expanded to `ss`.
pub const SHARP_S_POLICY: &str = "keep";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationPolicy {
    #[default]
    Identity,
    LowercaseKeepAccents,
}

impl fmt::Display for NormalizationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizationPolicy::Identity => "identity",
            NormalizationPolicy::LowercaseKeepAccents => "lowercase_keep_accents",
        })
    }
}

pub fn normalize(text: &str, policy: NormalizationPolicy) -> String {
    match policy {
        NormalizationPolicy::Identity => text.to_string(),
        // `str::to_lowercase` maps Ä→ä, ẞ→ß and leaves ß, digits, emoji alone;
        // no decomposition happens, so diacritics survive.
        NormalizationPolicy::LowercaseKeepAccents => text.to_lowercase(),
    }
}

/// Token ids plus attention mask. Positions with mask 0 hold the pad id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub truncated: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().map(|&m| m as usize).sum()
    }

    /// Right-pads to `len` with `pad_id`. No-op when already that long.
    pub fn padded_to(&self, len: usize, pad_id: u32) -> TokenSequence {
        let mut out = self.clone();
        if out.ids.len() < len {
            out.ids.resize(len, pad_id);
            out.attention_mask.resize(len, 0);
        }
        out
    }
}

/// A right-padded batch laid out row-major as `batch x seq_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn from_sequences(seqs: &[TokenSequence], pad_id: u32) -> TokenBatch {
        let seq_len = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let p = s.padded_to(seq_len, pad_id);
            ids.extend_from_slice(&p.ids);
            mask.extend_from_slice(&p.attention_mask);
        }
        TokenBatch {
            ids,
            mask,
            batch: seqs.len(),
            seq_len,
        }
    }

    pub fn row_mask(&self, b: usize) -> &[u8] {
        &self.mask[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Special-token layout of a subword model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub prefix: Vec<u32>,
    pub suffix: Vec<u32>,
}

/// The adapter boundary for subword models.
pub trait SubwordModel: Send + Sync {
    /// Content token ids for already-normalized text; never out of vocabulary.
    fn encode_content(&self, text: &str) -> Vec<u32>;
    fn specials(&self) -> Specials;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// Whitespace + byte fallback; vocabulary fitted from the training corpus
    /// unless `vocab` points at a `token<TAB>id` file.
    Tiny,
    WordPiece,
    ByteBpe,
}

/// Where a backbone's vocabulary lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSource {
    pub kind: TokenizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merges: Option<PathBuf>,
    /// SHA-256 over the vocab file bytes followed by the merges file bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

impl TokenizerSource {
    pub fn tiny() -> Self {
        TokenizerSource {
            kind: TokenizerKind::Tiny,
            vocab: None,
            merges: None,
            checksum: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubwordVocab {
    Tiny(TinyTokenizer),
    WordPiece(WordPieceTokenizer),
    ByteBpe(ByteBpeTokenizer),
}

impl SubwordVocab {
    fn model(&self) -> &dyn SubwordModel {
        match self {
            SubwordVocab::Tiny(t) => t,
            SubwordVocab::WordPiece(t) => t,
            SubwordVocab::ByteBpe(t) => t,
        }
    }
}

/// Normalization policy plus subword model. Immutable once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    pub policy: NormalizationPolicy,
    pub vocab: SubwordVocab,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::config(format!("vocabulary file {} unreadable: {e}", path.display()))
    })
}

impl Tokenizer {
    pub fn new(policy: NormalizationPolicy, vocab: SubwordVocab) -> Self {
        Tokenizer { policy, vocab }
    }

    /// Load from vocabulary files. The tiny kind without a file has no
    /// vocabulary yet and must be fitted with [`Tokenizer::fit_tiny`].
    pub fn load(source: &TokenizerSource, policy: NormalizationPolicy) -> Result<Tokenizer> {
        let vocab_path = source.vocab.as_deref().ok_or_else(|| {
            Error::config(format!("{:?} tokenizer needs a vocabulary file", source.kind))
        })?;
        let vocab_bytes = read_file(vocab_path)?;
        let merges_bytes = match (&source.merges, source.kind) {
            (Some(p), _) => Some(read_file(p)?),
            (None, TokenizerKind::ByteBpe) => {
                return Err(Error::config("byte_bpe tokenizer needs a merges file"))
            }
            (None, _) => None,
        };
        if let Some(expected) = &source.checksum {
            let mut all = vocab_bytes.clone();
            if let Some(m) = &merges_bytes {
                all.extend_from_slice(m);
            }
            let actual = crate::digest_hex(&all);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(Error::config(format!(
                    "vocabulary checksum mismatch for {}: expected {expected}, found {actual}",
                    vocab_path.display()
                )));
            }
        }
        let vocab_text = String::from_utf8(vocab_bytes)
            .map_err(|_| Error::config(format!("{} is not UTF-8", vocab_path.display())))?;
        let vocab = match source.kind {
            TokenizerKind::Tiny => SubwordVocab::Tiny(TinyTokenizer::parse(&vocab_text)?),
            TokenizerKind::WordPiece => {
                SubwordVocab::WordPiece(WordPieceTokenizer::parse(&vocab_text)?)
            }
            TokenizerKind::ByteBpe => {
                let merges = String::from_utf8(merges_bytes.unwrap_or_default())
                    .map_err(|_| Error::config("merges file is not UTF-8"))?;
                SubwordVocab::ByteBpe(ByteBpeTokenizer::parse(&vocab_text, &merges)?)
            }
        };
        Ok(Tokenizer { policy, vocab })
    }

    /// Fit a tiny vocabulary on normalized training texts.
    pub fn fit_tiny<'a>(
        policy: NormalizationPolicy,
        texts: impl IntoIterator<Item = &'a str>,
        max_words: usize,
    ) -> Tokenizer {
        let normalized: Vec<String> = texts.into_iter().map(|t| normalize(t, policy)).collect();
        let tiny = TinyTokenizer::fit(normalized.iter().map(String::as_str), max_words);
        Tokenizer {
            policy,
            vocab: SubwordVocab::Tiny(tiny),
        }
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab.model().specials().pad
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.model().vocab_size()
    }

    /// Normalize, subword-encode, wrap in special tokens, truncate to `max_len`.
    /// The result is unpadded (mask all ones).
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence> {
        let model = self.vocab.model();
        let specials = model.specials();
        let overhead = specials.prefix.len() + specials.suffix.len();
        if max_len <= overhead {
            return Err(Error::config(format!(
                "max_len {max_len} leaves no room beyond {overhead} special tokens"
            )));
        }
        let mut content = model.encode_content(&normalize(text, self.policy));
        let budget = max_len - overhead;
        let truncated = content.len() > budget;
        content.truncate(budget);
        let mut ids = specials.prefix;
        ids.extend(content);
        ids.extend(specials.suffix);
        let attention_mask = vec![1; ids.len()];
        Ok(TokenSequence {
            ids,
            attention_mask,
            truncated,
        })
    }

    pub fn encode_batch(&self, texts: &[&str], max_len: usize) -> Result<TokenBatch> {
        let seqs = texts
            .iter()
            .map(|t| self.encode(t, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenBatch::from_sequences(&seqs, self.pad_id()))
    }
}

/// Load the backbone's tokenizer from its vocabulary files and encode `text`.
pub fn tokenize(text: &str, backbone: &BackboneSpec, max_len: usize) -> Result<TokenSequence> {
    if max_len > backbone.max_positions {
        return Err(Error::config(format!(
            "max_len {max_len} exceeds {} positions of {}",
            backbone.max_positions, backbone.name
        )));
    }
    Tokenizer::load(&backbone.tokenizer, backbone.casing)?.encode(text, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_is_unchanged() {
        let s = "Er MUSS der Politik in den Hintern kriechen…";
        assert_eq!(normalize(s, NormalizationPolicy::Identity), s);
    }

    #[test]
    fn lowercase_keeps_umlauts() {
        assert_eq!(
            normalize("Über ÄRGER", NormalizationPolicy::LowercaseKeepAccents),
            "über ärger"
        );
        assert_eq!(
            normalize("ABC123 😀", NormalizationPolicy::LowercaseKeepAccents),
            "abc123 😀"
        );
        assert_eq!(
            normalize("STRAẞE Straße", NormalizationPolicy::LowercaseKeepAccents),
            "straße straße"
        );
        assert_eq!(
            normalize("CAFÉ Ñ", NormalizationPolicy::LowercaseKeepAccents),
            "café ñ"
        );
    }

    fn tiny_ab() -> Tokenizer {
        let tiny = TinyTokenizer::parse("a\t5\nb\t6\n").unwrap();
        Tokenizer::new(NormalizationPolicy::Identity, SubwordVocab::Tiny(tiny))
    }

    #[test]
    fn tiny_hand_enumeration() {
        let seq = tiny_ab().encode("a b a", 16).unwrap();
        assert_eq!(seq.ids, vec![1, 5, 6, 5, 2]);
        assert!(!seq.truncated);
    }

    #[test]
    fn empty_text_gives_only_specials() {
        let seq = tiny_ab().encode("", 16).unwrap();
        assert_eq!(seq.ids, vec![1, 2]);
        assert!(!seq.truncated);
    }

    #[test]
    fn long_text_truncates_to_max_len() {
        let text = vec!["a"; 50].join(" ");
        let seq = tiny_ab().encode(&text, 10).unwrap();
        assert_eq!(seq.len(), 10);
        assert!(seq.truncated);
        assert_eq!(*seq.ids.last().unwrap(), 2);
    }

    #[test]
    fn padding_fills_pad_id_and_zero_mask() {
        let t = tiny_ab();
        let seq = t.encode("a", 8).unwrap().padded_to(6, t.pad_id());
        assert_eq!(seq.ids, vec![1, 5, 2, 0, 0, 0]);
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(seq.real_len(), 3);
    }

    #[test]
    fn missing_vocab_is_config_error() {
        let source = TokenizerSource {
            kind: TokenizerKind::WordPiece,
            vocab: Some("/nonexistent/vocab.txt".into()),
            merges: None,
            checksum: None,
        };
        let err = Tokenizer::load(&source, NormalizationPolicy::Identity).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn checksum_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        std::fs::write(&path, "a\t5\n").unwrap();
        let mut source = TokenizerSource {
            kind: TokenizerKind::Tiny,
            vocab: Some(path.clone()),
            merges: None,
            checksum: Some(crate::digest_hex(b"a\t5\n")),
        };
        assert!(Tokenizer::load(&source, NormalizationPolicy::Identity).is_ok());
        source.checksum = Some("00".repeat(32));
        assert!(matches!(
            Tokenizer::load(&source, NormalizationPolicy::Identity),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            for policy in [NormalizationPolicy::Identity, NormalizationPolicy::LowercaseKeepAccents] {
                let once = normalize(&s, policy);
                prop_assert_eq!(normalize(&once, policy), once.clone());
            }
        }

        #[test]
        fn german_lowercase_preserves_codepoint_count(s in "[a-zA-ZäöüÄÖÜßẞ .,!?0-9]{0,60}") {
            let lowered = normalize(&s, NormalizationPolicy::LowercaseKeepAccents);
            prop_assert_eq!(lowered.chars().count(), s.chars().count());
        }

        #[test]
        fn encode_respects_max_len(words in proptest::collection::vec("[a-c]{1,3}|😀|ü", 0..40), max_len in 3usize..20) {
            let t = tiny_ab();
            let text = words.join(" ");
            let seq = t.encode(&text, max_len).unwrap();
            prop_assert!(seq.len() <= max_len);
            prop_assert_eq!(seq.real_len(), seq.len());
            prop_assert!(seq.ids.iter().all(|&id| (id as usize) < t.vocab_size()));
        }
    }
}
