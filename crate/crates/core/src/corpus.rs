//! Labeled comment corpora: loading, writing, and seeded train/validation splits.
//!
//! Files are UTF-8 delimited text with a header row. Label cells hold `0`, `1`,
//! or nothing (unknown). A column that the schema does not name yields
//! `unknown` for that label on every row.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of the shuffle used by [`split`]. Bumped whenever the permutation
/// for a given seed could change.
pub const SPLIT_ALGORITHM: &str = "fisher-yates/chacha8-u64-rejection/v1";

/// One of the three binary subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Toxic,
    Engaging,
    FactClaiming,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Toxic, Label::Engaging, Label::FactClaiming];

    pub fn key(self) -> &'static str {
        match self {
            Label::Toxic => "toxic",
            Label::Engaging => "engaging",
            Label::FactClaiming => "fact_claiming",
        }
    }

    /// Default column header used by the shared-task files.
    pub fn column_name(self) -> &'static str {
        match self {
            Label::Toxic => "Sub1_Toxic",
            Label::Engaging => "Sub2_Engaging",
            Label::FactClaiming => "Sub3_FactClaiming",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Label::Toxic => 0,
            Label::Engaging => 1,
            Label::FactClaiming => 2,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "toxic" | "sub1_toxic" | "sub1" | "1" => Ok(Label::Toxic),
            "engaging" | "sub2_engaging" | "sub2" | "2" => Ok(Label::Engaging),
            "fact_claiming" | "factclaiming" | "fact-claiming" | "sub3_factclaiming" | "sub3"
            | "3" => Ok(Label::FactClaiming),
            _ => Err(Error::config(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelValue {
    Present,
    Absent,
    #[default]
    Unknown,
}

impl LabelValue {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            LabelValue::Present
        } else {
            LabelValue::Absent
        }
    }

    pub fn as_bit(self) -> Option<u8> {
        match self {
            LabelValue::Present => Some(1),
            LabelValue::Absent => Some(0),
            LabelValue::Unknown => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != LabelValue::Unknown
    }
}

/// Independent tri-valued assignment for the three subtasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LabelSet {
    pub toxic: LabelValue,
    pub engaging: LabelValue,
    pub fact_claiming: LabelValue,
}

impl LabelSet {
    pub fn unknown() -> Self {
        Self::default()
    }

    pub fn from_bits(toxic: u8, engaging: u8, fact_claiming: u8) -> Self {
        LabelSet {
            toxic: LabelValue::from_bit(toxic != 0),
            engaging: LabelValue::from_bit(engaging != 0),
            fact_claiming: LabelValue::from_bit(fact_claiming != 0),
        }
    }

    pub fn get(&self, label: Label) -> LabelValue {
        match label {
            Label::Toxic => self.toxic,
            Label::Engaging => self.engaging,
            Label::FactClaiming => self.fact_claiming,
        }
    }

    pub fn set(&mut self, label: Label, value: LabelValue) {
        match label {
            Label::Toxic => self.toxic = value,
            Label::Engaging => self.engaging = value,
            Label::FactClaiming => self.fact_claiming = value,
        }
    }

    pub fn present_count(&self) -> usize {
        Label::ALL
            .iter()
            .filter(|l| self.get(**l) == LabelValue::Present)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub comment: Comment,
    pub labels: LabelSet,
}

impl Entry {
    pub fn new(id: impl Into<String>, text: impl Into<String>, labels: LabelSet) -> Self {
        Entry {
            comment: Comment {
                id: id.into(),
                text: text.into(),
            },
            labels,
        }
    }

    pub fn id(&self) -> &str {
        &self.comment.id
    }
}

/// Ordered, id-unique collection of labeled comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    entries: Vec<Entry>,
    source_tag: String,
}

impl LabeledDataset {
    pub fn new(source_tag: impl Into<String>, entries: Vec<Entry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for entry in &entries {
            if entry.comment.id.is_empty() {
                return Err(Error::validation("empty comment id"));
            }
            if !seen.insert(entry.comment.id.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate comment id {}",
                    entry.comment.id
                )));
            }
        }
        Ok(LabeledDataset {
            entries,
            source_tag: source_tag.into(),
        })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<Entry> {
        self.entries
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.comment.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.comment.id == id)
    }

    pub fn comments(&self) -> Vec<Comment> {
        self.entries.iter().map(|e| e.comment.clone()).collect()
    }

    /// Rows whose text is empty. They are kept, only counted.
    pub fn empty_text_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.comment.text.is_empty())
            .count()
    }
}

/// Column layout and dialect of a delimited corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnSchema {
    pub delimiter: char,
    pub quote: char,
    pub id_column: Option<String>,
    pub text_column: Option<String>,
    pub toxic_column: Option<String>,
    pub engaging_column: Option<String>,
    pub fact_claiming_column: Option<String>,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        ColumnSchema {
            delimiter: ',',
            quote: '"',
            id_column: Some("comment_id".into()),
            text_column: Some("comment_text".into()),
            toxic_column: Some(Label::Toxic.column_name().into()),
            engaging_column: Some(Label::Engaging.column_name().into()),
            fact_claiming_column: Some(Label::FactClaiming.column_name().into()),
        }
    }
}

impl ColumnSchema {
    /// Layout of an exported submission file (no text column).
    pub fn submission(delimiter: char) -> Self {
        ColumnSchema {
            delimiter,
            text_column: None,
            ..ColumnSchema::default()
        }
    }

    /// Default layout without any label columns (test/unlabeled data).
    pub fn unlabeled() -> Self {
        ColumnSchema {
            toxic_column: None,
            engaging_column: None,
            fact_claiming_column: None,
            ..ColumnSchema::default()
        }
    }

    pub fn label_column(&self, label: Label) -> Option<&str> {
        match label {
            Label::Toxic => self.toxic_column.as_deref(),
            Label::Engaging => self.engaging_column.as_deref(),
            Label::FactClaiming => self.fact_claiming_column.as_deref(),
        }
    }

    pub(crate) fn dialect_bytes(&self) -> Result<(u8, u8)> {
        let as_byte = |c: char, what: &str| {
            if c.is_ascii() {
                Ok(c as u8)
            } else {
                Err(Error::config(format!("{what} must be an ASCII character")))
            }
        };
        Ok((as_byte(self.delimiter, "delimiter")?, as_byte(self.quote, "quote")?))
    }
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim_start_matches('\u{feff}') == name)
        .ok_or_else(|| {
            Error::validation(format!(
                "{}: column {name:?} not found in header",
                path.display()
            ))
        })
}

fn parse_label_cell(cell: &str, path: &Path, line: u64, column: &str) -> Result<LabelValue> {
    match cell.trim() {
        "" => Ok(LabelValue::Unknown),
        "0" => Ok(LabelValue::Absent),
        "1" => Ok(LabelValue::Present),
        other => Err(Error::validation(format!(
            "{}:{line}: label cell {other:?} in column {column} is not 0, 1, or empty",
            path.display()
        ))),
    }
}

fn default_source_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}

/// Load a labeled corpus. The source tag defaults to the file stem.
pub fn load_labeled_corpus(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let (delimiter, quote) = schema.dialect_bytes()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .quote(quote)
        .flexible(true)
        .has_headers(true)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .clone();
    let id_idx = schema
        .id_column
        .as_deref()
        .map(|c| column_index(&headers, c, path))
        .transpose()?;
    let text_idx = schema
        .text_column
        .as_deref()
        .map(|c| column_index(&headers, c, path))
        .transpose()?;
    let mut label_idx = Vec::new();
    for label in Label::ALL {
        if let Some(col) = schema.label_column(label) {
            label_idx.push((label, col, column_index(&headers, col, path)?));
        }
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!(
                    "expected {} columns, found {}",
                    headers.len(),
                    record.len()
                ),
            });
        }
        let id = match id_idx {
            Some(i) => record[i].trim().to_string(),
            None => format!("row-{row}"),
        };
        if id.is_empty() {
            return Err(Error::validation(format!(
                "{}:{line}: empty comment id",
                path.display()
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::validation(format!(
                "{}:{line}: duplicate comment id {id}",
                path.display()
            )));
        }
        let text = text_idx.map(|i| record[i].to_string()).unwrap_or_default();
        let mut labels = LabelSet::unknown();
        for &(label, col, idx) in &label_idx {
            labels.set(label, parse_label_cell(&record[idx], path, line, col)?);
        }
        entries.push(Entry {
            comment: Comment { id, text },
            labels,
        });
    }

    let dataset = LabeledDataset {
        entries,
        source_tag: default_source_tag(path),
    };
    let empty = dataset.empty_text_count();
    if empty > 0 && schema.text_column.is_some() {
        warn!("{}: {empty} rows with empty text", path.display());
    }
    Ok(dataset)
}

/// Load comments without labels (ids and text only).
pub fn load_comments(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Vec<Comment>> {
    let schema = ColumnSchema {
        toxic_column: None,
        engaging_column: None,
        fact_claiming_column: None,
        ..schema.clone()
    };
    Ok(load_labeled_corpus(path, &schema)?.comments())
}

pub(crate) fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: err.to_string(),
    }
}

/// Write a dataset using the schema's columns. Unknown labels become empty cells.
pub fn write_labeled_corpus(
    dataset: &LabeledDataset,
    path: impl AsRef<Path>,
    schema: &ColumnSchema,
) -> Result<()> {
    let path = path.as_ref();
    let (delimiter, quote) = schema.dialect_bytes()?;
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .quote(quote)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let id_col = schema.id_column.as_deref().unwrap_or("comment_id");
    let mut header = vec![id_col];
    header.extend(schema.text_column.as_deref());
    let labels: Vec<Label> = Label::ALL
        .into_iter()
        .filter(|l| schema.label_column(*l).is_some())
        .collect();
    header.extend(labels.iter().filter_map(|l| schema.label_column(*l)));
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;

    for entry in &dataset.entries {
        let mut row: Vec<String> = vec![entry.comment.id.clone()];
        if schema.text_column.is_some() {
            row.push(entry.comment.text.clone());
        }
        for label in &labels {
            row.push(
                entry
                    .labels
                    .get(*label)
                    .as_bit()
                    .map(|b| b.to_string())
                    .unwrap_or_default(),
            );
        }
        writer.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A train/validation partition of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub seed: u64,
    pub ratio: f64,
}

/// Number of training entries for `n` items: `floor(ratio * n)`.
///
/// A 1e-9 slack absorbs binary rounding of decimal ratios (0.29 * 100 is
/// 28.999999999999996 in f64 but means 29).
pub fn train_size(n: usize, ratio: f64) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

fn uniform_below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    let zone = (u64::MAX / bound) * bound;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Seeded Fisher–Yates permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

fn check_split_sizes(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::validation(format!("split ratio {ratio} not in (0, 1)")));
    }
    if n < 2 {
        return Err(Error::validation(format!(
            "cannot split {n} entries into two non-empty partitions"
        )));
    }
    let n_train = train_size(n, ratio);
    if n_train == 0 || n_train >= n {
        return Err(Error::validation(format!(
            "ratio {ratio} on {n} entries gives {n_train} train / {} validation; both must be non-empty",
            n - n_train
        )));
    }
    Ok(n_train)
}

/// Deterministic seeded split. The first `floor(ratio * N)` shuffled entries go
/// to train; both partitions keep the input order.
pub fn split(dataset: &LabeledDataset, ratio: f64, seed: u64) -> Result<SplitResult> {
    let n = dataset.len();
    let n_train = check_split_sizes(n, ratio)?;
    let order = seeded_permutation(n, seed);
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    Ok(partition(dataset, &in_train, ratio, seed))
}

fn partition(dataset: &LabeledDataset, in_train: &[bool], ratio: f64, seed: u64) -> SplitResult {
    let (train, validation): (Vec<_>, Vec<_>) = dataset
        .entries
        .iter()
        .zip(in_train)
        .partition(|(_, t)| **t);
    let strip = |v: Vec<(&Entry, &bool)>| v.into_iter().map(|(e, _)| e.clone()).collect();
    SplitResult {
        train: LabeledDataset {
            entries: strip(train),
            source_tag: dataset.source_tag.clone(),
        },
        validation: LabeledDataset {
            entries: strip(validation),
            source_tag: dataset.source_tag.clone(),
        },
        seed,
        ratio,
    }
}

impl SplitResult {
    /// Manifest text: a `# seed=<s> ratio=<r>` header and one validation id per line.
    pub fn manifest(&self) -> String {
        let mut out = format!("# seed={} ratio={}\n", self.seed, self.ratio);
        for id in self.validation.ids() {
            out.push_str(id);
            out.push('\n');
        }
        out
    }

    pub fn manifest_digest(&self) -> String {
        crate::digest_hex(self.manifest().as_bytes())
    }

    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.manifest().as_bytes())
            .map_err(|e| Error::io(path, e))?;
        file.sync_all().map_err(|e| Error::io(path, e))
    }

    /// Rebuild a split from a persisted manifest, independent of the PRNG.
    pub fn from_manifest(dataset: &LabeledDataset, manifest: &str) -> Result<Self> {
        let mut lines = manifest.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::validation("empty split manifest"))?;
        let (seed, ratio) = parse_manifest_header(header)?;
        let mut validation_ids = HashSet::new();
        for id in lines.map(str::trim).filter(|l| !l.is_empty()) {
            if dataset.get(id).is_none() {
                return Err(Error::validation(format!(
                    "split manifest names unknown id {id}"
                )));
            }
            if !validation_ids.insert(id.to_string()) {
                return Err(Error::validation(format!(
                    "split manifest lists id {id} twice"
                )));
            }
        }
        let in_train: Vec<bool> = dataset
            .entries
            .iter()
            .map(|e| !validation_ids.contains(&e.comment.id))
            .collect();
        let result = partition(dataset, &in_train, ratio, seed);
        if result.train.is_empty() || result.validation.is_empty() {
            return Err(Error::validation("split manifest yields an empty partition"));
        }
        Ok(result)
    }

    pub fn read_manifest(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(dataset, &text)
    }
}

fn parse_manifest_header(header: &str) -> Result<(u64, f64)> {
    let bad = || Error::validation(format!("malformed split manifest header {header:?}"));
    let body = header.strip_prefix('#').ok_or_else(bad)?;
    let fields: BTreeMap<&str, &str> = body
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let seed = fields.get("seed").and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let ratio = fields.get("ratio").and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    Ok((seed, ratio))
}

/// Marker words of the synthetic corpus: a label is present exactly when its
/// marker occurs in the text.
pub const SYNTHETIC_MARKERS: [(Label, &str); 3] = [
    (Label::Toxic, "GIFT"),
    (Label::Engaging, "FRAGE"),
    (Label::FactClaiming, "ZAHL"),
];

const FILLER: [&str; 24] = [
    "heute", "wieder", "die", "Politik", "man", "sollte", "nicht", "vergessen", "dass", "alle",
    "Menschen", "hier", "leben", "Sendung", "gestern", "Meinung", "immer", "noch", "gut",
    "schlecht", "Zeit", "Land", "wirklich", "genau",
];

/// `n` deterministic comments with ids `1..=n`. Each marker is inserted with
/// probability 1/2 into 4 to 12 filler words, so toxic (and the two other
/// labels) are linearly separable on a single token.
pub fn synthetic_marker_corpus(n: usize, seed: u64) -> LabeledDataset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (1..=n)
        .map(|id| {
            let len = rng.gen_range(4..=12);
            let mut words: Vec<&str> = (0..len).map(|_| FILLER[rng.gen_range(0..FILLER.len())]).collect();
            let mut labels = LabelSet::from_bits(0, 0, 0);
            for (label, marker) in SYNTHETIC_MARKERS {
                if rng.gen_bool(0.5) {
                    let at = rng.gen_range(0..=words.len());
                    words.insert(at, marker);
                    labels.set(label, LabelValue::Present);
                }
            }
            Entry::new(id.to_string(), words.join(" "), labels)
        })
        .collect();
    LabeledDataset {
        entries,
        source_tag: "synthetic".into(),
    }
}
