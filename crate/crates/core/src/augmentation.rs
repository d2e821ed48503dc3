//! Merging external offensive-language corpora into the toxic label.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneSpec;
use crate::corpus::{self, Entry, LabelSet, LabelValue, LabeledDataset, SplitResult};
use crate::error::{Error, Result};
use crate::tracking::{RunRecord, RunStore};
use crate::training::{self, TrainConfig};

/// One row of an external corpus, keeping its original label string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalEntry {
    pub id: String,
    pub text: String,
    pub source_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalDataset {
    pub source_tag: String,
    pub entries: Vec<ExternalEntry>,
}

/// Layout of an external corpus file. Without a header, columns are named by
/// 0-based position (`"0"`, `"1"`, ...). The default matches the tab-separated,
/// headerless, unquoted `text<TAB>coarse<TAB>fine` layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalSchema {
    pub delimiter: char,
    pub has_header: bool,
    pub quoting: bool,
    pub id_column: Option<String>,
    pub text_column: String,
    pub label_column: String,
}

impl Default for ExternalSchema {
    fn default() -> Self {
        ExternalSchema {
            delimiter: '\t',
            has_header: false,
            quoting: false,
            id_column: None,
            text_column: "0".into(),
            label_column: "1".into(),
        }
    }
}

/// Load an external corpus; rows without an id column get ids `row-<k>`.
pub fn load_external(path: impl AsRef<Path>, schema: &ExternalSchema, source_tag: Option<&str>) -> Result<ExternalDataset> {
    let path = path.as_ref();
    if !schema.delimiter.is_ascii() {
        return Err(Error::config("delimiter must be an ASCII character"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .quoting(schema.quoting)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(file);
    let headers: Vec<String> = if schema.has_header {
        reader
            .headers()
            .map_err(|e| corpus::csv_error(path, e))?
            .iter()
            .map(|h| h.trim_start_matches('\u{feff}').to_string())
            .collect()
    } else {
        Vec::new()
    };
    let column = |name: &str| -> Result<usize> {
        if schema.has_header {
            headers.iter().position(|h| h == name)
        } else {
            name.parse().ok()
        }
        .ok_or_else(|| Error::validation(format!("{}: no column {name:?}", path.display())))
    };
    let id_idx = schema.id_column.as_deref().map(column).transpose()?;
    let text_idx = column(&schema.text_column)?;
    let label_idx = column(&schema.label_column)?;
    let needed = id_idx.unwrap_or(0).max(text_idx).max(label_idx) + 1;

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| corpus::csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < needed {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line,
                msg: format!("expected at least {needed} columns, found {}", record.len()),
            });
        }
        let id = id_idx.map_or_else(|| format!("row-{row}"), |i| record[i].trim().to_string());
        if id.is_empty() || !seen.insert(id.clone()) {
            return Err(Error::validation(format!("{}:{line}: empty or duplicate id {id:?}", path.display())));
        }
        entries.push(ExternalEntry {
            id,
            text: record[text_idx].to_string(),
            source_label: record[label_idx].trim().to_string(),
        });
    }
    let source_tag = source_tag.map(str::to_string).unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| "external".into(), |s| s.to_string_lossy().into_owned())
    });
    Ok(ExternalDataset { source_tag, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingTarget {
    ToxicPresent,
    ToxicAbsent,
    Drop,
}

impl std::str::FromStr for MappingTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toxic_present" => Ok(MappingTarget::ToxicPresent),
            "toxic_absent" => Ok(MappingTarget::ToxicAbsent),
            "drop" => Ok(MappingTarget::Drop),
            other => Err(Error::validation(format!(
                "mapping target {other:?} is not toxic_present, toxic_absent or drop"
            ))),
        }
    }
}

/// Source label name to target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelMapping(pub BTreeMap<String, MappingTarget>);

impl LabelMapping {
    /// `source_label<TAB>target` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_string(),
                line: i as u64 + 1,
                msg,
            };
            let (source, target) = line
                .split_once('\t')
                .ok_or_else(|| err("expected source_label<TAB>target".into()))?;
            let target: MappingTarget = target.trim().parse().map_err(|e: Error| err(e.to_string()))?;
            if map.insert(source.trim().to_string(), target).is_some() {
                return Err(err(format!("source label {source:?} mapped twice")));
            }
        }
        Ok(LabelMapping(map))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub base_count: usize,
    pub external_count: usize,
    pub toxic_present: usize,
    pub toxic_absent: usize,
    pub drop_count: usize,
    pub merged_count: usize,
}

impl MergeReport {
    pub fn mapped_count(&self) -> usize {
        self.toxic_present + self.toxic_absent
    }

    /// base + mapped = merged, mapped + dropped = external.
    pub fn reconciles(&self) -> bool {
        self.base_count + self.mapped_count() == self.merged_count
            && self.mapped_count() + self.drop_count == self.external_count
    }
}

/// Id an external entry receives in a merged dataset.
pub fn prefixed_id(source_tag: &str, id: &str) -> String {
    format!("{source_tag}:{id}")
}

/// Append the mapped external rows to `base`. Merged rows carry only a toxic
/// value; engaging and fact_claiming stay unknown.
pub fn merge_external(
    base: &LabeledDataset,
    external: &ExternalDataset,
    mapping: &LabelMapping,
) -> Result<(LabeledDataset, MergeReport)> {
    let unmapped: BTreeSet<&str> = external
        .entries
        .iter()
        .map(|e| e.source_label.as_str())
        .filter(|l| !mapping.0.contains_key(*l))
        .collect();
    if !unmapped.is_empty() {
        return Err(Error::validation(format!(
            "unmapped source labels in {}: {}",
            external.source_tag,
            unmapped.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut entries = base.entries().to_vec();
    let mut report = MergeReport {
        base_count: base.len(),
        external_count: external.entries.len(),
        toxic_present: 0,
        toxic_absent: 0,
        drop_count: 0,
        merged_count: 0,
    };
    for e in &external.entries {
        let toxic = match mapping.0[&e.source_label] {
            MappingTarget::Drop => {
                report.drop_count += 1;
                continue;
            }
            MappingTarget::ToxicPresent => {
                report.toxic_present += 1;
                LabelValue::Present
            }
            MappingTarget::ToxicAbsent => {
                report.toxic_absent += 1;
                LabelValue::Absent
            }
        };
        let mut labels = LabelSet::unknown();
        labels.toxic = toxic;
        entries.push(Entry::new(prefixed_id(&external.source_tag, &e.id), e.text.clone(), labels));
    }
    report.merged_count = entries.len();
    let merged = LabeledDataset::new(format!("{}+{}", base.source_tag(), external.source_tag), entries)
        .map_err(|e| Error::validation(format!("{e}; was {} merged already?", external.source_tag)))?;
    Ok((merged, report))
}

/// Baseline and augmented splits over one base split: the augmented train set
/// is the baseline train set plus the external rows, the validation set is
/// shared and holds base entries only.
#[derive(Debug, Clone)]
pub struct PairedSplit {
    pub baseline: SplitResult,
    pub augmented: SplitResult,
    pub report: MergeReport,
    pub external_ids: BTreeSet<String>,
}

pub fn paired_splits(
    base: &LabeledDataset,
    external: &ExternalDataset,
    mapping: &LabelMapping,
    ratio: f64,
    seed: u64,
) -> Result<PairedSplit> {
    let baseline = corpus::split(base, ratio, seed)?;
    let (train, report) = merge_external(&baseline.train, external, mapping)?;
    let external_ids = external
        .entries
        .iter()
        .map(|e| prefixed_id(&external.source_tag, &e.id))
        .collect();
    let augmented = SplitResult {
        train,
        validation: baseline.validation.clone(),
        seed,
        ratio,
    };
    let paired = PairedSplit {
        baseline,
        augmented,
        report,
        external_ids,
    };
    paired.check()?;
    Ok(paired)
}

impl PairedSplit {
    /// Validation is base-only and identical on both arms; baseline training
    /// entries are a bit-exact prefix of the augmented ones.
    pub fn check(&self) -> Result<()> {
        if let Some(id) = self
            .augmented
            .validation
            .ids()
            .find(|id| self.external_ids.contains(*id))
        {
            return Err(Error::validation(format!("external id {id} in validation split")));
        }
        if self.augmented.validation.entries() != self.baseline.validation.entries() {
            return Err(Error::validation("paired runs disagree on the validation split"));
        }
        let base = self.baseline.train.entries();
        if self.augmented.train.entries().get(..base.len()) != Some(base) {
            return Err(Error::validation("augmented training set does not preserve base entries"));
        }
        if !self.report.reconciles() {
            return Err(Error::validation(format!("merge report does not reconcile: {:?}", self.report)));
        }
        Ok(())
    }
}

/// Run both arms with the same config and seed.
pub fn run_paired(
    paired: &PairedSplit,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
) -> Result<(RunRecord, RunRecord)> {
    let (_, baseline) = training::fine_tune(&paired.baseline, spec, config, store)?;
    let (_, augmented) = training::fine_tune(&paired.augmented, spec, config, store)?;
    Ok((baseline, augmented))
}
