//! Gold-vs-prediction disagreement reports.
//!
//! Patterns read from the model's side: `false_positive` means the model
//! assigned a label the gold data does not have, `false_negative` means the
//! gold data has a label the model missed.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSet, LabelValue, LabeledDataset};
use crate::error::{Error, Result};
use crate::inference::PredictionSet;
use crate::metrics::ConfusionCounts;

pub const DEFAULT_EXCERPT_CHARS: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Agree,
    FalsePositive,
    FalseNegative,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Agree => "agree",
            Pattern::FalsePositive => "false_positive",
            Pattern::FalseNegative => "false_negative",
        }
    }

    /// `None` when either side is unknown.
    pub fn of(gold: LabelValue, predicted: LabelValue) -> Option<Pattern> {
        match (gold.as_bit()?, predicted.as_bit()?) {
            (g, p) if g == p => Some(Pattern::Agree),
            (0, _) => Some(Pattern::FalsePositive),
            _ => Some(Pattern::FalseNegative),
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agree" => Ok(Pattern::Agree),
            "false_positive" | "fp" => Ok(Pattern::FalsePositive),
            "false_negative" | "fn" => Ok(Pattern::FalseNegative),
            other => Err(Error::config(format!("unknown pattern {other:?}"))),
        }
    }
}

/// Which records a report keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternFilter {
    All,
    DisagreementsOnly,
    /// Records with `pattern` on `label`, or on any label when `None`.
    Only { label: Option<Label>, pattern: Pattern },
}

impl PatternFilter {
    pub fn keeps(&self, record: &DisagreementRecord) -> bool {
        match *self {
            PatternFilter::All => true,
            PatternFilter::DisagreementsOnly => record.patterns.values().any(|p| *p != Pattern::Agree),
            PatternFilter::Only { label: Some(l), pattern } => record.patterns.get(&l) == Some(&pattern),
            PatternFilter::Only { label: None, pattern } => record.patterns.values().any(|p| *p == pattern),
        }
    }
}

impl std::str::FromStr for PatternFilter {
    type Err = Error;
    /// `all`, `disagreements-only`, `<pattern>` or `<label>:<pattern>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(PatternFilter::All),
            "disagreements-only" | "disagreements" => Ok(PatternFilter::DisagreementsOnly),
            _ => match s.split_once(':') {
                Some((l, p)) => Ok(PatternFilter::Only {
                    label: Some(l.parse()?),
                    pattern: p.parse()?,
                }),
                None => Ok(PatternFilter::Only {
                    label: None,
                    pattern: s.parse()?,
                }),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementRecord {
    pub id: String,
    pub excerpt: String,
    pub gold: LabelSet,
    pub predicted: LabelSet,
    /// Only labels where both sides are known.
    pub patterns: BTreeMap<Label, Pattern>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementReport {
    pub records: Vec<DisagreementRecord>,
    /// Over every scored prediction, independent of the filter.
    pub summary: BTreeMap<Label, ConfusionCounts>,
    /// Ids whose gold data has at least two present labels.
    pub multi_label: Vec<String>,
    pub excerpt_chars: Option<usize>,
}

/// Numbers in numeric order before other ids, which sort as strings.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u128>(), b.parse::<u128>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn excerpt(text: &str, limit: Option<usize>) -> String {
    match limit {
        Some(n) if text.chars().count() > n => {
            let mut s: String = text.chars().take(n).collect();
            s.push('…');
            s
        }
        _ => text.to_string(),
    }
}

/// One record per prediction passing `filter`, ordered by comment id.
/// `excerpt_chars = None` keeps full texts.
pub fn disagreement_report(
    gold: &LabeledDataset,
    predictions: &PredictionSet,
    filter: PatternFilter,
    excerpt_chars: Option<usize>,
) -> Result<DisagreementReport> {
    let index: std::collections::HashMap<&str, usize> =
        gold.entries().iter().enumerate().map(|(i, e)| (e.id(), i)).collect();
    let mut summary: BTreeMap<Label, ConfusionCounts> = Label::ALL.iter().map(|&l| (l, ConfusionCounts::default())).collect();
    let mut records = Vec::new();
    let mut multi_label = Vec::new();
    for p in &predictions.predictions {
        let entry = index
            .get(p.id.as_str())
            .map(|&i| &gold.entries()[i])
            .ok_or_else(|| Error::validation(format!("prediction for unknown comment id {}", p.id)))?;
        let predicted = p.label_set();
        let mut patterns = BTreeMap::new();
        for l in Label::ALL {
            let (g, q) = (entry.labels.get(l), predicted.get(l));
            if let Some(pattern) = Pattern::of(g, q) {
                patterns.insert(l, pattern);
                summary.entry(l).or_default().record(q == LabelValue::Present, g == LabelValue::Present);
            }
        }
        if entry.labels.present_count() >= 2 {
            multi_label.push(p.id.clone());
        }
        let record = DisagreementRecord {
            id: p.id.clone(),
            excerpt: excerpt(&entry.comment.text, excerpt_chars),
            gold: entry.labels,
            predicted,
            patterns,
        };
        if filter.keeps(&record) {
            records.push(record);
        }
    }
    records.sort_by(|a, b| compare_ids(&a.id, &b.id));
    multi_label.sort_by(|a, b| compare_ids(a, b));
    Ok(DisagreementReport {
        records,
        summary,
        multi_label,
        excerpt_chars,
    })
}

fn cell(v: LabelValue) -> &'static str {
    match v {
        LabelValue::Present => "1",
        LabelValue::Absent => "0",
        LabelValue::Unknown => "",
    }
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn label_names(set: &LabelSet) -> String {
    let names: Vec<&str> = Label::ALL
        .iter()
        .filter(|&&l| set.get(l) == LabelValue::Present)
        .map(|l| l.key())
        .collect();
    if names.is_empty() {
        "none".into()
    } else {
        names.join("+")
    }
}

impl DisagreementReport {
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "# disagreement report\n\
             # false_positive: model assigns the label, gold does not\n\
             # false_negative: gold has the label, model does not\n\n",
        );
        out.push_str("summary\n");
        for (l, c) in &self.summary {
            let _ = writeln!(
                out,
                "  {:<14} agree {:>5}  false_positive {:>5}  false_negative {:>5}",
                l.key(),
                c.tp + c.tn,
                c.fp,
                c.fn_
            );
        }
        let _ = writeln!(out, "\nrecords ({})", self.records.len());
        for r in &self.records {
            let patterns: Vec<String> = r
                .patterns
                .iter()
                .filter(|(_, p)| **p != Pattern::Agree)
                .map(|(l, p)| format!("{}={}", l.key(), p.as_str()))
                .collect();
            let _ = writeln!(
                out,
                "  [{}] gold {} / predicted {}{}\n    {}",
                r.id,
                label_names(&r.gold),
                label_names(&r.predicted),
                if patterns.is_empty() { String::new() } else { format!("  ({})", patterns.join(", ")) },
                one_line(&r.excerpt)
            );
        }
        let _ = writeln!(out, "\nmulti-label gold ({})", self.multi_label.len());
        for id in &self.multi_label {
            let _ = writeln!(out, "  {id}");
        }
        out
    }

    /// One row per record; pattern cells are empty where a side is unknown.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("comment_id");
        for l in Label::ALL {
            let _ = write!(out, "\tgold_{0}\tpred_{0}\tpattern_{0}", l.key());
        }
        out.push_str("\texcerpt\n");
        for r in &self.records {
            out.push_str(&r.id);
            for l in Label::ALL {
                let _ = write!(
                    out,
                    "\t{}\t{}\t{}",
                    cell(r.gold.get(l)),
                    cell(r.predicted.get(l)),
                    r.patterns.get(&l).map_or("", |p| p.as_str())
                );
            }
            let _ = writeln!(out, "\t{}", one_line(&r.excerpt));
        }
        out
    }
}
