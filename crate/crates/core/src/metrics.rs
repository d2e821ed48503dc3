//! Binary precision / recall / F1 over hard decisions.
//!
//! Zero-division convention: any metric whose denominator is zero is 0.0.
//! That includes F1 when precision + recall = 0. A run that never predicts
//! positive therefore scores precision 0, not 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, pred: bool, gold: bool) {
        match (pred, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// Positional pair counting over `{0,1}` sequences.
pub fn confusion(predictions: &[u8], golds: &[u8]) -> Result<ConfusionCounts> {
    if predictions.len() != golds.len() {
        return Err(Error::validation(format!(
            "{} predictions vs {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (i, (&p, &g)) in predictions.iter().zip(golds).enumerate() {
        if p > 1 || g > 1 {
            return Err(Error::validation(format!(
                "position {i}: decisions must be 0 or 1 (got {p}, {g})"
            )));
        }
        counts.record(p == 1, g == 1);
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0.0 when both are 0.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn prf1(counts: &ConfusionCounts) -> Prf1 {
    let precision = ratio(counts.tp, counts.tp + counts.fp);
    let recall = ratio(counts.tp, counts.tp + counts.fn_);
    Prf1 {
        precision,
        recall,
        f1: f1_from_pr(precision, recall),
    }
}

/// Arithmetic mean of per-label F1.
pub fn macro_f1<K>(per_label_f1: &BTreeMap<K, f64>) -> Result<f64> {
    if per_label_f1.is_empty() {
        return Err(Error::validation("macro F1 over zero labels"));
    }
    Ok(per_label_f1.values().sum::<f64>() / per_label_f1.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl LabelMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let Prf1 {
            precision,
            recall,
            f1,
        } = prf1(&counts);
        LabelMetrics {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label: BTreeMap<Label, LabelMetrics>,
    pub macro_f1: f64,
    pub evaluated_count: usize,
}

impl MetricsReport {
    /// Score `predicted` against `gold` on `labels`. Pairs whose gold (or
    /// prediction) is unknown are skipped; labels with no known gold are left
    /// out of the report and of the macro average.
    pub fn evaluate(gold: &[LabelSet], predicted: &[LabelSet], labels: &[Label]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::validation(format!(
                "{} gold rows vs {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        let mut per_label = BTreeMap::new();
        let mut evaluated = vec![false; gold.len()];
        for &label in labels {
            let mut counts = ConfusionCounts::default();
            for (i, (g, p)) in gold.iter().zip(predicted).enumerate() {
                if let (Some(g), Some(p)) = (g.get(label).as_bit(), p.get(label).as_bit()) {
                    counts.record(p == 1, g == 1);
                    evaluated[i] = true;
                }
            }
            if counts.total() > 0 {
                per_label.insert(label, LabelMetrics::from_counts(counts));
            }
        }
        let f1s: BTreeMap<Label, f64> = per_label.iter().map(|(l, m)| (*l, m.f1)).collect();
        let macro_f1 = macro_f1(&f1s)
            .map_err(|_| Error::validation("no known gold labels to evaluate"))?;
        Ok(MetricsReport {
            per_label,
            macro_f1,
            evaluated_count: evaluated.iter().filter(|e| **e).count(),
        })
    }

    pub fn f1(&self, label: Label) -> Option<f64> {
        self.per_label.get(&label).map(|m| m.f1)
    }

    /// `label.precision`, `label.recall`, `label.f1`, counts, `macro_f1`, `evaluated_count`.
    pub fn to_flat(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (label, m) in &self.per_label {
            let k = label.key();
            out.insert(format!("{k}.precision"), m.precision);
            out.insert(format!("{k}.recall"), m.recall);
            out.insert(format!("{k}.f1"), m.f1);
            out.insert(format!("{k}.tp"), m.counts.tp as f64);
            out.insert(format!("{k}.fp"), m.counts.fp as f64);
            out.insert(format!("{k}.fn"), m.counts.fn_ as f64);
            out.insert(format!("{k}.tn"), m.counts.tn as f64);
        }
        out.insert("macro_f1".into(), self.macro_f1);
        out.insert("evaluated_count".into(), self.evaluated_count as f64);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            flat.get(k)
                .copied()
                .ok_or_else(|| Error::validation(format!("metrics record lacks {k}")))
        };
        let mut per_label = BTreeMap::new();
        for label in Label::ALL {
            let k = label.key();
            if !flat.contains_key(&format!("{k}.f1")) {
                continue;
            }
            let counts = ConfusionCounts {
                tp: get(&format!("{k}.tp"))? as u64,
                fp: get(&format!("{k}.fp"))? as u64,
                fn_: get(&format!("{k}.fn"))? as u64,
                tn: get(&format!("{k}.tn"))? as u64,
            };
            per_label.insert(
                label,
                LabelMetrics {
                    precision: get(&format!("{k}.precision"))?,
                    recall: get(&format!("{k}.recall"))?,
                    f1: get(&format!("{k}.f1"))?,
                    counts,
                },
            );
        }
        Ok(MetricsReport {
            per_label,
            macro_f1: get("macro_f1")?,
            evaluated_count: get("evaluated_count")? as usize,
        })
    }
}
