//! Probabilities and decisions for unlabeled comments, run selection, and
//! submission export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Comment, Label, LabelSet, LabelValue};
use crate::error::{Error, Result};
use crate::tracking::{self, Metric, RunFilter, RunRecord};
use crate::training::{decide, FittedModel};

/// Models to predict with: one joint model, or one model per subtask.
pub enum ModelSet {
    Joint(FittedModel),
    PerSubtask(BTreeMap<Label, FittedModel>),
}

impl ModelSet {
    /// Group loaded models by their output labels.
    pub fn from_models(mut models: Vec<FittedModel>) -> Result<Self> {
        if models.len() == 1 && models[0].labels.len() == Label::ALL.len() {
            return Ok(ModelSet::Joint(models.remove(0)));
        }
        let mut map = BTreeMap::new();
        for m in models {
            let [label] = m.labels[..] else {
                return Err(Error::config(format!(
                    "model {} has {} outputs; expected one joint model or single-label models",
                    m.run_id,
                    m.labels.len()
                )));
            };
            if map.insert(label, m).is_some() {
                return Err(Error::config(format!("two models given for {label}")));
            }
        }
        Ok(ModelSet::PerSubtask(map))
    }

    pub fn run_ids(&self) -> Vec<String> {
        match self {
            ModelSet::Joint(m) => vec![m.run_id.clone()],
            ModelSet::PerSubtask(map) => map.values().map(|m| m.run_id.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub probabilities: BTreeMap<Label, f64>,
    pub decisions: BTreeMap<Label, u8>,
}

impl Prediction {
    /// Decisions as a label set; labels without a decision are unknown.
    pub fn label_set(&self) -> LabelSet {
        let mut set = LabelSet::unknown();
        for (&l, &d) in &self.decisions {
            set.set(l, LabelValue::from_bit(d == 1));
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub threshold: f64,
    pub run_ids: Vec<String>,
    /// In input-comment order.
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn get(&self, id: &str) -> Option<&Prediction> {
        self.predictions.iter().find(|p| p.id == id)
    }
}

/// Sigmoid probabilities and `p >= threshold` decisions for every comment.
pub fn predict(models: &ModelSet, comments: &[Comment], threshold: f64) -> Result<PredictionSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold {threshold} not in (0, 1)")));
    }
    let texts: Vec<&str> = comments.iter().map(|c| c.text.as_str()).collect();
    let mut probs: Vec<BTreeMap<Label, f64>> = vec![BTreeMap::new(); comments.len()];
    let mut absorb = |model: &FittedModel| -> Result<()> {
        for (row, p) in model.probabilities(&texts)?.into_iter().enumerate() {
            for (&l, v) in model.labels.iter().zip(p) {
                probs[row].insert(l, v);
            }
        }
        Ok(())
    };
    match models {
        ModelSet::Joint(m) => {
            if m.labels.len() != Label::ALL.len() {
                return Err(Error::config(format!("joint model {} has {} outputs", m.run_id, m.labels.len())));
            }
            absorb(m)?;
        }
        ModelSet::PerSubtask(map) => {
            if let Some(missing) = Label::ALL.iter().find(|l| !map.contains_key(l)) {
                return Err(Error::config(format!("no model for subtask {missing}")));
            }
            for (label, m) in map {
                if m.labels != [*label] {
                    return Err(Error::config(format!("model {} does not predict {label}", m.run_id)));
                }
                absorb(m)?;
            }
        }
    }
    let predictions = comments
        .iter()
        .zip(probs)
        .map(|(c, probabilities)| Prediction {
            id: c.id.clone(),
            decisions: probabilities.iter().map(|(&l, &p)| (l, decide(p, threshold))).collect(),
            probabilities,
        })
        .collect();
    Ok(PredictionSet {
        threshold,
        run_ids: models.run_ids(),
        predictions,
    })
}

/// Top `k` runs by best validation `metric`: a prefix of the
/// [`tracking::compare_runs`] order, restricted to runs that have a value.
pub fn select_top_runs(runs: &[RunRecord], metric: Metric, k: usize) -> Result<Vec<RunRecord>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    Ok(tracking::compare_runs(runs, &RunFilter::default(), metric)
        .into_iter()
        .take_while(|row| row.best.is_some())
        .take(k)
        .filter_map(|row| runs.iter().find(|r| r.run_id == row.run_id).cloned())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionFormat {
    #[default]
    Csv,
    Tsv,
}

impl SubmissionFormat {
    pub fn delimiter(self) -> char {
        match self {
            SubmissionFormat::Csv => ',',
            SubmissionFormat::Tsv => '\t',
        }
    }
}

impl std::str::FromStr for SubmissionFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(SubmissionFormat::Csv),
            "tsv" => Ok(SubmissionFormat::Tsv),
            other => Err(Error::config(format!("unknown submission format {other:?}"))),
        }
    }
}

/// Render the submission file in memory.
pub fn submission_bytes(predictions: &PredictionSet, format: SubmissionFormat) -> Result<Vec<u8>> {
    let sep = format.delimiter();
    let mut out = String::from("comment_id");
    for l in Label::ALL {
        out.push(sep);
        out.push_str(l.column_name());
    }
    out.push('\n');
    for p in &predictions.predictions {
        if p.id.contains([sep, '"', '\n', '\r']) {
            return Err(Error::validation(format!("comment id {:?} cannot be written unquoted", p.id)));
        }
        out.push_str(&p.id);
        for l in Label::ALL {
            let d = p.decisions.get(&l).ok_or_else(|| {
                Error::validation(format!("comment {} has no decision for {}", p.id, l.column_name()))
            })?;
            out.push(sep);
            out.push(if *d == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    Ok(out.into_bytes())
}

/// Write `comment_id,Sub1_Toxic,Sub2_Engaging,Sub3_FactClaiming` rows in input order.
pub fn export_submission(predictions: &PredictionSet, path: &Path, format: SubmissionFormat) -> Result<()> {
    let bytes = submission_bytes(predictions, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
