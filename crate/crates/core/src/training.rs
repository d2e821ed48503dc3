//! Fine-tuning loop, optimizers, and overfitting detection.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Precision, Tensor};
use crate::backbones::checkpoint::{self, NamedTensor};
use crate::backbones::{
    Backbone, BackboneSpec, Classifier, ClassifierHead, HeadInit, TransformerConfig,
    TransformerWeights, WeightLoader,
};
use crate::corpus::{Label, LabelSet, LabelValue, LabeledDataset, SplitResult};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::textprep::{TokenBatch, TokenSequence, Tokenizer, TokenizerKind};
use crate::tracking::{self, DataKind, DataRef, Event, RunRecord, RunStatus, RunStore};

/// Probability at or above which a decision is positive.
pub const DECISION_THRESHOLD: f64 = 0.5;

pub const HEAD_INIT_STD: f32 = 0.02;

const TINY_VOCAB_WORDS: usize = 20_000;
const EVAL_BATCH: usize = 64;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `p >= threshold` is positive.
pub fn decide(probability: f64, threshold: f64) -> u8 {
    u8::from(probability >= threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "adafactor")]
    Adafactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PerSubtask(Label),
    JointMultilabel,
}

impl TrainMode {
    /// Output labels, in logit-column order.
    pub fn labels(self) -> Vec<Label> {
        match self {
            TrainMode::PerSubtask(l) => vec![l],
            TrainMode::JointMultilabel => Label::ALL.to_vec(),
        }
    }
}

impl Default for TrainMode {
    fn default() -> Self {
        TrainMode::PerSubtask(Label::Toxic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub precision: Precision,
    pub seed: u64,
    pub mode: TrainMode,
    pub max_len: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            epochs: 3,
            batch_size: 16,
            optimizer: OptimizerKind::AdamW,
            precision: Precision::Fp32,
            seed: 42,
            mode: TrainMode::default(),
            max_len: 512,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and >= 0"));
        }
        if self.max_len < 3 || self.max_len > spec.max_positions {
            return Err(Error::config(format!(
                "max_len {} outside 3..={} for {}",
                self.max_len, spec.max_positions, spec.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<MetricsReport>,
}

/// User-driven hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
    pub batch_size: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            learning_rates: vec![1e-5, 2e-5, 5e-5],
            epochs: vec![2, 3, 4],
            batch_size: 16,
        }
    }
}

impl SweepGrid {
    /// Learning rate outer, epochs inner.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        self.learning_rates
            .iter()
            .flat_map(|&lr| {
                self.epochs.iter().map(move |&epochs| TrainConfig {
                    learning_rate: lr,
                    epochs,
                    batch_size: self.batch_size,
                    ..base.clone()
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Optimizers. State is kept in f32 regardless of compute precision.

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32, shapes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[(usize, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (idx, g) in grads {
            let p = &mut params[*idx].data;
            let (m, v) = (&mut self.m[*idx], &mut self.v[*idx]);
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = p[i] * decay - self.lr * update;
            }
        }
    }
}

/// Adafactor with factored second moments for matrices, no momentum, update
/// clipping at RMS 1, and an explicit (non-relative) learning rate.
#[derive(Debug, Clone)]
pub struct Adafactor {
    pub lr: f32,
    pub weight_decay: f32,
    pub eps: f32,
    pub clip_threshold: f32,
    pub decay_rate: f32,
    step: i32,
    state: Vec<FactorState>,
}

#[derive(Debug, Clone)]
enum FactorState {
    Factored { row: Vec<f32>, col: Vec<f32> },
    Full(Vec<f32>),
}

impl Adafactor {
    pub fn new(lr: f32, weight_decay: f32, shapes: &[(usize, usize)]) -> Self {
        Adafactor {
            lr,
            weight_decay,
            eps: 1e-30,
            clip_threshold: 1.0,
            decay_rate: -0.8,
            step: 0,
            state: shapes
                .iter()
                .map(|&(r, c)| {
                    if r >= 2 && c >= 2 {
                        FactorState::Factored {
                            row: vec![0.0; r],
                            col: vec![0.0; c],
                        }
                    } else {
                        FactorState::Full(vec![0.0; r * c])
                    }
                })
                .collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[(usize, Tensor)]) {
        self.step += 1;
        let beta2 = 1.0 - (self.step as f32).powf(self.decay_rate);
        for (idx, g) in grads {
            let (rows, cols) = g.shape();
            let mut update = vec![0.0f32; g.data.len()];
            match &mut self.state[*idx] {
                FactorState::Factored { row, col } => {
                    for r in 0..rows {
                        let mean = (0..cols).map(|c| g.get(r, c).powi(2) + self.eps).sum::<f32>() / cols as f32;
                        row[r] = beta2 * row[r] + (1.0 - beta2) * mean;
                    }
                    for c in 0..cols {
                        let mean = (0..rows).map(|r| g.get(r, c).powi(2) + self.eps).sum::<f32>() / rows as f32;
                        col[c] = beta2 * col[c] + (1.0 - beta2) * mean;
                    }
                    let row_mean = row.iter().sum::<f32>() / rows as f32;
                    for r in 0..rows {
                        let rf = (row[r] / row_mean).sqrt().recip();
                        for c in 0..cols {
                            update[r * cols + c] = g.get(r, c) * rf * col[c].sqrt().recip();
                        }
                    }
                }
                FactorState::Full(v) => {
                    for i in 0..v.len() {
                        v[i] = beta2 * v[i] + (1.0 - beta2) * (g.data[i].powi(2) + self.eps);
                        update[i] = g.data[i] / v[i].sqrt();
                    }
                }
            }
            let rms = (update.iter().map(|u| u * u).sum::<f32>() / update.len() as f32).sqrt();
            let clip = (rms / self.clip_threshold).max(1.0);
            let decay = 1.0 - self.lr * self.weight_decay;
            let p = &mut params[*idx].data;
            for i in 0..p.len() {
                p[i] = p[i] * decay - self.lr * (update[i] / clip);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    AdamW(AdamW),
    Adafactor(Adafactor),
}

impl Optimizer {
    pub fn new(config: &TrainConfig, params: &[&Tensor]) -> Self {
        let (lr, wd) = (config.learning_rate as f32, config.weight_decay as f32);
        match config.optimizer {
            OptimizerKind::AdamW => {
                Optimizer::AdamW(AdamW::new(lr, wd, &params.iter().map(|p| p.len()).collect::<Vec<_>>()))
            }
            OptimizerKind::Adafactor => {
                Optimizer::Adafactor(Adafactor::new(lr, wd, &params.iter().map(|p| p.shape()).collect::<Vec<_>>()))
            }
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[(usize, Tensor)]) {
        match self {
            Optimizer::AdamW(o) => o.step(params, grads),
            Optimizer::Adafactor(o) => o.step(params, grads),
        }
    }
}

// ---------------------------------------------------------------------------
// Loss.

/// Targets and cell weights for `labels` in logit-column order; unknown gold
/// values get weight 0.
pub fn targets_and_weights(golds: &[&LabelSet], labels: &[Label]) -> (Tensor, Tensor) {
    let mut targets = Tensor::zeros(golds.len(), labels.len());
    let mut weights = Tensor::zeros(golds.len(), labels.len());
    for (r, g) in golds.iter().enumerate() {
        for (c, &l) in labels.iter().enumerate() {
            if let Some(bit) = g.get(l).as_bit() {
                targets.data[r * labels.len() + c] = bit as f32;
                weights.data[r * labels.len() + c] = 1.0;
            }
        }
    }
    (targets, weights)
}

/// Masked mean BCE of one batch and the gradients of every parameter slot.
pub fn loss_and_gradients(
    classifier: &Classifier,
    batch: &TokenBatch,
    targets: &Tensor,
    weights: &Tensor,
    precision: Precision,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let mut graph = Graph::new(precision);
    let logits = classifier.build_logits(&mut graph, batch, dropout)?;
    let (loss_var, loss) = graph.bce_with_logits(logits, targets, weights);
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    Ok((loss, graph.backward(loss_var)))
}

/// Evaluation-mode loss of one batch (no dropout, no gradients).
pub fn batch_loss(
    classifier: &Classifier,
    batch: &TokenBatch,
    targets: &Tensor,
    weights: &Tensor,
    precision: Precision,
) -> Result<f64> {
    let mut graph = Graph::new(precision);
    let logits = classifier.build_logits(&mut graph, batch, None)?;
    Ok(graph.bce_with_logits(logits, targets, weights).1)
}

fn probabilities(
    classifier: &Classifier,
    seqs: &[TokenSequence],
    pad: u32,
    precision: Precision,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_sequences(chunk, pad);
        let mut graph = Graph::new(precision);
        let logits = classifier.build_logits(&mut graph, &batch, None)?;
        let z = graph.value(logits);
        for r in 0..z.rows {
            out.push(z.row(r).iter().map(|&x| sigmoid(x as f64)).collect());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fitted models.

/// A trained classifier together with the tokenizer it was trained with.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub classifier: Classifier,
    pub tokenizer: Tokenizer,
    /// Label of each logit column.
    pub labels: Vec<Label>,
    pub max_len: usize,
    pub precision: Precision,
    pub run_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: u32,
    run_id: String,
    labels: Vec<Label>,
    max_len: usize,
    precision: Precision,
    backbone: BackboneSpec,
    tokenizer: Tokenizer,
    weights_sha256: String,
}

const MODEL_JSON: &str = "model.json";
const WEIGHTS_BIN: &str = "weights.bin";

impl FittedModel {
    pub fn encode(&self, texts: &[&str]) -> Result<Vec<TokenSequence>> {
        texts.iter().map(|t| self.tokenizer.encode(t, self.max_len)).collect()
    }

    /// Sigmoid probability per text and output column.
    pub fn probabilities(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        probabilities(&self.classifier, &self.encode(texts)?, self.tokenizer.pad_id(), self.precision)
    }

    /// Write `model.json` and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let head = [
            ("head.weight", &self.classifier.head.weight),
            ("head.bias", &self.classifier.head.bias),
        ];
        let digest = checkpoint::write_tensors(
            &dir.join(WEIGHTS_BIN),
            self.classifier.backbone.weights.named().chain(head),
        )?;
        let file = ModelFile {
            format: 1,
            run_id: self.run_id.clone(),
            labels: self.labels.clone(),
            max_len: self.max_len,
            precision: self.precision,
            backbone: self.classifier.backbone.spec.clone(),
            tokenizer: self.tokenizer.clone(),
            weights_sha256: digest,
        };
        let path = dir.join(MODEL_JSON);
        std::fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_JSON);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let file: ModelFile = serde_json::from_slice(&bytes)?;
        if file.format != 1 {
            return Err(Error::validation(format!("{}: unsupported model format {}", path.display(), file.format)));
        }
        let tensors = checkpoint::read_verified(&dir.join(WEIGHTS_BIN), Some(&file.weights_sha256))?;
        let (head, body): (Vec<NamedTensor>, Vec<NamedTensor>) =
            tensors.into_iter().partition(|t| t.name.starts_with("head."));
        let config = TransformerConfig::from_spec(&file.backbone, file.tokenizer.vocab_size())?;
        let weights = TransformerWeights::from_named(&config, body)?;
        let take = |name: &str| {
            head.iter()
                .find(|t| t.name == name)
                .map(|t| t.tensor.clone())
                .ok_or_else(|| Error::validation(format!("{} lacks {name}", dir.display())))
        };
        let (weight, bias) = (take("head.weight")?, take("head.bias")?);
        if weight.shape() != (config.dim, file.labels.len()) || bias.shape() != (1, file.labels.len()) {
            return Err(Error::validation(format!("{}: head shape does not match labels", dir.display())));
        }
        let head = ClassifierHead {
            input_dim: config.dim,
            num_labels: file.labels.len(),
            weight,
            bias,
        };
        let backbone = Backbone {
            spec: file.backbone,
            config,
            weights,
        };
        Ok(FittedModel {
            classifier: Classifier::new(backbone, head)?,
            tokenizer: file.tokenizer,
            labels: file.labels,
            max_len: file.max_len,
            precision: file.precision,
            run_id: file.run_id,
        })
    }
}

// ---------------------------------------------------------------------------
// Training runs.

/// Knobs that are not part of the recorded configuration.
#[derive(Default, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Checked before every batch; when set the run stops as `partial`.
    pub interrupt: Option<&'a AtomicBool>,
    pub loaders: &'a [&'a dyn WeightLoader],
    /// Fixed run id instead of a generated one.
    pub run_id: Option<&'a str>,
}

/// Independent RNG stream `k` of the master seed.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

const STREAM_BACKBONE: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// Build the tokenizer a run uses: the spec's vocabulary files, or for the
/// tiny kind without files a vocabulary fitted on the training texts.
pub fn tokenizer_for(spec: &BackboneSpec, train_texts: &[&str]) -> Result<Tokenizer> {
    if spec.tokenizer.kind == TokenizerKind::Tiny && spec.tokenizer.vocab.is_none() {
        Ok(Tokenizer::fit_tiny(spec.casing, train_texts.iter().copied(), TINY_VOCAB_WORDS))
    } else {
        Tokenizer::load(&spec.tokenizer, spec.casing)
    }
}

/// Fresh classifier for `spec`, initialized from `seed`.
pub fn init_classifier(
    spec: &BackboneSpec,
    vocab_size: usize,
    num_labels: usize,
    seed: u64,
    loaders: &[&dyn WeightLoader],
) -> Result<Classifier> {
    let backbone = Backbone::load(spec, vocab_size, stream(seed, STREAM_BACKBONE).next_u64(), loaders)?;
    let head = ClassifierHead::new(
        backbone.config.dim,
        num_labels,
        HeadInit::Normal {
            std: HEAD_INIT_STD,
            seed: stream(seed, STREAM_HEAD).next_u64(),
        },
    )?;
    Classifier::new(backbone, head)
}

/// Train on `split.train`, evaluating on `split.validation` after every epoch.
pub fn fine_tune(
    split: &SplitResult,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
) -> Result<(FittedModel, RunRecord)> {
    fine_tune_with(split, spec, config, store, TrainOptions::default())
}

pub fn fine_tune_with(
    split: &SplitResult,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
    options: TrainOptions<'_>,
) -> Result<(FittedModel, RunRecord)> {
    let data = DataRef {
        kind: DataKind::SplitManifest,
        digest: split.manifest_digest(),
        train_digest: dataset_digest(&split.train),
        path: None,
    };
    run(&split.train, Some(&split.validation), data, spec, config, store, options)
}

/// Train on every entry of `dataset` with no validation pass.
pub fn train_on_full_data(
    dataset: &LabeledDataset,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
) -> Result<(FittedModel, RunRecord)> {
    train_on_full_data_with(dataset, spec, config, store, TrainOptions::default())
}

pub fn train_on_full_data_with(
    dataset: &LabeledDataset,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
    options: TrainOptions<'_>,
) -> Result<(FittedModel, RunRecord)> {
    let data = DataRef {
        kind: DataKind::FullData,
        digest: dataset_digest(dataset),
        train_digest: dataset_digest(dataset),
        path: None,
    };
    run(dataset, None, data, spec, config, store, options)
}

/// One full-data per-subtask run for each of the three labels.
pub fn train_full_per_subtask(
    dataset: &LabeledDataset,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
) -> Result<Vec<(FittedModel, RunRecord)>> {
    Label::ALL
        .iter()
        .map(|&l| {
            let cfg = TrainConfig {
                mode: TrainMode::PerSubtask(l),
                ..config.clone()
            };
            train_on_full_data(dataset, spec, &cfg, store)
        })
        .collect()
}

/// Digest over ids, texts and labels in order.
pub fn dataset_digest(dataset: &LabeledDataset) -> String {
    let mut buf = Vec::new();
    for e in dataset.entries() {
        buf.extend_from_slice(e.id().as_bytes());
        buf.push(0);
        buf.extend_from_slice(e.comment.text.as_bytes());
        buf.push(0);
        for l in Label::ALL {
            buf.push(match e.labels.get(l) {
                LabelValue::Present => b'1',
                LabelValue::Absent => b'0',
                LabelValue::Unknown => b'?',
            });
        }
        buf.push(b'\n');
    }
    crate::digest_hex(&buf)
}

fn run(
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    data: DataRef,
    spec: &BackboneSpec,
    config: &TrainConfig,
    store: &RunStore,
    options: TrainOptions<'_>,
) -> Result<(FittedModel, RunRecord)> {
    spec.validate()?;
    config.validate(spec)?;
    let labels = config.mode.labels();

    let usable: Vec<&crate::corpus::Entry> = train
        .entries()
        .iter()
        .filter(|e| labels.iter().any(|&l| e.labels.get(l).is_known()))
        .collect();
    let excluded = train.len() - usable.len();
    if excluded > 0 {
        log::warn!("{excluded} training entries have no known value for {labels:?} and are excluded");
    }
    if usable.is_empty() {
        return Err(Error::validation("no training entry has a known target label"));
    }
    if let Some(v) = validation {
        if !v.entries().iter().any(|e| labels.iter().any(|&l| e.labels.get(l).is_known())) {
            return Err(Error::validation("validation split has no known gold value for the target labels"));
        }
    }

    let texts: Vec<&str> = usable.iter().map(|e| e.comment.text.as_str()).collect();
    let tokenizer = tokenizer_for(spec, &texts)?;
    let seqs: Vec<TokenSequence> = texts
        .iter()
        .map(|t| tokenizer.encode(t, config.max_len))
        .collect::<Result<_>>()?;
    let val_seqs: Vec<TokenSequence> = match validation {
        Some(v) => v
            .entries()
            .iter()
            .map(|e| tokenizer.encode(&e.comment.text, config.max_len))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let mut classifier = init_classifier(spec, tokenizer.vocab_size(), labels.len(), config.seed, options.loaders)?;
    let mut optimizer = Optimizer::new(config, &classifier.parameters());

    let run_id = options
        .run_id
        .map(str::to_string)
        .unwrap_or_else(|| tracking::new_run_id(&spec.name));
    store.append(&Event::RunCreated {
        run_id: run_id.clone(),
        backbone: spec.name.clone(),
        content_hash: tracking::content_hash(config, &spec.name, &data)?,
        config: config.clone(),
        data,
        started: tracking::now_timestamp(),
    })?;
    let finish = |status: RunStatus, reason: Option<String>| {
        store.append(&Event::RunFinished {
            run_id: run_id.clone(),
            status,
            finished: tracking::now_timestamp(),
            reason,
        })
    };

    let mut shuffle_rng = stream(config.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream(config.seed, STREAM_DROPOUT);
    let pad = tokenizer.pad_id();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut skipped_steps = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut cells) = (0.0f64, 0.0f64);
        for chunk in order.chunks(config.batch_size) {
            if options.interrupt.is_some_and(|f| f.load(Ordering::SeqCst)) {
                finish(RunStatus::Partial, Some(format!("interrupted during epoch {epoch}")))?;
                return Err(Error::Interrupted { run_id, epoch });
            }
            let batch_seqs: Vec<TokenSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let golds: Vec<&LabelSet> = chunk.iter().map(|&i| &usable[i].labels).collect();
            let batch = TokenBatch::from_sequences(&batch_seqs, pad);
            let (targets, weights) = targets_and_weights(&golds, &labels);
            let (loss, grads) = loss_and_gradients(
                &classifier,
                &batch,
                &targets,
                &weights,
                config.precision,
                Some(&mut dropout_rng),
            )?;
            let grads_finite = grads.iter().all(|(_, g)| g.is_finite());
            if !loss.is_finite() || (!grads_finite && config.precision == Precision::Fp32) {
                finish(RunStatus::Diverged, Some(format!("non-finite loss in epoch {epoch}")))?;
                return Err(Error::Diverged { run_id, epoch });
            }
            let n: f64 = weights.data.iter().map(|&w| w as f64).sum();
            loss_sum += loss * n;
            cells += n;
            if grads_finite {
                optimizer.step(&mut classifier.parameters_mut(), &grads);
            } else {
                skipped_steps += 1;
            }
        }
        if !classifier.parameters().iter().all(|p| p.is_finite()) {
            finish(RunStatus::Diverged, Some(format!("non-finite parameters after epoch {epoch}")))?;
            return Err(Error::Diverged { run_id, epoch });
        }
        let report = match validation {
            Some(v) => Some(evaluate(&classifier, v, &val_seqs, pad, &labels, config.precision)?),
            None => None,
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: if cells > 0.0 { loss_sum / cells } else { 0.0 },
            validation: report,
        };
        log::info!(
            "{run_id} epoch {epoch}: loss {:.5}{}",
            metrics.train_loss,
            metrics
                .validation
                .as_ref()
                .map(|r| format!(", validation macro F1 {:.4}", r.macro_f1))
                .unwrap_or_default()
        );
        store.append(&Event::Epoch {
            run_id: run_id.clone(),
            metrics,
        })?;
    }
    if skipped_steps > 0 {
        log::warn!("{run_id}: {skipped_steps} fp16 steps skipped on gradient overflow");
    }
    finish(RunStatus::Completed, None)?;
    let record = store.get(&run_id)?;
    Ok((
        FittedModel {
            classifier,
            tokenizer,
            labels,
            max_len: config.max_len,
            precision: config.precision,
            run_id,
        },
        record,
    ))
}

fn evaluate(
    classifier: &Classifier,
    validation: &LabeledDataset,
    seqs: &[TokenSequence],
    pad: u32,
    labels: &[Label],
    precision: Precision,
) -> Result<MetricsReport> {
    let probs = probabilities(classifier, seqs, pad, precision)?;
    let predicted: Vec<LabelSet> = probs
        .iter()
        .map(|p| {
            let mut set = LabelSet::unknown();
            for (c, &l) in labels.iter().enumerate() {
                set.set(l, LabelValue::from_bit(decide(p[c], DECISION_THRESHOLD) == 1));
            }
            set
        })
        .collect();
    let gold: Vec<LabelSet> = validation.entries().iter().map(|e| e.labels).collect();
    MetricsReport::evaluate(&gold, &predicted, labels)
}

// ---------------------------------------------------------------------------
// Overfitting.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverfitSignal {
    pub overfitting: bool,
    /// 1-based epoch of the maximum score, earliest on ties.
    pub best_epoch: usize,
}

/// Flag when each of the last `patience` scores is strictly below its predecessor.
pub fn detect_overfitting_scores(scores: &[f64], patience: usize) -> Result<OverfitSignal> {
    if scores.is_empty() || patience == 0 {
        return Err(Error::validation("overfitting check needs a non-empty history and patience >= 1"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let n = scores.len();
    let overfitting = n > patience && (n - patience..n).all(|i| scores[i] < scores[i - 1]);
    Ok(OverfitSignal {
        overfitting,
        best_epoch: best + 1,
    })
}

/// [`detect_overfitting_scores`] over validation macro F1.
pub fn detect_overfitting(history: &[EpochMetrics], patience: usize) -> Result<OverfitSignal> {
    let scores = history
        .iter()
        .map(|e| {
            e.validation
                .as_ref()
                .map(|r| r.macro_f1)
                .ok_or_else(|| Error::validation(format!("epoch {} has no validation report", e.epoch)))
        })
        .collect::<Result<Vec<_>>>()?;
    detect_overfitting_scores(&scores, patience)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::tiny_test_spec;
    use crate::corpus::{split, synthetic_marker_corpus};

    fn tiny_config(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs,
            batch_size: 16,
            max_len: 64,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn store() -> (tempfile::TempDir, RunStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = RunStore::open(dir.path().join("runs.jsonl")).unwrap();
        (dir, s)
    }

    #[test]
    fn overfitting_examples() {
        let s = detect_overfitting_scores(&[0.60, 0.70, 0.68, 0.65], 2).unwrap();
        assert_eq!(s, OverfitSignal { overfitting: true, best_epoch: 2 });
        let s = detect_overfitting_scores(&[0.5, 0.6, 0.7, 0.8], 2).unwrap();
        assert_eq!(s, OverfitSignal { overfitting: false, best_epoch: 4 });
        let s = detect_overfitting_scores(&[0.4], 1).unwrap();
        assert_eq!(s, OverfitSignal { overfitting: false, best_epoch: 1 });
        assert!(!detect_overfitting_scores(&[0.70, 0.68, 0.68], 2).unwrap().overfitting);
        assert_eq!(detect_overfitting_scores(&[0.7, 0.6, 0.7], 1).unwrap().best_epoch, 1);
        assert!(detect_overfitting_scores(&[], 1).is_err());
    }

    #[test]
    fn sweep_grid_cardinality() {
        let grid = SweepGrid {
            learning_rates: vec![1e-5, 2e-5, 5e-5],
            epochs: vec![2, 3],
            batch_size: 16,
        };
        assert_eq!(grid.configs(&TrainConfig::default()).len(), 6);
        assert_eq!(SweepGrid::default().configs(&TrainConfig::default()).len(), 9);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            mode: TrainMode::JointMultilabel,
            optimizer: OptimizerKind::Adafactor,
            precision: Precision::Fp16,
            ..TrainConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert!(text.contains("optimizer = \"adafactor\""));
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
        let per: TrainConfig = toml::from_str(
            "learning_rate = 1e-3\nepochs = 2\nbatch_size = 8\nseed = 1\nmax_len = 64\nmode = { per_subtask = \"engaging\" }\n",
        )
        .unwrap();
        assert_eq!(per.mode, TrainMode::PerSubtask(Label::Engaging));
        assert!(toml::from_str::<TrainConfig>("learning_rate = 1.0\nbogus = 1").is_err());
    }

    #[test]
    fn zero_head_initial_loss_is_ln2() {
        let ds = synthetic_marker_corpus(32, 5);
        let spec = tiny_test_spec();
        let texts: Vec<&str> = ds.entries().iter().map(|e| e.comment.text.as_str()).collect();
        let tok = tokenizer_for(&spec, &texts).unwrap();
        let mut c = init_classifier(&spec, tok.vocab_size(), 3, 5, &[]).unwrap();
        c.head = ClassifierHead::new(c.backbone.config.dim, 3, HeadInit::Zeros).unwrap();
        let batch = tok.encode_batch(&texts, 64).unwrap();
        let golds: Vec<&LabelSet> = ds.entries().iter().map(|e| &e.labels).collect();
        let (t, w) = targets_and_weights(&golds, &Label::ALL);
        let loss = batch_loss(&c, &batch, &t, &w, Precision::Fp32).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() <= 1e-6, "{loss}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = synthetic_marker_corpus(40, 3);
        let sp = split(&ds, 0.8, 3).unwrap();
        let spec = tiny_test_spec();
        let cfg = tiny_config(1, 0.0);
        let (_d, s) = store();
        let (model, _) = fine_tune(&sp, &spec, &cfg, &s).unwrap();
        let texts: Vec<&str> = sp.train.entries().iter().map(|e| e.comment.text.as_str()).collect();
        let tok = tokenizer_for(&spec, &texts).unwrap();
        let fresh = init_classifier(&spec, tok.vocab_size(), 1, cfg.seed, &[]).unwrap();
        assert_eq!(model.classifier.head, fresh.head);
        assert_eq!(model.classifier.backbone.weights, fresh.backbone.weights);
    }

    #[test]
    fn epochs_recorded_and_deterministic() {
        let ds = synthetic_marker_corpus(60, 9);
        let sp = split(&ds, 0.8, 9).unwrap();
        let cfg = tiny_config(3, 1e-3);
        let (_d, s) = store();
        let (_, a) = fine_tune(&sp, &tiny_test_spec(), &cfg, &s).unwrap();
        let (_, b) = fine_tune(&sp, &tiny_test_spec(), &cfg, &s).unwrap();
        assert_eq!(a.epoch_history.len(), 3);
        assert_eq!(a.status, RunStatus::Completed);
        let losses = |r: &RunRecord| r.epoch_history.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.content_hash, b.content_hash);
        assert_ne!(a.run_id, b.run_id);
    }

    #[test]
    fn adafactor_and_fp16_run() {
        let ds = synthetic_marker_corpus(40, 2);
        let sp = split(&ds, 0.8, 2).unwrap();
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Adafactor,
            precision: Precision::Fp16,
            mode: TrainMode::JointMultilabel,
            ..tiny_config(2, 1e-3)
        };
        let (_d, s) = store();
        let (model, rec) = fine_tune(&sp, &tiny_test_spec(), &cfg, &s).unwrap();
        assert_eq!(model.labels.len(), 3);
        assert!(rec.epoch_history.iter().all(|e| e.train_loss.is_finite()));
    }

    #[test]
    fn divergence_and_interrupt_are_recorded() {
        let ds = synthetic_marker_corpus(40, 4);
        let sp = split(&ds, 0.8, 4).unwrap();
        let (_d, s) = store();
        let cfg = tiny_config(2, 1e30);
        let err = fine_tune(&sp, &tiny_test_spec(), &cfg, &s).unwrap_err();
        let Error::Diverged { run_id, .. } = err else { panic!("{err}") };
        assert_eq!(s.get(&run_id).unwrap().status, RunStatus::Diverged);

        let flag = AtomicBool::new(true);
        let opts = TrainOptions {
            interrupt: Some(&flag),
            ..TrainOptions::default()
        };
        let err = fine_tune_with(&sp, &tiny_test_spec(), &tiny_config(2, 1e-3), &s, opts).unwrap_err();
        let Error::Interrupted { run_id, .. } = err else { panic!("{err}") };
        assert_eq!(s.get(&run_id).unwrap().status, RunStatus::Partial);
    }

    #[test]
    fn full_data_runs_and_model_round_trip() {
        let ds = synthetic_marker_corpus(30, 8);
        let (d, s) = store();
        let runs = train_full_per_subtask(&ds, &tiny_test_spec(), &tiny_config(1, 1e-3), &s).unwrap();
        assert_eq!(runs.len(), 3);
        assert!(runs.iter().all(|(_, r)| r.validation_report().is_none() && r.data.kind == DataKind::FullData));
        let (model, _) = &runs[0];
        model.save(&d.path().join("m")).unwrap();
        let back = FittedModel::load(&d.path().join("m")).unwrap();
        let texts = ["GIFT hallo", "nur text"];
        assert_eq!(back.probabilities(&texts).unwrap(), model.probabilities(&texts).unwrap());

        std::fs::write(d.path().join("m/weights.bin"), b"garbage").unwrap();
        assert!(FittedModel::load(&d.path().join("m")).is_err());
    }
}
