//! Backbone registry and the classification-head contract.
//!
//! A [`BackboneSpec`] is declarative: family, casing, pooling rule, positions,
//! weight locator, vocabulary. Loading turns a spec into a [`Backbone`] handle.
//! Only `builtin:random` and `file:<path>` (checkpoints written by this crate)
//! are loadable here; other locators (e.g. `hf:deepset/gelectra-large`) sit
//! behind the [`WeightLoader`] adapter and need an external loader.

pub(crate) mod checkpoint;
mod transformer;

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_tensors, write_tensors, NamedTensor};
pub use transformer::{TransformerConfig, TransformerWeights};

use crate::autodiff::{Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::textprep::{NormalizationPolicy, TokenBatch, TokenizerKind, TokenizerSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BertLike,
    ElectraLike,
    Gpt2Like,
    TinyTest,
}

impl Family {
    /// Decoder families attend causally.
    pub fn is_causal(self) -> bool {
        self == Family::Gpt2Like
    }

    pub fn default_pooling(self) -> Pooling {
        match self {
            Family::Gpt2Like => Pooling::LastNonpadToken,
            _ => Pooling::ClsToken,
        }
    }

    pub fn default_max_len(self) -> usize {
        match self {
            Family::Gpt2Like => 1024,
            _ => 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClsToken,
    LastNonpadToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSource {
    pub locator: String,
    /// Hex SHA-256 of the weight file; checked before anything is parsed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

pub const BUILTIN_RANDOM: &str = "builtin:random";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub family: Family,
    pub casing: NormalizationPolicy,
    pub pooling: Pooling,
    pub max_positions: usize,
    pub weight_source: WeightSource,
    /// Size of the parameter file in bytes; informational only.
    pub approx_binary_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    pub tokenizer: TokenizerSource,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("backbone name is empty"));
        }
        if self.family == Family::Gpt2Like && self.pooling != Pooling::LastNonpadToken {
            return Err(Error::config(format!(
                "{}: gpt2_like backbones pool the last non-padding token",
                self.name
            )));
        }
        if self.max_positions == 0 {
            return Err(Error::config(format!("{}: max_positions is 0", self.name)));
        }
        if let (Some(d), Some(h)) = (self.hidden_dim, self.num_heads) {
            if h == 0 || d % h != 0 {
                return Err(Error::config(format!(
                    "{}: hidden_dim {d} not divisible by {h} heads",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn default_max_len(&self) -> usize {
        self.family.default_max_len().min(self.max_positions)
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({:?}, {:?})", self.name, self.family, self.pooling)
    }
}

const MB: u64 = 1_000_000;
const GB: u64 = 1_000_000_000;

fn hub(
    name: &str,
    repo: &str,
    family: Family,
    casing: NormalizationPolicy,
    size: u64,
    tokenizer: TokenizerKind,
) -> BackboneSpec {
    BackboneSpec {
        name: name.into(),
        family,
        casing,
        pooling: family.default_pooling(),
        max_positions: family.default_max_len(),
        weight_source: WeightSource {
            locator: format!("hf:{repo}"),
            checksum: None,
        },
        approx_binary_size: size,
        hidden_dim: None,
        num_heads: None,
        num_layers: None,
        tokenizer: TokenizerSource {
            kind: tokenizer,
            vocab: None,
            merges: None,
            checksum: None,
        },
    }
}

/// The desk-scale backbone: 2 layers, width 32, 2 heads, random init.
pub fn tiny_test_spec() -> BackboneSpec {
    BackboneSpec {
        name: "tiny_test".into(),
        family: Family::TinyTest,
        casing: NormalizationPolicy::Identity,
        pooling: Pooling::ClsToken,
        max_positions: 512,
        weight_source: WeightSource {
            locator: BUILTIN_RANDOM.into(),
            checksum: None,
        },
        // f32 parameters for a 4k-word vocabulary.
        approx_binary_size: 4 * TransformerConfig::tiny(4096 + 259 + 256).parameter_count() as u64,
        hidden_dim: Some(32),
        num_heads: Some(2),
        num_layers: Some(2),
        tokenizer: TokenizerSource::tiny(),
    }
}

/// The four hub backbones evaluated for the shared task plus `tiny_test`.
pub fn registry_default() -> Vec<BackboneSpec> {
    use NormalizationPolicy::*;
    let mut gerpt2 = hub(
        "gerpt2-large",
        "benjamin/gerpt2-large",
        Family::Gpt2Like,
        Identity,
        3_200 * MB,
        TokenizerKind::ByteBpe,
    );
    gerpt2.hidden_dim = Some(1280);
    gerpt2.num_heads = Some(20);
    vec![
        hub(
            "gbert-large",
            "deepset/gbert-large",
            Family::BertLike,
            Identity,
            13 * GB / 10,
            TokenizerKind::WordPiece,
        ),
        hub(
            "gelectra-large",
            "deepset/gelectra-large",
            Family::ElectraLike,
            Identity,
            13 * GB / 10,
            TokenizerKind::WordPiece,
        ),
        hub(
            "electra-base-german-uncased",
            "german-nlp-group/electra-base-german-uncased",
            Family::ElectraLike,
            LowercaseKeepAccents,
            424 * MB,
            TokenizerKind::WordPiece,
        ),
        gerpt2,
        tiny_test_spec(),
    ]
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    backbone: Vec<BackboneSpec>,
}

/// Parse a registry file: a TOML document of `[[backbone]]` tables.
pub fn parse_registry(text: &str) -> Result<Vec<BackboneSpec>> {
    let file: RegistryFile =
        toml::from_str(text).map_err(|e| Error::config(format!("backbone registry: {e}")))?;
    let mut names = std::collections::HashSet::new();
    for spec in &file.backbone {
        spec.validate()?;
        if !names.insert(spec.name.clone()) {
            return Err(Error::config(format!("duplicate backbone {}", spec.name)));
        }
    }
    Ok(file.backbone)
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<Vec<BackboneSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_registry(&text)
}

pub fn registry_to_toml(specs: &[BackboneSpec]) -> String {
    toml::to_string_pretty(&RegistryFile {
        backbone: specs.to_vec(),
    })
    .expect("registry serializes")
}

pub fn find_backbone<'a>(specs: &'a [BackboneSpec], name: &str) -> Result<&'a BackboneSpec> {
    specs.iter().find(|s| s.name == name).ok_or_else(|| {
        let known: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        Error::config(format!("unknown backbone {name:?}; known: {}", known.join(", ")))
    })
}

/// Adapter boundary for weight formats this crate cannot read itself.
pub trait WeightLoader {
    fn supports(&self, locator: &str) -> bool;
    fn load(&self, spec: &BackboneSpec, config: &TransformerConfig) -> Result<TransformerWeights>;
}

/// A loaded, read-only backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub config: TransformerConfig,
    pub weights: TransformerWeights,
}

impl Backbone {
    /// Resolve the spec's weight locator. `seed` drives `builtin:random`.
    pub fn load(
        spec: &BackboneSpec,
        vocab_size: usize,
        seed: u64,
        external: &[&dyn WeightLoader],
    ) -> Result<Backbone> {
        spec.validate()?;
        let config = TransformerConfig::from_spec(spec, vocab_size)?;
        let locator = spec.weight_source.locator.as_str();
        let weights = if locator == BUILTIN_RANDOM {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            TransformerWeights::random(&config, &mut rng)
        } else if let Some(path) = locator.strip_prefix("file:") {
            let tensors = checkpoint::read_verified(Path::new(path), spec.weight_source.checksum.as_deref())?;
            TransformerWeights::from_named(&config, tensors.into_iter().filter(|t| !t.name.starts_with("head.")).collect())?
        } else if let Some(loader) = external.iter().find(|l| l.supports(locator)) {
            loader.load(spec, &config)?
        } else {
            return Err(Error::config(format!(
                "no weight loader for {locator:?} ({}); only {BUILTIN_RANDOM} and file: locators are built in",
                spec.name
            )));
        };
        Ok(Backbone {
            spec: spec.clone(),
            config,
            weights,
        })
    }
}

/// Initialization of a fresh head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadInit {
    Zeros,
    Normal { std: f32, seed: u64 },
}

/// Single affine layer on the pooled vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub input_dim: usize,
    pub num_labels: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(input_dim: usize, num_labels: usize, init: HeadInit) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::config("classifier head needs at least one label"));
        }
        let mut weight = Tensor::zeros(input_dim, num_labels);
        if let HeadInit::Normal { std, seed } = init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0f32, std).map_err(|e| Error::config(e.to_string()))?;
            for v in &mut weight.data {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(ClassifierHead {
            input_dim,
            num_labels,
            weight,
            bias: Tensor::zeros(1, num_labels),
        })
    }
}

/// Dropout probability on the pooled vector during training.
pub const HEAD_DROPOUT: f32 = 0.1;

/// Backbone plus head; the unit that is trained and saved.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: ClassifierHead,
}

impl Classifier {
    pub fn new(backbone: Backbone, head: ClassifierHead) -> Result<Self> {
        if head.input_dim != backbone.config.dim {
            return Err(Error::config(format!(
                "head input_dim {} does not match backbone width {}",
                head.input_dim, backbone.config.dim
            )));
        }
        Ok(Classifier { backbone, head })
    }

    /// Trainable tensors in a fixed order: backbone then head weight, head bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.backbone.weights.tensors().collect();
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.backbone.weights.tensors_mut().collect();
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn head_parameter_range(&self) -> std::ops::Range<usize> {
        let n = self.backbone.weights.len();
        n..n + 2
    }

    pub fn build_logits(
        &self,
        graph: &mut Graph,
        batch: &TokenBatch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        build_logits(&self.backbone, &self.head, graph, batch, dropout)
    }

    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        forward(&self.backbone, &self.head, batch)
    }
}

fn check_batch(backbone: &Backbone, head: &ClassifierHead, batch: &TokenBatch) -> Result<()> {
    if head.input_dim != backbone.config.dim {
        return Err(Error::config(format!(
            "head input_dim {} does not match backbone width {}",
            head.input_dim, backbone.config.dim
        )));
    }
    if batch.ids.len() != batch.batch * batch.seq_len || batch.mask.len() != batch.ids.len() {
        return Err(Error::config("token batch is not rectangular"));
    }
    if batch.seq_len > backbone.config.max_positions {
        return Err(Error::config(format!(
            "sequence length {} exceeds {} positions",
            batch.seq_len, backbone.config.max_positions
        )));
    }
    if let Some(&bad) = batch
        .ids
        .iter()
        .find(|&&id| id as usize >= backbone.config.vocab_size)
    {
        return Err(Error::config(format!(
            "token id {bad} outside vocabulary of {}",
            backbone.config.vocab_size
        )));
    }
    Ok(())
}

/// Record the forward pass on `graph` and return the `batch x num_labels`
/// logits. Parameter slots follow [`Classifier::parameters`]. `dropout`
/// supplies the RNG when training; `None` means evaluation mode.
pub fn build_logits(
    backbone: &Backbone,
    head: &ClassifierHead,
    graph: &mut Graph,
    batch: &TokenBatch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    check_batch(backbone, head, batch)?;
    let hidden = backbone.weights.encode(graph, &backbone.config, batch, 0);
    let mut pooled = pool(graph, hidden, batch, backbone.spec.pooling);
    if let Some(rng) = dropout {
        use rand::Rng;
        let keep = 1.0 - HEAD_DROPOUT;
        let n = graph.value(pooled).len();
        let factors = (0..n)
            .map(|_| if rng.gen::<f32>() < HEAD_DROPOUT { 0.0 } else { 1.0 / keep })
            .collect();
        pooled = graph.scale(pooled, factors);
    }
    let base = backbone.weights.len();
    let w = graph.param(base, &head.weight);
    let b = graph.param(base + 1, &head.bias);
    Ok(graph.linear(pooled, w, b))
}

/// Rows of the pooled matrix as weighted picks of hidden rows.
pub fn pool(graph: &mut Graph, hidden: Var, batch: &TokenBatch, pooling: Pooling) -> Var {
    let t = batch.seq_len;
    let picks = (0..batch.batch)
        .map(|b| {
            let mask = batch.row_mask(b);
            match pooling {
                Pooling::ClsToken => vec![(b * t, 1.0)],
                Pooling::LastNonpadToken => {
                    let last = mask.iter().rposition(|&m| m == 1).unwrap_or(0);
                    vec![(b * t + last, 1.0)]
                }
                Pooling::Mean => {
                    let n = mask.iter().filter(|&&m| m == 1).count().max(1);
                    (0..t)
                        .filter(|&i| mask[i] == 1)
                        .map(|i| (b * t + i, 1.0 / n as f32))
                        .collect()
                }
            }
        })
        .collect();
    graph.row_combine(hidden, picks)
}

/// Inference forward pass: `batch x num_labels` logits.
pub fn forward(backbone: &Backbone, head: &ClassifierHead, batch: &TokenBatch) -> Result<Tensor> {
    let mut graph = Graph::new(Precision::Fp32);
    let out = build_logits(backbone, head, &mut graph, batch, None)?;
    Ok(graph.value(out).clone())
}
