//! Pre-norm transformer encoder/decoder used by built-in backbones.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::NamedTensor;
use super::BackboneSpec;
use crate::autodiff::{AttentionShape, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::textprep::TokenBatch;

const INIT_STD: f32 = 0.02;
const PER_LAYER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub causal: bool,
}

impl TransformerConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            dim: 32,
            heads: 2,
            layers: 2,
            ff_dim: 128,
            max_positions: 512,
            causal: false,
        }
    }

    pub fn from_spec(spec: &BackboneSpec, vocab_size: usize) -> Result<Self> {
        let missing = |what: &str| {
            Error::config(format!(
                "{}: {what} not declared; built-in compute needs hidden_dim, num_heads and num_layers",
                spec.name
            ))
        };
        let dim = spec.hidden_dim.ok_or_else(|| missing("hidden_dim"))?;
        let heads = spec.num_heads.ok_or_else(|| missing("num_heads"))?;
        let layers = spec.num_layers.ok_or_else(|| missing("num_layers"))?;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "{}: hidden_dim {dim} not divisible by {heads} heads",
                spec.name
            )));
        }
        if vocab_size == 0 {
            return Err(Error::config("empty vocabulary"));
        }
        Ok(TransformerConfig {
            vocab_size,
            dim,
            heads,
            layers,
            ff_dim: 4 * dim,
            max_positions: spec.max_positions,
            causal: spec.family.is_causal(),
        })
    }

    fn layout(&self) -> Vec<(String, usize, usize)> {
        let (d, f) = (self.dim, self.ff_dim);
        let mut out = vec![
            ("tok_emb".to_string(), self.vocab_size, d),
            ("pos_emb".to_string(), self.max_positions, d),
        ];
        for l in 0..self.layers {
            for (name, r, c) in [
                ("ln1.gamma", 1, d),
                ("ln1.beta", 1, d),
                ("attn.qkv.weight", d, 3 * d),
                ("attn.qkv.bias", 1, 3 * d),
                ("attn.out.weight", d, d),
                ("attn.out.bias", 1, d),
                ("ln2.gamma", 1, d),
                ("ln2.beta", 1, d),
                ("mlp.fc.weight", d, f),
                ("mlp.fc.bias", 1, f),
                ("mlp.proj.weight", f, d),
                ("mlp.proj.bias", 1, d),
            ] {
                out.push((format!("layer{l}.{name}"), r, c));
            }
        }
        out.push(("ln_f.gamma".into(), 1, d));
        out.push(("ln_f.beta".into(), 1, d));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl TransformerWeights {
    /// Normal(0, 0.02) matrices and embeddings, zero biases, unit layer-norm gains.
    pub fn random(config: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                let t = if name.ends_with("gamma") {
                    Tensor::filled(r, c, 1.0)
                } else if name.ends_with("beta") || name.ends_with("bias") {
                    Tensor::zeros(r, c)
                } else {
                    Tensor::from_vec(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())
                };
                (name, t)
            })
            .unzip();
        TransformerWeights { names, tensors }
    }

    pub fn from_named(config: &TransformerConfig, mut named: Vec<NamedTensor>) -> Result<Self> {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c) in config.layout() {
            let pos = named
                .iter()
                .position(|t| t.name == name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks tensor {name}")))?;
            let t = named.swap_remove(pos);
            if t.tensor.shape() != (r, c) {
                return Err(Error::config(format!(
                    "tensor {name} has shape {:?}, expected ({r}, {c})",
                    t.tensor.shape()
                )));
            }
            names.push(name);
            tensors.push(t.tensor);
        }
        if let Some(extra) = named.first() {
            return Err(Error::config(format!("unexpected checkpoint tensor {}", extra.name)));
        }
        Ok(TransformerWeights { names, tensors })
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Hidden states `(batch*seq_len) x dim` after the final layer norm.
    /// Parameter slots start at `base`.
    pub fn encode(&self, g: &mut Graph, cfg: &TransformerConfig, batch: &TokenBatch, base: usize) -> Var {
        let p: Vec<Var> = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(base + i, t))
            .collect();
        let positions: Vec<u32> = (0..batch.batch)
            .flat_map(|_| 0..batch.seq_len as u32)
            .collect();
        let tok = g.gather(p[0], &batch.ids);
        let pos = g.gather(p[1], &positions);
        let mut x = g.add(tok, pos);
        for l in 0..cfg.layers {
            let w = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let h = g.layer_norm(x, w[0], w[1]);
            let qkv = g.linear(h, w[2], w[3]);
            let shape = AttentionShape {
                batch: batch.batch,
                seq_len: batch.seq_len,
                heads: cfg.heads,
                causal: cfg.causal,
            };
            let a = g.attention(qkv, &batch.mask, shape);
            let a = g.linear(a, w[4], w[5]);
            x = g.add(x, a);
            let h = g.layer_norm(x, w[6], w[7]);
            let h = g.linear(h, w[8], w[9]);
            let h = g.gelu(h);
            let h = g.linear(h, w[10], w[11]);
            x = g.add(x, h);
        }
        let n = p.len();
        g.layer_norm(x, p[n - 2], p[n - 1])
    }
}
