//! Decoder-only transformer: pre-norm blocks, learned positional
//! embeddings, a final layer norm and a biased vocabulary projection.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionParams, Graph, Var};
use crate::error::{Error, Result};
use crate::io::{decode_weights, encode_weights, read_file, write_file};
use crate::tensor::{argmax, Tensor};

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f64 = 0.02;
const MAGIC: &[u8; 8] = b"SAGPTCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub context_length: usize,
    pub seed: u64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50_257,
            embed_dim: 896,
            layers: 8,
            heads: 14,
            dropout: 0.2,
            context_length: 256,
            seed: 0,
        }
    }
}

impl GptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.layers == 0 || self.context_length == 0 {
            return bad(format!("gpt: sizes must be positive: {self:?}"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("gpt.embed_dim {} not divisible by gpt.heads {}", self.embed_dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("gpt.dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in checkpoint order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.embed_dim, 4 * self.embed_dim);
        let mut out = vec![
            ("wte".to_string(), vec![v, d]),
            ("wpe".to_string(), vec![self.context_length, d]),
        ];
        for l in 0..self.layers {
            let block: [(&str, Vec<usize>); 16] = [
                ("ln_1.g", vec![d]),
                ("ln_1.b", vec![d]),
                ("attn.w_q", vec![d, d]),
                ("attn.b_q", vec![d]),
                ("attn.w_k", vec![d, d]),
                ("attn.b_k", vec![d]),
                ("attn.w_v", vec![d, d]),
                ("attn.b_v", vec![d]),
                ("attn.w_o", vec![d, d]),
                ("attn.b_o", vec![d]),
                ("ln_2.g", vec![d]),
                ("ln_2.b", vec![d]),
                ("mlp.w_fc", vec![d, f]),
                ("mlp.b_fc", vec![f]),
                ("mlp.w_proj", vec![f, d]),
                ("mlp.b_proj", vec![d]),
            ];
            out.extend(block.into_iter().map(|(n, s)| (format!("h{l}.{n}"), s)));
        }
        out.push(("ln_f.g".into(), vec![d]));
        out.push(("ln_f.b".into(), vec![d]));
        out.push(("lm_head.w".into(), vec![d, v]));
        out.push(("lm_head.b".into(), vec![v]));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const PER_BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-block outputs (after the residual addition, before the final norm).
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStateTrace {
    pub layers: Vec<Tensor>,
    /// `[heads x t x t]` per block when requested.
    pub attention: Option<Vec<Tensor>>,
}

/// Handles produced by [`GptModel::build`].
pub struct TapeForward {
    pub logits: Var,
    pub params: Vec<Var>,
    pub blocks: Vec<Var>,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GptModel {
    config: GptConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
}

impl GptModel {
    pub fn new(config: GptConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_layout() {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            names.push(name);
            params.push(Arc::new(t));
        }
        Ok(Self { config, names, params })
    }

    /// Builds a model from explicit tensors in [`GptConfig::parameter_layout`] order.
    pub fn from_parameters(config: GptConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::dim("gpt parameters", &[layout.len()], &[params.len()]));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name}: shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &GptConfig {
        &self.config
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| p.as_ref())
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| self.params[i].as_ref())
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(Arc::make_mut(&mut self.params[i]))
    }

    /// Mutable access to every parameter in layout order. Copies a tensor
    /// only if a graph still holds it.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn check_ids(&self, ids: &[u32], seq: usize) -> Result<()> {
        if seq > self.config.context_length {
            return Err(Error::Length {
                len: seq,
                max: self.config.context_length,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad as usize,
                bound: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the forward pass for `batch` sequences of `seq` tokens
    /// (`ids` is row-major `[batch x seq]`). Dropout is applied only when a
    /// generator is supplied.
    pub fn build(
        &self,
        g: &mut Graph<f32>,
        ids: &[u32],
        batch: usize,
        seq: usize,
        trainable: bool,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<TapeForward> {
        if ids.len() != batch * seq || seq == 0 {
            return Err(Error::dim("gpt forward", &[ids.len()], &[batch, seq]));
        }
        self.check_ids(ids, seq)?;
        let cfg = &self.config;
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| g.leaf_shared(Arc::clone(t), trainable))
            .collect();
        let p_drop = cfg.dropout;
        let mut maybe_drop = |g: &mut Graph<f32>, x: Var| -> Result<Var> {
            match dropout.as_deref_mut() {
                Some(rng) => g.dropout(x, p_drop, rng),
                None => Ok(x),
            }
        };

        let tok: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let te = g.embedding(p[0], &tok)?;
        let pe = g.embedding(p[1], &pos)?;
        let mut x = g.add(te, pe)?;
        x = maybe_drop(g, x)?;

        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut attention = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let b = &p[2 + l * PER_BLOCK..][..PER_BLOCK];
            let h = g.layer_norm(x, b[0], b[1], LN_EPS)?;
            let attn = AttentionParams {
                w_query: b[2],
                b_query: b[3],
                w_key: b[4],
                b_key: b[5],
                w_value: b[6],
                b_value: b[7],
                w_out: b[8],
                b_out: b[9],
            };
            let (a, ctx) = g.causal_self_attention(h, &attn, batch, seq, cfg.heads)?;
            let a = maybe_drop(g, a)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, b[10], b[11], LN_EPS)?;
            let h = g.linear(h, b[12], b[13])?;
            let h = g.gelu(h);
            let h = g.linear(h, b[14], b[15])?;
            let h = maybe_drop(g, h)?;
            x = g.add(x, h)?;
            blocks.push(x);
            attention.push(ctx);
        }
        let n = p.len();
        let h = g.layer_norm(x, p[n - 4], p[n - 3], LN_EPS)?;
        let logits = g.linear(h, p[n - 2], p[n - 1])?;
        Ok(TapeForward {
            logits,
            params: p,
            blocks,
            attention,
        })
    }

    /// Logits `[t x vocab]` for one sequence. Train mode draws dropout masks
    /// from a generator seeded with the config seed.
    pub fn forward(&self, ids: &[u32], mode: Mode, capture: bool) -> Result<(Tensor, Option<HiddenStateTrace>)> {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let dropout = match mode {
            Mode::Train => Some(&mut rng),
            Mode::Eval => None,
        };
        let f = self.build(&mut g, ids, 1, ids.len(), false, dropout)?;
        let trace = capture.then(|| HiddenStateTrace {
            layers: f.blocks.iter().map(|&v| g.value(v).clone()).collect(),
            attention: Some(
                f.attention
                    .iter()
                    .map(|&v| {
                        let probs = g.attention_probs(v).expect("attention node");
                        let s = probs.shape()[1..].to_vec();
                        probs.reshape(&s).expect("single batch")
                    })
                    .collect(),
            ),
        });
        Ok((g.value(f.logits).clone(), trace))
    }

    /// Hidden states only, without the attention tensors.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let f = self.build(&mut g, ids, 1, ids.len(), false, None)?;
        Ok(f.blocks.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Extends `prompt` by `max_new` tokens. Temperature 0 is greedy (lowest
    /// index on ties); otherwise tokens are sampled from the tempered softmax.
    pub fn generate(&self, prompt: &[u32], max_new: usize, temperature: f64, seed: u64) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Input("generation prompt is empty".into()));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature {temperature} must be finite and >= 0")));
        }
        let total = prompt.len() + max_new;
        if total > self.config.context_length {
            return Err(Error::Length {
                len: total,
                max: self.config.context_length,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            let (logits, _) = self.forward(&out, Mode::Eval, false)?;
            let last = logits.row(logits.rows() - 1);
            let next = if temperature == 0.0 {
                argmax(last)
            } else {
                sample_tempered(last, temperature, &mut rng)
            };
            out.push(next as u32);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let tensors: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter().map(|p| p.as_ref()))
            .collect();
        encode_weights(MAGIC, &config, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = decode_weights(bytes, MAGIC)?;
        let config: GptConfig = serde_json::from_str(&decoded.config_json)
            .map_err(|e| Error::format(16, format!("config: {e}")))?;
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != decoded.tensors.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} tensors, config implies {}",
                decoded.tensors.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (found, t)) in layout.into_iter().zip(decoded.tensors) {
            if name != found || t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {found} {:?} where {name} {shape:?} expected",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Self::from_parameters(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn sample_tempered(logits: &[f32], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let weights: Vec<f64> = logits
        .iter()
        .map(|&x| ((x as f64 - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    // rounding left u just past the end
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> GptConfig {
        GptConfig {
            vocab_size: 11,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            context_length: 6,
            seed: 3,
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = toy();
        c.heads = 3;
        assert!(matches!(GptModel::new(c), Err(Error::Config(_))));
        let mut c = toy();
        c.dropout = 1.0;
        assert!(GptModel::new(c).is_err());
    }

    #[test]
    fn length_and_vocab_errors() {
        let m = GptModel::new(toy()).unwrap();
        assert!(matches!(
            m.forward(&[1; 7], Mode::Eval, false),
            Err(Error::Length { len: 7, max: 6 })
        ));
        assert!(matches!(m.forward(&[11], Mode::Eval, false), Err(Error::Index { .. })));
        assert!(matches!(m.generate(&[1, 2], 5, 0.0, 0), Err(Error::Length { .. })));
        assert!(m.generate(&[], 1, 0.0, 0).is_err());
    }

    #[test]
    fn train_mode_applies_dropout() {
        let m = GptModel::new(toy()).unwrap();
        let (a, _) = m.forward(&[1, 2, 3], Mode::Eval, false).unwrap();
        let (b, _) = m.forward(&[1, 2, 3], Mode::Train, false).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn trace_shapes() {
        let m = GptModel::new(toy()).unwrap();
        let (_, trace) = m.forward(&[1, 2, 3], Mode::Eval, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.layers.len(), 2);
        assert!(trace.layers.iter().all(|t| t.shape() == [3, 8]));
        let att = trace.attention.unwrap();
        assert_eq!(att[0].shape(), &[2, 3, 3]);
        assert_eq!(m.hidden_states(&[1, 2, 3]).unwrap(), trace.layers);
    }

    #[test]
    fn sampling_respects_tempered_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [0.0f32, (3.0f64).ln() as f32];
        let hits = (0..20_000).filter(|_| sample_tempered(&logits, 1.0, &mut rng) == 1).count();
        assert!((hits as f64 / 20_000.0 - 0.75).abs() < 0.02);
    }
}
