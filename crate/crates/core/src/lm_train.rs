//! Next-token training and perplexity evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::gpt::{GptModel, Mode};
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 3e-2,
            batch_size: 8,
            steps: 1000,
            eval_interval: 100,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("train.lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("train.weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("train.eval_interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    /// Weights after the last step.
    pub model: GptModel,
    /// Weights at the lowest logged validation loss, when validation ran.
    pub best: Option<(usize, f64, GptModel)>,
    pub log: Vec<TrainLogRecord>,
}

impl TrainOutcome {
    /// The best-validation model if there is one, else the final model.
    pub fn selected(&self) -> &GptModel {
        self.best.as_ref().map_or(&self.model, |(_, _, m)| m)
    }
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// AdamW next-token training on random windows drawn uniformly with
/// replacement from `train`. The learning rate is constant.
pub fn train_lm(mut model: GptModel, train: &[u32], val: &[u32], cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut log = Vec::new();
    if cfg.steps == 0 {
        return Ok(TrainOutcome { model, best: None, log });
    }
    if train.len() < 2 {
        return Err(Error::Input(format!("training stream has {} tokens, need at least 2", train.len())));
    }
    let seq = model.config().context_length.min(train.len() - 1);
    let batch = cfg.batch_size;
    let adam = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::with_sizes(adam, model.parameters().map(Tensor::len));
    let mut windows = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout.set_stream(1);

    let started = Instant::now();
    let mut best: Option<(usize, f64, GptModel)> = None;
    let mut pending = Vec::new();
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    for step in 1..=cfg.steps {
        inputs.clear();
        targets.clear();
        for _ in 0..batch {
            let start = windows.random_range(0..=train.len() - seq - 1);
            inputs.extend_from_slice(&train[start..start + seq]);
            targets.extend(train[start + 1..=start + seq].iter().map(|&t| t as usize));
        }

        let mut g = Graph::new();
        let f = model.build(&mut g, &inputs, batch, seq, true, Some(&mut dropout))?;
        let loss = g.softmax_cross_entropy(f.logits, &targets)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, loss: value });
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = f
            .params
            .iter()
            .map(|&p| g.grad(p).unwrap_or_else(|| Tensor::zeros(g.value(p).shape())))
            .collect();
        drop(g);
        opt.step(&mut model.parameters_mut(), &grads)?;
        pending.push(value);

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let val_loss = if val.len() >= 2 {
                Some(mean_nll(&model, val, model.config().context_length)?)
            } else {
                None
            };
            if let Some(v) = val_loss {
                if !v.is_finite() {
                    return Err(Error::NonFinite { step, loss: v });
                }
                if best.as_ref().is_none_or(|(_, b, _)| v < *b) {
                    if let Some(dir) = &cfg.checkpoint_dir {
                        model.save(&dir.join(BEST_CHECKPOINT))?;
                    }
                    best = Some((step, v, model.clone()));
                }
            }
            log.push(TrainLogRecord {
                step,
                train_loss: pending.iter().sum::<f64>() / pending.len() as f64,
                val_loss,
                tokens_seen: (step * batch * seq) as u64,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            pending.clear();
        }
    }
    Ok(TrainOutcome { model, best, log })
}

/// Per-target negative log-likelihoods, scoring each position once. Windows
/// of up to `context_length` inputs start every `stride` tokens; a window
/// scores only targets the previous window did not reach.
pub fn token_nll(model: &GptModel, ids: &[u32], stride: usize) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Err(Error::Input(format!("perplexity needs at least 2 tokens, got {}", ids.len())));
    }
    let ctx = model.config().context_length;
    if stride == 0 || stride > ctx {
        return Err(Error::Config(format!("perplexity stride {stride} outside [1, {ctx}]")));
    }
    let n = ids.len() - 1;
    let mut out = Vec::with_capacity(n);
    let mut scored = 0;
    let mut start = 0;
    while scored < n {
        let end = (start + ctx).min(n);
        let (logits, _) = model.forward(&ids[start..end], Mode::Eval, false)?;
        for pos in scored.max(start)..end {
            let row = logits.row(pos - start);
            out.push(nll(row, ids[pos + 1] as usize));
        }
        scored = end;
        start += stride;
    }
    Ok(out)
}

fn nll(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target] as f64
}

pub fn mean_nll(model: &GptModel, ids: &[u32], stride: usize) -> Result<f64> {
    let nlls = token_nll(model, ids, stride)?;
    Ok(nlls.iter().sum::<f64>() / nlls.len() as f64)
}

/// `exp` of the mean next-token negative log-likelihood, in eval mode.
pub fn perplexity(model: &GptModel, ids: &[u32], stride: usize) -> Result<f64> {
    Ok(mean_nll(model, ids, stride)?.exp())
}
