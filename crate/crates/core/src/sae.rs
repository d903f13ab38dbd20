//! Top-k sparse autoencoders over residual-stream activations.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationSet, RowRef};
use crate::autograd::{top_k_indices, Graph};
use crate::error::{Error, Result};
use crate::io::{decode_weights, encode_weights, read_file, write_file};
use crate::optim::{AdamWConfig, AdamWState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SASAECKP";

/// Hidden width multiplier for a 1-based layer: 3x for layers 1-2, 4x for
/// 3-5 and 5x from layer 6 on.
pub fn band_factor(layer: u32) -> usize {
    match layer {
        0..=2 => 3,
        3..=5 => 4,
        _ => 5,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    pub layer: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub k: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// An epoch improves only if val MSE drops by at least this much.
    pub min_delta: f64,
    /// Subtract the training mean before encoding.
    pub center: bool,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self::for_layer(1, 896)
    }
}

impl SaeConfig {
    pub fn for_layer(layer: u32, input_dim: usize) -> Self {
        Self {
            layer,
            input_dim,
            hidden_dim: input_dim * band_factor(layer),
            k: 50,
            max_epochs: 500,
            patience: 10,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
            min_delta: 1e-6,
            center: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("sae layer {}: dimensions must be positive", self.layer)));
        }
        if self.k == 0 || self.k > self.hidden_dim {
            return Err(Error::Config(format!(
                "sae layer {}: k {} outside [1, {}]",
                self.layer, self.k, self.hidden_dim
            )));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!(
                "sae layer {}: lr and batch_size must be positive, min_delta non-negative",
                self.layer
            )));
        }
        Ok(())
    }

    /// Also requires the depth-scaled hidden width.
    pub fn validate_band(&self) -> Result<()> {
        self.validate()?;
        let want = self.input_dim * band_factor(self.layer);
        if self.hidden_dim != want {
            return Err(Error::Config(format!(
                "sae layer {}: hidden_dim {} should be {want} ({}x input)",
                self.layer,
                self.hidden_dim,
                band_factor(self.layer)
            )));
        }
        Ok(())
    }
}

/// A sparse code with its retained slots listed explicitly, so slots kept
/// at value zero still count.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f32>,
    /// Ascending indices of the `k` retained slots.
    pub retained: Vec<usize>,
    pub row: Option<RowRef>,
}

#[derive(Clone, Debug)]
pub struct SaeModel {
    config: SaeConfig,
    /// `w_enc [in x hidden]`, `b_enc [hidden]`, `w_dec [hidden x in]`, `b_dec [in]`.
    params: Vec<Arc<Tensor>>,
    center: Option<Vec<f32>>,
}

const NAMES: [&str; 4] = ["w_enc", "b_enc", "w_dec", "b_dec"];

impl SaeModel {
    /// Encoder columns are random unit vectors; the decoder starts as the
    /// encoder's transpose and both biases at zero.
    pub fn new(config: SaeConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.hidden_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut w = Tensor::<f32>::randn(&[d, h], 1.0, &mut rng);
        let mut norms = vec![0f32; h];
        for (i, v) in w.data().iter().enumerate() {
            norms[i % h] += v * v;
        }
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v /= norms[i % h].sqrt().max(f32::MIN_POSITIVE);
        }
        let w_dec = transpose(&w);
        Ok(Self {
            params: vec![
                Arc::new(w),
                Arc::new(Tensor::zeros(&[h])),
                Arc::new(w_dec),
                Arc::new(Tensor::zeros(&[d])),
            ],
            config,
            center: None,
        })
    }

    pub fn from_parameters(config: SaeConfig, params: [Tensor; 4], center: Option<Vec<f32>>) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.input_dim, config.hidden_dim);
        let shapes: [&[usize]; 4] = [&[d, h], &[h], &[h, d], &[d]];
        for ((p, s), name) in params.iter().zip(shapes).zip(NAMES) {
            if p.shape() != s {
                return Err(Error::Config(format!("sae {name}: shape {:?}, expected {s:?}", p.shape())));
            }
        }
        if center.as_ref().is_some_and(|c| c.len() != d) {
            return Err(Error::Config(format!("sae center vector must have {d} entries")));
        }
        Ok(Self {
            config,
            params: params.into_iter().map(Arc::new).collect(),
            center,
        })
    }

    pub fn config(&self) -> &SaeConfig {
        &self.config
    }

    pub fn w_enc(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn b_enc(&self) -> &Tensor {
        &self.params[1]
    }

    pub fn w_dec(&self) -> &Tensor {
        &self.params[2]
    }

    pub fn b_dec(&self) -> &Tensor {
        &self.params[3]
    }

    pub fn center(&self) -> Option<&[f32]> {
        self.center.as_deref()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(Arc::make_mut).collect()
    }

    fn centered(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.last_dim() != self.config.input_dim {
            return Err(Error::dim("sae input", x.shape(), &[self.config.input_dim]));
        }
        let mut x = x.clone();
        if let Some(c) = &self.center {
            let d = c.len();
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v -= c[i % d];
            }
        }
        Ok(x)
    }

    /// ReLU pre-activations `[rows x hidden]`, before top-k.
    pub fn pre_activations(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.centered(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (w, b) = (g.leaf_shared(Arc::clone(&self.params[0]), false), g.leaf_shared(Arc::clone(&self.params[1]), false));
        let h = g.linear(xv, w, b)?;
        let h = g.relu(h);
        Ok(g.value(h).clone())
    }

    /// Sparse codes `[rows x hidden]` for a batch of inputs `[rows x in]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let pre = self.pre_activations(x)?;
        crate::autograd::top_k_mask(&pre, self.config.k)
    }

    pub fn encode(&self, x: &[f32]) -> Result<LatentCode> {
        if x.len() != self.config.input_dim {
            return Err(Error::dim("sae_encode", &[x.len()], &[self.config.input_dim]));
        }
        let pre = self.pre_activations(&Tensor::new(&[1, x.len()], x.to_vec())?)?;
        let retained = top_k_indices(pre.data(), self.config.k);
        let mut values = vec![0.0; self.config.hidden_dim];
        for &i in &retained {
            values[i] = pre.data()[i];
        }
        Ok(LatentCode {
            values,
            retained,
            row: None,
        })
    }

    /// Reconstructions `[rows x in]` from codes `[rows x hidden]`.
    pub fn decode_batch(&self, code: &Tensor) -> Result<Tensor> {
        if code.shape().len() != 2 || code.last_dim() != self.config.hidden_dim {
            return Err(Error::dim("sae_decode", code.shape(), &[self.config.hidden_dim]));
        }
        let mut g = Graph::new();
        let c = g.constant(code.clone());
        let (w, b) = (g.leaf_shared(Arc::clone(&self.params[2]), false), g.leaf_shared(Arc::clone(&self.params[3]), false));
        let y = g.linear(c, w, b)?;
        let mut y = g.value(y).clone();
        if let Some(c) = &self.center {
            let d = c.len();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v += c[i % d];
            }
        }
        Ok(y)
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Vec<f32>> {
        let t = Tensor::new(&[1, code.values.len()], code.values.clone())
            .map_err(|_| Error::dim("sae_decode", &[code.values.len()], &[self.config.hidden_dim]))?;
        Ok(self.decode_batch(&t)?.into_data())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode_batch(&self.encode_batch(x)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let center = self
            .center
            .as_ref()
            .map(|c| Tensor::new(&[c.len()], c.clone()).expect("vector"));
        let mut tensors: Vec<(&str, &Tensor)> = NAMES.iter().copied().zip(self.params.iter().map(|p| p.as_ref())).collect();
        if let Some(c) = &center {
            tensors.push(("center", c));
        }
        encode_weights(MAGIC, &config, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = decode_weights(bytes, MAGIC)?;
        let config: SaeConfig = serde_json::from_str(&decoded.config_json)
            .map_err(|e| Error::format(16, format!("config: {e}")))?;
        let mut tensors = decoded.tensors.into_iter();
        let mut next = |name: &str| -> Result<Tensor> {
            match tensors.next() {
                Some((found, t)) if found == name => Ok(t),
                Some((found, _)) => Err(Error::Config(format!("checkpoint tensor {found} where {name} expected"))),
                None => Err(Error::Config(format!("checkpoint missing tensor {name}"))),
            }
        };
        let params = [next("w_enc")?, next("b_enc")?, next("w_dec")?, next("b_dec")?];
        let center = match tensors.next() {
            Some((name, t)) if name == "center" => Some(t.into_data()),
            Some((name, _)) => return Err(Error::Config(format!("unexpected checkpoint tensor {name}"))),
            None => None,
        };
        Self::from_parameters(config, params, center)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).expect("transpose")
}

/// Outcome of one early-stopping observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a loss that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        if loss < self.best - self.min_delta || (self.best.is_infinite() && loss.is_finite()) {
            self.best = loss;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub improved: bool,
}

pub struct SaeTraining {
    /// Weights from the epoch with the lowest val MSE.
    pub model: SaeModel,
    pub log: Vec<SaeEpochRecord>,
    pub best_epoch: usize,
}

fn check_set(cfg: &SaeConfig, set: &ActivationSet, what: &str) -> Result<()> {
    if set.rows() == 0 {
        return Err(Error::Input(format!("sae layer {}: {what} set is empty", cfg.layer)));
    }
    if set.dim() != cfg.input_dim {
        return Err(Error::dim("train_sae", &[set.rows(), set.dim()], &[cfg.input_dim]));
    }
    Ok(())
}

/// Minibatch Adam on reconstruction MSE with patience-based early stopping
/// on validation MSE.
pub fn train_sae(cfg: &SaeConfig, train: &ActivationSet, val: &ActivationSet) -> Result<SaeTraining> {
    cfg.validate()?;
    check_set(cfg, train, "train")?;
    check_set(cfg, val, "validation")?;
    let mut model = SaeModel::new(cfg.clone())?;
    if cfg.center {
        let d = cfg.input_dim;
        let mut mean = vec![0f64; d];
        for (i, v) in train.data.data().iter().enumerate() {
            mean[i % d] += *v as f64;
        }
        model.center = Some(mean.iter().map(|m| (m / train.rows() as f64) as f32).collect());
    }
    let x_train = model.centered(&train.data)?;
    let adam = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::with_sizes(adam, model.params.iter().map(|p| p.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut order: Vec<usize> = (0..train.rows()).collect();
    let mut log = Vec::new();
    let mut best = (0, model.clone());
    let mut best_mse = f64::INFINITY;
    let d = cfg.input_dim;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(chunk.len() * d);
            for &r in chunk {
                rows.extend_from_slice(x_train.row(r));
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[chunk.len(), d], rows)?);
            let p: Vec<_> = model.params.iter().map(|t| g.leaf_shared(Arc::clone(t), true)).collect();
            let h = g.linear(x, p[0], p[1])?;
            let h = g.relu(h);
            let h = g.top_k_mask(h, cfg.k)?;
            let y = g.linear(h, p[2], p[3])?;
            let loss = g.mse(y, x)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { step: epoch, loss: value });
            }
            sum += value * chunk.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor> = p
                .iter()
                .map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
                .collect();
            drop(g);
            opt.step(&mut model.parameters_mut(), &grads)?;
        }
        let val_mse = evaluate_sae(&model, val).map(|e| e.mse).or_else(|e| match e {
            // the cosine half may be undefined; MSE alone drives stopping
            Error::Undefined(_) => reconstruction_mse(&model, val),
            other => Err(other),
        })?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite { step: epoch, loss: val_mse });
        }
        let decision = stopper.observe(val_mse);
        log.push(SaeEpochRecord {
            epoch,
            train_mse: sum / train.rows() as f64,
            val_mse,
            improved: decision == StopDecision::Improved,
        });
        // patience needs a min_delta gain, but the kept weights are the
        // plain minimum so no logged epoch beats them
        if val_mse < best_mse {
            best_mse = val_mse;
            best = (epoch, model.clone());
        }
        if decision == StopDecision::Stop {
            break;
        }
    }
    Ok(SaeTraining {
        model: best.1,
        log,
        best_epoch: best.0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeEvaluation {
    pub layer: u32,
    pub mse: f64,
    pub cosine: f64,
    pub rows: usize,
    pub excluded_zero_norm: usize,
}

const EVAL_CHUNK: usize = 1024;

fn reconstruction_mse(model: &SaeModel, set: &ActivationSet) -> Result<f64> {
    let mut total = 0.0;
    for_each_reconstruction(model, set, |x, y| {
        total += x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
    })?;
    Ok(total / (set.rows() * set.dim()) as f64)
}

fn for_each_reconstruction(model: &SaeModel, set: &ActivationSet, mut f: impl FnMut(&[f32], &[f32])) -> Result<()> {
    let d = set.dim();
    for start in (0..set.rows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(set.rows());
        let x = Tensor::new(&[end - start, d], set.data.data()[start * d..end * d].to_vec())?;
        let y = model.reconstruct(&x)?;
        for r in 0..end - start {
            f(x.row(r), y.row(r));
        }
    }
    Ok(())
}

/// Per-element MSE and mean row cosine similarity. Rows with zero norm are
/// left out of the cosine mean and counted.
pub fn evaluate_sae(model: &SaeModel, set: &ActivationSet) -> Result<SaeEvaluation> {
    if set.rows() == 0 {
        return Err(Error::Input("evaluate_sae: empty set".into()));
    }
    if set.dim() != model.config.input_dim {
        return Err(Error::dim("evaluate_sae", &[set.dim()], &[model.config.input_dim]));
    }
    let mut sq = 0.0;
    let mut cos_sum = 0.0;
    let mut counted = 0usize;
    for_each_reconstruction(model, set, |x, y| {
        let (mut xx, mut yy, mut xy, mut row_sq) = (0.0, 0.0, 0.0, 0.0);
        for (&a, &b) in x.iter().zip(y) {
            let (a, b) = (a as f64, b as f64);
            xx += a * a;
            yy += b * b;
            xy += a * b;
            row_sq += (a - b) * (a - b);
        }
        sq += row_sq;
        if xx > 0.0 {
            counted += 1;
            if yy > 0.0 {
                cos_sum += xy / (xx.sqrt() * yy.sqrt());
            }
        }
    })?;
    let rows = set.rows();
    let mse = sq / (rows * set.dim()) as f64;
    if counted == 0 {
        return Err(Error::Undefined(format!(
            "cosine undefined: all {rows} rows of layer {} have zero norm",
            set.layer
        )));
    }
    Ok(SaeEvaluation {
        layer: set.layer,
        mse,
        cosine: cos_sum / counted as f64,
        rows,
        excluded_zero_norm: rows - counted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_follow_depth() {
        assert_eq!(SaeConfig::for_layer(1, 896).hidden_dim, 2688);
        assert_eq!(SaeConfig::for_layer(2, 896).hidden_dim, 2688);
        assert_eq!(SaeConfig::for_layer(3, 896).hidden_dim, 3584);
        assert_eq!(SaeConfig::for_layer(5, 896).hidden_dim, 3584);
        assert_eq!(SaeConfig::for_layer(6, 896).hidden_dim, 4480);
        assert_eq!(SaeConfig::for_layer(8, 896).hidden_dim, 4480);
        let mut c = SaeConfig::for_layer(4, 16);
        c.hidden_dim = 48;
        c.k = 8;
        assert!(c.validate().is_ok());
        assert!(c.validate_band().is_err());
    }

    #[test]
    fn worsening_from_the_first_epoch_stops_at_eleven() {
        let mut s = EarlyStopping::new(10, 1e-6);
        let mut stopped = None;
        for epoch in 1..=500 {
            if s.observe(1.0 + epoch as f64) == StopDecision::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(11));
    }

    #[test]
    fn tiny_gains_do_not_count() {
        let mut s = EarlyStopping::new(2, 1e-6);
        assert_eq!(s.observe(1.0), StopDecision::Improved);
        assert_eq!(s.observe(1.0 - 5e-7), StopDecision::Continue);
        assert_eq!(s.observe(0.5), StopDecision::Improved);
    }

    #[test]
    fn rejects_bad_k() {
        let mut c = SaeConfig::for_layer(1, 4);
        c.k = 13;
        assert!(SaeModel::new(c).is_err());
    }
}
