//! Inputs for the kernel benchmarks, shared with the smoke tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saeaudit::autograd::AttentionParams;
use saeaudit::gpt::{GptConfig, GptModel};
use saeaudit::sae::{SaeConfig, SaeModel};
use saeaudit::{Graph, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut rng(seed))
}

/// `x @ w` through the graph, optionally with the backward pass.
pub fn matmul_step(a: &Tensor, b: &Tensor, backward: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.param(a.clone());
    let w = g.param(b.clone());
    let y = g.matmul(x, w)?;
    if backward {
        let l = g.mean(y);
        g.backward(l)?;
        return Ok(g.grad(w).expect("w requires grad"));
    }
    Ok(g.value(y).clone())
}

pub struct AttentionInput {
    pub x: Tensor,
    pub params: Vec<Tensor>,
    pub seq: usize,
    pub heads: usize,
}

pub fn attention_input(seq: usize, dim: usize, heads: usize, seed: u64) -> AttentionInput {
    let mut r = rng(seed);
    let mut params = Vec::new();
    for _ in 0..4 {
        params.push(Tensor::randn(&[dim, dim], 0.02, &mut r));
        params.push(Tensor::zeros(&[dim]));
    }
    AttentionInput {
        x: Tensor::randn(&[seq, dim], 1.0, &mut r),
        params,
        seq,
        heads,
    }
}

/// One causal self-attention forward pass.
pub fn attention_forward(inp: &AttentionInput) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(inp.x.clone());
    let v: Vec<Var> = inp.params.iter().map(|t| g.constant(t.clone())).collect();
    let p = AttentionParams {
        w_query: v[0],
        b_query: v[1],
        w_key: v[2],
        b_key: v[3],
        w_value: v[4],
        b_value: v[5],
        w_out: v[6],
        b_out: v[7],
    };
    let (y, _) = g.causal_self_attention(x, &p, 1, inp.seq, inp.heads)?;
    Ok(g.value(y).clone())
}

pub fn toy_gpt() -> Result<GptModel> {
    GptModel::new(GptConfig {
        vocab_size: 1000,
        embed_dim: 64,
        layers: 2,
        heads: 4,
        dropout: 0.0,
        context_length: 64,
        seed: 0,
    })
}

pub fn toy_sae(input: usize, hidden: usize, k: usize) -> Result<SaeModel> {
    SaeModel::new(SaeConfig {
        layer: 1,
        input_dim: input,
        hidden_dim: hidden,
        k,
        ..SaeConfig::default()
    })
}

/// Random scores with roughly `rate` positives, at least one.
pub fn ap_instance(n: usize, rate: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
    let mut r = rng(seed);
    let scores = (0..n).map(|_| r.random_range(0.0..10.0)).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(rate)).collect();
    labels[0] = true;
    (scores, labels)
}
