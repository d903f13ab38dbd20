use proptest::prelude::*;
use saeaudit::autograd::AttentionParams;
use saeaudit::gpt::{GptConfig, GptModel, Mode, LN_EPS};
use saeaudit::{Error, Graph, Tensor};

fn toy(seed: u64) -> GptConfig {
    GptConfig {
        vocab_size: 13,
        embed_dim: 8,
        layers: 2,
        heads: 2,
        dropout: 0.2,
        context_length: 10,
        seed,
    }
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let m = GptModel::new(toy(1)).unwrap();
    let ids = [3, 1, 4, 1, 5, 9];
    let (a, _) = m.forward(&ids, Mode::Eval, false).unwrap();
    let (b, _) = m.forward(&ids, Mode::Eval, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[6, 13]);
}

#[test]
fn default_config_shapes_and_parameter_count() {
    let cfg = GptConfig::default();
    let (v, d, c, l) = (50_257usize, 896usize, 256usize, 8usize);
    // embeddings, blocks (LNs, four attention maps, 4x MLP), final LN, head
    let closed = v * d + c * d + l * (12 * d * d + 13 * d) + 2 * d + d * v + v;
    assert_eq!(closed, 167_505_489);
    assert_eq!(cfg.parameter_count(), closed);

    let m = GptModel::new(cfg).unwrap();
    assert_eq!(m.parameter_count(), closed);
    let (logits, trace) = m.forward(&[464], Mode::Eval, true).unwrap();
    assert_eq!(logits.shape(), &[1, 50_257]);
    let trace = trace.unwrap();
    assert_eq!(trace.layers.len(), 8);
    assert!(trace.layers.iter().all(|t| t.shape() == [1, 896]));
}

/// The same network spelled out op by op against the named weights.
fn manual_logits(m: &GptModel, ids: &[usize]) -> Tensor {
    let cfg = m.config().clone();
    let mut g = Graph::<f32>::new();
    let w = |g: &mut Graph<f32>, name: &str| g.constant(m.parameter(name).unwrap().clone());
    let t = ids.len();
    let wte = w(&mut g, "wte");
    let wpe = w(&mut g, "wpe");
    let te = g.embedding(wte, ids).unwrap();
    let positions: Vec<usize> = (0..t).collect();
    let pe = g.embedding(wpe, &positions).unwrap();
    let mut x = g.add(te, pe).unwrap();
    for l in 0..cfg.layers {
        let p = |s: &str| format!("h{l}.{s}");
        let (g1, b1) = (w(&mut g, &p("ln_1.g")), w(&mut g, &p("ln_1.b")));
        let h = g.layer_norm(x, g1, b1, LN_EPS).unwrap();
        let lin = |g: &mut Graph<f32>, h, wn: &str, bn: &str| {
            let (wv, bv) = (w(g, &p(wn)), w(g, &p(bn)));
            g.linear(h, wv, bv).unwrap()
        };
        let q = lin(&mut g, h, "attn.w_q", "attn.b_q");
        let k = lin(&mut g, h, "attn.w_k", "attn.b_k");
        let v = lin(&mut g, h, "attn.w_v", "attn.b_v");
        let ctx = g.attention(q, k, v, 1, t, cfg.heads).unwrap();
        let a = lin(&mut g, ctx, "attn.w_o", "attn.b_o");
        x = g.add(x, a).unwrap();
        let (g2, b2) = (w(&mut g, &p("ln_2.g")), w(&mut g, &p("ln_2.b")));
        let h = g.layer_norm(x, g2, b2, LN_EPS).unwrap();
        let h = lin(&mut g, h, "mlp.w_fc", "mlp.b_fc");
        let h = g.gelu(h);
        let h = lin(&mut g, h, "mlp.w_proj", "mlp.b_proj");
        x = g.add(x, h).unwrap();
    }
    let (gf, bf) = (w(&mut g, "ln_f.g"), w(&mut g, "ln_f.b"));
    let h = g.layer_norm(x, gf, bf, LN_EPS).unwrap();
    let (hw, hb) = (w(&mut g, "lm_head.w"), w(&mut g, "lm_head.b"));
    let logits = g.linear(h, hw, hb).unwrap();
    g.value(logits).clone()
}

#[test]
fn logits_match_manual_composition() {
    let mut m = GptModel::new(toy(7)).unwrap();
    // make biases and gains non-trivial so every weight matters
    for name in m.parameter_names().to_vec() {
        let t = m.parameter_mut(&name).unwrap();
        if t.shape().len() == 1 {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i % 5) as f32 - 2.0);
            }
        }
    }
    let ids = [2usize, 7, 7, 0, 12];
    let expected = manual_logits(&m, &ids);
    let ids32: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    let (got, _) = m.forward(&ids32, Mode::Eval, false).unwrap();
    assert_eq!(got.shape(), expected.shape());
    for (a, b) in got.data().iter().zip(expected.data()) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn attention_params_struct_is_exported() {
    // the public attention helper takes the same handles the model uses
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2, 4], 0.5));
    let w = g.constant(Tensor::zeros(&[4, 4]));
    let b = g.constant(Tensor::zeros(&[4]));
    let p = AttentionParams {
        w_query: w,
        b_query: b,
        w_key: w,
        b_key: b,
        w_value: w,
        b_value: b,
        w_out: w,
        b_out: b,
    };
    let (out, _) = g.causal_self_attention(x, &p, 1, 2, 2).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn generate_edge_cases() {
    let m = GptModel::new(toy(2)).unwrap();
    assert_eq!(m.generate(&[4, 5], 0, 0.0, 0).unwrap(), vec![4, 5]);
    let a = m.generate(&[4, 5], 6, 0.0, 0).unwrap();
    let b = m.generate(&[4, 5], 6, 0.0, 99).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..2], &[4, 5]);
    assert!(matches!(m.generate(&[4, 5], 9, 0.0, 0), Err(Error::Length { len: 11, max: 10 })));
    assert!(m.generate(&[4], 1, -1.0, 0).is_err());
}

#[test]
fn generate_follows_rigged_logits() {
    let mut m = GptModel::new(toy(3)).unwrap();
    m.parameter_mut("lm_head.b").unwrap().data_mut()[7] += 20.0;
    for seed in 0..5 {
        let out = m.generate(&[1], 9, 0.5, seed).unwrap();
        assert!(out[1..].iter().all(|&t| t == 7), "{out:?}");
    }
}

#[test]
fn sampled_generation_is_seeded() {
    let m = GptModel::new(toy(4)).unwrap();
    let a = m.generate(&[1, 2], 8, 1.0, 5).unwrap();
    assert_eq!(a, m.generate(&[1, 2], 8, 1.0, 5).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = GptModel::new(toy(5)).unwrap();
    m.save(&path).unwrap();
    let back = GptModel::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.parameter_names(), m.parameter_names());
    for (a, b) in m.parameters().zip(back.parameters()) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let bytes = GptModel::new(toy(5)).unwrap().to_bytes();
    for cut in [3, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        match GptModel::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut as u64),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
}

#[test]
fn perturbed_magic_is_a_version_error() {
    let mut bytes = GptModel::new(toy(5)).unwrap().to_bytes();
    bytes[0] ^= 0x20;
    match GptModel::from_bytes(&bytes) {
        Err(Error::Version(msg)) => assert!(msg.contains("magic"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let mut bytes = GptModel::new(toy(5)).unwrap().to_bytes();
    bytes[8] = 2;
    assert!(matches!(GptModel::from_bytes(&bytes), Err(Error::Version(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn later_tokens_do_not_affect_earlier_logits(
        ids in prop::collection::vec(0u32..13, 2..10),
        j in 1usize..10,
        replacement in 0u32..13,
    ) {
        let j = j % ids.len();
        let m = GptModel::new(toy(6)).unwrap();
        let (before, _) = m.forward(&ids, Mode::Eval, false).unwrap();
        let mut changed = ids.clone();
        changed[j] = replacement;
        let (after, _) = m.forward(&changed, Mode::Eval, false).unwrap();
        for r in 0..j {
            prop_assert_eq!(before.row(r), after.row(r));
        }
    }

    #[test]
    fn trace_has_one_entry_per_block(ids in prop::collection::vec(0u32..13, 1..10)) {
        let m = GptModel::new(toy(8)).unwrap();
        let (_, trace) = m.forward(&ids, Mode::Eval, true).unwrap();
        let trace = trace.unwrap();
        prop_assert_eq!(trace.layers.len(), 2);
        for t in &trace.layers {
            prop_assert_eq!(t.shape(), &[ids.len(), 8][..]);
        }
    }
}
