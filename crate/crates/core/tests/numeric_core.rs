use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saeaudit::autograd::{top_k_mask, AttentionParams};
use saeaudit::gradcheck::{check_gradients, probe_loss};
use saeaudit::{Error, Graph, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::<f64>::new();
    let i2 = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)];
    let rep = check_gradients(&inputs, H, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe_loss(g, y)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[2, 3], vec![4.0, 4.0, 4.0, -1.0, -1.0, -1.0]).unwrap());
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
    let gain = g.constant(Tensor::full(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_width_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let gain = g.constant(Tensor::zeros(&[4]));
    let bias = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.layer_norm(x, gain, bias, 1e-5), Err(Error::Dimension { .. })));
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [rand_t(&[3, 5], &mut rng), rand_t(&[5], &mut rng), rand_t(&[5], &mut rng)];
    let rep = check_gradients(&inputs, H, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe_loss(g, y)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

fn attention_inputs(d: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for _ in 0..4 {
        v.push(Tensor::randn(&[d, d], 0.5, rng));
        v.push(Tensor::randn(&[d], 0.1, rng));
    }
    v
}

fn attention_params(v: &[saeaudit::Var]) -> AttentionParams {
    AttentionParams {
        w_query: v[0],
        b_query: v[1],
        w_key: v[2],
        b_key: v[3],
        w_value: v[4],
        b_value: v[5],
        w_out: v[6],
        b_out: v[7],
    }
}

#[test]
fn single_token_attention_projects_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let weights = attention_inputs(d, &mut rng);
    let x = rand_t(&[1, d], &mut rng);

    let mut g = Graph::<f64>::new();
    let ws: Vec<_> = weights.iter().map(|w| g.constant(w.clone())).collect();
    let xv = g.constant(x.clone());
    let (out, _) = g.causal_self_attention(xv, &attention_params(&ws), 1, 1, 2).unwrap();

    let mut h = Graph::<f64>::new();
    let hs: Vec<_> = weights.iter().map(|w| h.constant(w.clone())).collect();
    let hx = h.constant(x);
    let v = h.linear(hx, hs[4], hs[5]).unwrap();
    let expect = h.linear(v, hs[6], hs[7]).unwrap();
    for (a, b) in g.value(out).data().iter().zip(h.value(expect).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_keys_give_uniform_weights() {
    let (seq, d, heads) = (5, 4, 2);
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::full(&[seq, d], 0.3));
    let k = g.constant(Tensor::full(&[seq, d], 0.7));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = g.constant(rand_t(&[seq, d], &mut rng));
    let ctx = g.attention(q, k, v, 1, seq, heads).unwrap();
    let probs = g.attention_probs(ctx).unwrap();
    for h in 0..heads {
        for i in 0..seq {
            for j in 0..seq {
                let p = probs.data()[(h * seq + i) * seq + j];
                let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((p - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 6]));
    assert!(matches!(g.attention(x, x, x, 1, 2, 4), Err(Error::Config(_))));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (seq, d) = (4, 6);
    let mut inputs = vec![rand_t(&[seq, d], &mut rng)];
    inputs.extend(attention_inputs(d, &mut rng));
    let rep = check_gradients(&inputs, H, |g, v| {
        let p = attention_params(&v[1..]);
        let (y, _) = g.causal_self_attention(v[0], &p, 1, seq, 2)?;
        probe_loss(g, y)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 4]));
    let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
    assert!((g.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

    let logits = g.constant(Tensor::new(&[1, 4], vec![20.0, 0.0, 0.0, 0.0]).unwrap());
    let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
    assert!(g.value(loss).data()[0] < 1e-6);

    let logits = g.constant(Tensor::zeros(&[1, 4]));
    assert!(matches!(
        g.softmax_cross_entropy(logits, &[4]),
        Err(Error::Index { index: 4, bound: 4, .. })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = rand_t(&[3, 5], &mut rng);
    let targets = [1usize, 4, 0];
    let rep = check_gradients(std::slice::from_ref(&logits), H, |g, v| {
        g.softmax_cross_entropy(v[0], &targets)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");

    let mut g = Graph::<f64>::new();
    let l = g.param(logits.clone());
    let loss = g.softmax_cross_entropy(l, &targets).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(l).unwrap();
    let probs = saeaudit::tensor::softmax_rows(&logits);
    for (r, &t) in targets.iter().enumerate() {
        for c in 0..5 {
            let onehot = if t == c { 1.0 } else { 0.0 };
            let expect = (probs.row(r)[c] - onehot) / 3.0;
            assert!((grad.row(r)[c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn top_k_examples() {
    let x = Tensor::<f64>::new(&[1, 4], vec![3.0, 1.0, 2.0, 0.0]).unwrap();
    assert_eq!(top_k_mask(&x, 2).unwrap().data(), &[3.0, 0.0, 2.0, 0.0]);
    assert_eq!(top_k_mask(&x, 4).unwrap(), x);
    assert!(matches!(top_k_mask(&x, 0), Err(Error::Config(_))));
    assert!(matches!(top_k_mask(&x, 5), Err(Error::Config(_))));

    // ties at the cut keep the lower index
    let x = Tensor::<f64>::new(&[1, 5], vec![1.0, 2.0, 2.0, 2.0, 0.5]).unwrap();
    assert_eq!(top_k_mask(&x, 2).unwrap().data(), &[0.0, 2.0, 2.0, 0.0, 0.0]);
}

fn sort_oracle(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps ascending index among equal values
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut keep = idx[..k].to_vec();
    keep.sort();
    keep
}

#[test]
fn top_k_matches_sort_oracle_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let h = rng.random_range(1..24);
        let k = rng.random_range(1..=h);
        // small integer range forces many ties
        let row: Vec<f64> = (0..h).map(|_| rng.random_range(0..5) as f64).collect();
        let x = Tensor::new(&[1, h], row.clone()).unwrap();
        let masked = top_k_mask(&x, k).unwrap();
        let kept: Vec<usize> = saeaudit::autograd::top_k_indices(&row, k);
        assert_eq!(kept, sort_oracle(&row, k));
        for (j, &v) in masked.data().iter().enumerate() {
            assert_eq!(v, if kept.contains(&j) { row[j] } else { 0.0 });
        }
    }
}

#[test]
fn top_k_gradient_flows_only_through_kept_slots() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_t(&[3, 6], &mut rng);
    let rep = check_gradients(std::slice::from_ref(&x), H, |g, v| {
        let y = g.top_k_mask(v[0], 2)?;
        probe_loss(g, y)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_t(&[4, 3], &mut rng);
    let b = rand_t(&[3], &mut rng);
    let y = rand_t(&[4, 3], &mut rng);
    let rep = check_gradients(&[x, b, y], H, |g, v| {
        let h = g.add_bias(v[0], v[1])?;
        let h = g.gelu(h);
        let r = g.relu(v[2]);
        let s = g.add(h, r)?;
        let s = g.softmax(s);
        let s = g.scale(s, 1.7);
        let m = g.mse(s, v[2])?;
        Ok(m)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn embedding_gradient_scatters_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let table = rand_t(&[5, 3], &mut rng);
    let ids = [4usize, 1, 4, 0];
    let rep = check_gradients(&[table], H, |g, v| {
        let e = g.embedding(v[0], &ids)?;
        probe_loss(g, e)
    })
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");

    let mut g = Graph::<f64>::new();
    let t = g.constant(Tensor::zeros(&[5, 3]));
    assert!(matches!(g.embedding(t, &[5]), Err(Error::Index { .. })));
}

#[test]
fn dropout_is_inverted_and_identity_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(&[1, 1000], 1.0));
    assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
    let y = g.dropout(x, 0.2, &mut rng).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((700..900).contains(&kept));
    assert!(g.dropout(x, 1.0, &mut rng).is_err());
}

#[test]
fn backward_populates_every_reachable_parameter() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[1, 3], -1.0));
    let w = g.param(Tensor::full(&[3, 2], 1.0));
    let unused = g.param(Tensor::full(&[2], 1.0));
    let h = g.matmul(a, w).unwrap();
    let r = g.relu(h);
    let loss = g.mean(r);
    g.backward(loss).unwrap();
    assert!(g.grad(a).is_some());
    assert!(g.grad(w).is_some());
    assert!(g.grad(unused).is_none());
    assert_eq!(g.grad(a).unwrap().shape(), &[1, 3]);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let n = vals.len();
        let s = saeaudit::tensor::softmax_rows(&Tensor::new(&[1, n], vals).unwrap());
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn top_k_keeps_exactly_k(vals in prop::collection::vec(-5i32..5, 1..40), kf in 0.0f64..1.0) {
        let h = vals.len();
        let k = 1 + ((h - 1) as f64 * kf) as usize;
        let row: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
        let kept = saeaudit::autograd::top_k_indices(&row, k);
        prop_assert_eq!(kept.len(), k);
        let min_kept = kept.iter().map(|&j| row[j]).fold(f64::INFINITY, f64::min);
        let max_dropped = (0..h).filter(|j| !kept.contains(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_kept >= max_dropped);
    }
}
