use std::path::PathBuf;

use saeaudit::gpt::{GptConfig, GptModel, Mode};
use saeaudit::lm_train::{mean_nll, perplexity, token_nll, train_lm, TrainRunConfig, BEST_CHECKPOINT};
use saeaudit::tokenizer::BpeVocab;
use saeaudit::Error;

const SENTENCE: &str =
    "It is a truth universally acknowledged, that a single man in possession of a good fortune must be in want of a wife.";

fn vocab() -> BpeVocab {
    let d = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/vocab");
    BpeVocab::load(d.join("toy-vocab.json"), d.join("toy-merges.txt")).unwrap()
}

/// The one-sentence corpus, repeated with a separator.
fn repeated_sentence(v: &BpeVocab, copies: usize) -> Vec<u32> {
    let mut one = v.encode(SENTENCE);
    one.push(v.end_of_text().unwrap());
    one.repeat(copies)
}

fn memorize_config(vocab_size: usize) -> GptConfig {
    GptConfig {
        vocab_size,
        embed_dim: 64,
        layers: 2,
        heads: 4,
        dropout: 0.0,
        context_length: 32,
        seed: 11,
    }
}

fn run_cfg(steps: usize) -> TrainRunConfig {
    TrainRunConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        batch_size: 4,
        steps,
        eval_interval: 10,
        seed: 5,
        checkpoint_dir: None,
    }
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let v = vocab();
    let m = GptModel::new(memorize_config(v.len())).unwrap();
    let ids = repeated_sentence(&v, 4);
    let out = train_lm(m.clone(), &ids, &ids, &run_cfg(0)).unwrap();
    assert!(out.log.is_empty());
    assert!(out.best.is_none());
    assert!(m.parameters().eq(out.model.parameters()));
}

#[test]
fn memorizes_a_single_sentence() {
    let v = vocab();
    let ids = repeated_sentence(&v, 20);
    let m = GptModel::new(memorize_config(v.len())).unwrap();
    let out = train_lm(m, &ids, &[], &run_cfg(200)).unwrap();
    let last = out.log.last().unwrap();
    assert_eq!(last.step, 200);
    assert!(last.train_loss < 0.5, "final train loss {}", last.train_loss);
    let ppl = perplexity(&out.model, &ids, 32).unwrap();
    assert!(ppl < 1.7, "perplexity {ppl}");
}

#[test]
fn fixed_seed_gives_identical_losses() {
    let v = vocab();
    let ids = repeated_sentence(&v, 6);
    let cfg = GptConfig {
        dropout: 0.1,
        ..memorize_config(v.len())
    };
    let run = || {
        let out = train_lm(GptModel::new(cfg.clone()).unwrap(), &ids, &ids[..40], &run_cfg(20)).unwrap();
        out.log
            .iter()
            .map(|r| (r.step, r.train_loss.to_bits(), r.val_loss.map(f64::to_bits), r.tokens_seen))
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a.len(), 2);
    assert_eq!(a, run());
}

#[test]
fn smoothed_loss_decreases_early() {
    let v = vocab();
    let ids = repeated_sentence(&v, 20);
    let m = GptModel::new(memorize_config(v.len())).unwrap();
    let cfg = TrainRunConfig {
        eval_interval: 1,
        ..run_cfg(60)
    };
    let losses: Vec<f64> = train_lm(m, &ids, &[], &cfg).unwrap().log.iter().map(|r| r.train_loss).collect();
    let avg: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "{avg:?}");
    }
}

#[test]
fn best_checkpoint_tracks_minimum_val_loss() {
    let v = vocab();
    let train = repeated_sentence(&v, 10);
    let mut val = v.encode("She had a great deal of money and was much admired by all her friends.");
    val.push(v.end_of_text().unwrap());
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainRunConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..run_cfg(60)
    };
    let out = train_lm(GptModel::new(memorize_config(v.len())).unwrap(), &train, &val, &cfg).unwrap();
    let min = out
        .log
        .iter()
        .filter_map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    let (step, best, model) = out.best.as_ref().unwrap();
    assert_eq!(*best, min);
    assert_eq!(out.log.iter().find(|r| r.step == *step).unwrap().val_loss, Some(min));
    let saved = GptModel::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert!(saved.parameters().eq(model.parameters()));
    assert_eq!(mean_nll(&saved, &val, 32).unwrap(), min);
}

#[test]
fn non_finite_loss_aborts() {
    let v = vocab();
    let ids = repeated_sentence(&v, 4);
    let mut m = GptModel::new(memorize_config(v.len())).unwrap();
    m.parameter_mut("lm_head.b").unwrap().data_mut()[0] = f32::NAN;
    assert!(matches!(
        train_lm(m, &ids, &[], &run_cfg(5)),
        Err(Error::NonFinite { step: 1, .. })
    ));
}

#[test]
fn uniform_predictor_has_vocabulary_perplexity() {
    let cfg = GptConfig {
        vocab_size: 997,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        dropout: 0.0,
        context_length: 16,
        seed: 0,
    };
    let mut m = GptModel::new(cfg).unwrap();
    for t in m.parameters_mut() {
        t.data_mut().fill(0.0);
    }
    let ids: Vec<u32> = (0..50).map(|i| (i * 37 % 997) as u32).collect();
    let ppl = perplexity(&m, &ids, 16).unwrap();
    assert!((ppl - 997.0).abs() <= 0.001 * 997.0, "{ppl}");
}

#[test]
fn perplexity_is_exp_of_direct_nll() {
    let v = vocab();
    let m = GptModel::new(memorize_config(v.len())).unwrap();
    let ids = v.encode(&format!("{SENTENCE} {SENTENCE} And yet the wife was not so easily won."));
    assert!(ids.len() > 40);
    // direct accumulation over windows [0, 32), [32, 64), ..., [.., n - 1)
    let mut total = 0.0;
    let mut count = 0;
    let n = ids.len() - 1;
    for start in (0..n).step_by(32) {
        let end = (start + 32).min(n);
        let (logits, _) = m.forward(&ids[start..end], Mode::Eval, false).unwrap();
        for r in 0..end - start {
            let row: Vec<f64> = logits.row(r).iter().map(|&x| x as f64).collect();
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            total += lse - row[ids[start + r + 1] as usize];
            count += 1;
        }
    }
    let direct = (total / count as f64).exp();
    let ppl = perplexity(&m, &ids, 32).unwrap();
    assert!((ppl - direct).abs() < 1e-9 * direct, "{ppl} vs {direct}");
    assert_eq!(token_nll(&m, &ids, 8).unwrap().len(), ids.len() - 1);
}

#[test]
fn perplexity_input_errors() {
    let m = GptModel::new(memorize_config(1000)).unwrap();
    assert!(matches!(perplexity(&m, &[], 32), Err(Error::Input(_))));
    assert!(matches!(perplexity(&m, &[1], 32), Err(Error::Input(_))));
    assert!(matches!(perplexity(&m, &[1, 2], 0), Err(Error::Config(_))));
}
