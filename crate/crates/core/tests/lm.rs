// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-model behaviour: memorization, determinism, gradients,
//! causality and the adapter slot.

use ndarray::Array2;
use nspu::baselines::{run_ga, run_gd, BaselineConfig};
use nspu::corpus::{default_forget_slots, generate_corpus, make_split};
use nspu::forget::{build_from_matrix, make_filter};
use nspu::lm::kernel::{loss, loss_and_grad, Packed};
use nspu::lm::{train_lm, train_lm_with, LanguageModel, LmConfig, LmParams, Tokenizer, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(vocab: usize, seed: u64) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        dropout: 0.0,
        seed,
    }
}

fn texts() -> Vec<String> {
    vec![
        "who founded the lab ? mara quinn founded the lab".into(),
        "where is the lab ? the lab is in porto".into(),
        "what does the lab build ? the lab builds small robots".into(),
    ]
}

// ----------------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------------

#[test]
fn memorizes_one_sentence() {
    let text = vec!["the quick brown fox jumps over the lazy dog".to_string()];
    let tok = Tokenizer::build(text.iter().map(String::as_str));
    let c = LmConfig { d_model: 32, d_ff: 64, ..cfg(tok.vocab_size(), 1) };
    let (_, hist) = train_lm_with(&c, tok, &text, &TrainOptions::new(50, 1e-2)).unwrap();
    assert!(*hist.last().unwrap() < 0.1, "final loss {:?}", hist.last());
}

#[test]
fn training_is_deterministic() {
    let tok = Tokenizer::build(texts().iter().map(String::as_str));
    let c = cfg(tok.vocab_size(), 9);
    let a = train_lm(&c, &texts(), 5, 5e-3).unwrap();
    let b = train_lm(&c, &texts(), 5, 5e-3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_container().unwrap().to_bytes().unwrap(), b.to_container().unwrap().to_bytes().unwrap());
    let other = train_lm(&cfg(tok.vocab_size(), 10), &texts(), 5, 5e-3).unwrap();
    assert_ne!(a, other);
}

// ----------------------------------------------------------------------------
// Gradients
// ----------------------------------------------------------------------------

fn packed(model: &LanguageModel) -> Packed {
    let mut p = Packed::default();
    for t in texts() {
        p.push(&model.encode_text(&t).unwrap(), 1);
    }
    p
}

#[test]
fn f32_gradients_match_f64_finite_differences() {
    let tok = Tokenizer::build(texts().iter().map(String::as_str));
    let c = cfg(tok.vocab_size(), 4);
    let model = LanguageModel::init(&c, tok).unwrap();
    let batch = packed(&model);
    let p32: LmParams<f32> = LmParams::<f32>::init(&c).map(|x| x * 4.0);
    let p64: LmParams<f64> = p32.cast();
    let (_, g32) = loss_and_grad(&p32, &c, None, &batch, 1.0, None);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 24 {
        let idx = rng.random_range(0..p64.len());
        let h = 1e-5;
        let mut p = p64.clone();
        let x = p.get_flat(idx);
        p.set_flat(idx, x + h);
        let up = loss(&p, &c, None, &batch);
        p.set_flat(idx, x - h);
        let down = loss(&p, &c, None, &batch);
        let fd = (up - down) / (2.0 * h);
        let g = g32.get_flat(idx) as f64;
        if fd.abs() < 1e-4 {
            continue;
        }
        let rel = (g - fd).abs() / g.abs().max(fd.abs());
        assert!(rel < 1e-3, "param {idx}: analytic {g}, fd {fd}, rel {rel}");
        checked += 1;
    }
}

// ----------------------------------------------------------------------------
// Scoring
// ----------------------------------------------------------------------------

#[test]
fn logprobs_are_causal() {
    let tok = Tokenizer::build(texts().iter().map(String::as_str));
    let model = train_lm(&cfg(tok.vocab_size(), 3), &texts(), 3, 5e-3).unwrap();
    let a = model.token_logprobs("where is the lab ?", "the lab is in porto").unwrap();
    let b = model.token_logprobs("where is the lab ?", "the lab builds small robots").unwrap();
    assert_eq!(a[..2], b[..2]);
    assert_ne!(a[2], b[2]);
}

#[test]
fn zero_alpha_adapter_is_bit_neutral() {
    let tok = Tokenizer::build(texts().iter().map(String::as_str));
    let model = train_lm(&cfg(tok.vocab_size(), 3), &texts(), 3, 5e-3).unwrap();
    let basis = Array2::from_shape_fn((5, 16), |(i, j)| ((i * 5 + j * 3) % 7) as f64 - 3.0);
    let sub = build_from_matrix(&basis, 0.9).unwrap();
    for layer in 0..2 {
        let neutral = model.attach_filter(&make_filter(&sub, 0.0).unwrap(), layer).unwrap();
        for t in texts() {
            let (q, a) = t.split_once(" ? ").unwrap();
            assert_eq!(
                model.token_logprobs(q, a).unwrap(),
                neutral.token_logprobs(q, a).unwrap()
            );
        }
        let full = model.attach_filter(&make_filter(&sub, 1.0).unwrap(), layer).unwrap();
        assert_ne!(
            model.token_logprobs("where is the lab", "the lab is in porto").unwrap(),
            full.token_logprobs("where is the lab", "the lab is in porto").unwrap()
        );
    }
}

// ----------------------------------------------------------------------------
// Baselines
// ----------------------------------------------------------------------------

#[test]
fn baselines_leave_the_target_untouched() {
    let corpus = generate_corpus(2, 2);
    let split = make_split(&corpus, 0.5, default_forget_slots(&corpus, 0.5), 2).unwrap();
    let train: Vec<String> = split.training_records(&corpus).iter().map(|r| r.full_text()).collect();
    let tok = Tokenizer::build(train.iter().map(String::as_str));
    let c = LmConfig { max_seq_len: 64, ..cfg(tok.vocab_size(), 2) };
    let target = train_lm(&c, &train, 2, 5e-3).unwrap();
    let snapshot = target.clone();
    let forget = split.forget_records(&corpus);
    let retain = split.retain_records(&corpus);
    let ga = run_ga(&target, &forget, &BaselineConfig::ga(1, 1e-3)).unwrap();
    let gd = run_gd(&target, &forget, &retain, &BaselineConfig::gd(1, 1e-3, 1.0)).unwrap();
    assert_eq!(target, snapshot);
    assert_ne!(ga, target);
    assert_ne!(gd, target);
}
