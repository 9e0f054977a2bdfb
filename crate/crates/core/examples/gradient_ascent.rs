// SPDX-License-Identifier: MIT OR Apache-2.0

// Gradient-ascent and gradient-difference baselines on a small target model.

use nspu::baselines::{mean_cnll, run_baseline, BaselineConfig};
use nspu::corpus::{default_forget_slots, generate_corpus, make_split};
use nspu::lm::{train_lm_with, LmConfig, Tokenizer, TrainOptions};
use nspu::Result;

#[derive(Debug)]
pub struct BaselineSummary {
    /// `(method, forget CNLL, retain CNLL)`; the first row is the target.
    pub rows: Vec<(String, f64, f64)>,
}

pub fn run_example() -> Result<BaselineSummary> {
    let corpus = generate_corpus(6, 2);
    let split = make_split(&corpus, 0.25, default_forget_slots(&corpus, 0.25), 6)?;
    let forget = split.forget_records(&corpus);
    let retain = split.retain_records(&corpus);
    let train: Vec<String> = split.training_records(&corpus).iter().map(|r| r.full_text()).collect();
    let tokenizer = Tokenizer::build(corpus.iter().map(|r| r.full_text()).collect::<Vec<_>>().iter().map(String::as_str));
    let config = LmConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 96,
        max_seq_len: 64,
        dropout: 0.0,
        seed: 6,
    };
    let (target, _) = train_lm_with(&config, tokenizer, &train, &TrainOptions::new(30, 5e-3))?;
    let mut rows = vec![("target".to_string(), mean_cnll(&target, &forget)?, mean_cnll(&target, &retain)?)];
    for cfg in [BaselineConfig::ga(3, 1e-3), BaselineConfig::gd(3, 1e-3, 1.0)] {
        let model = run_baseline(&target, &forget, &retain, &cfg)?;
        rows.push((cfg.method.name().to_string(), mean_cnll(&model, &forget)?, mean_cnll(&model, &retain)?));
    }
    Ok(BaselineSummary { rows })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    println!("{:<8} {:>12} {:>12}", "method", "forget cnll", "retain cnll");
    for (m, f, r) in run_example()?.rows {
        println!("{m:<8} {f:>12.4} {r:>12.4}");
    }
    Ok(())
}
