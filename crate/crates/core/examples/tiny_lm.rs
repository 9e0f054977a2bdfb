// SPDX-License-Identifier: MIT OR Apache-2.0

// Trains the small decoder-only transformer on a few facts and reads them
// back by greedy generation.

use nspu::lm::{train_lm_with, LmConfig, Tokenizer, TrainOptions};
use nspu::Result;

#[derive(Debug)]
pub struct LmSummary {
    pub params: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub completion: String,
}

pub fn run_example() -> Result<LmSummary> {
    let texts: Vec<String> = [
        "Where does Ada live? Ada lives in Lisbon.",
        "What does Ada do? Ada works as a pilot.",
        "Where does Ben live? Ben lives in Oslo.",
        "What does Ben do? Ben works as a baker.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let tokenizer = Tokenizer::build(texts.iter().map(String::as_str));
    let config = LmConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 24,
        dropout: 0.0,
        seed: 1,
    };
    let opts = TrainOptions { batch_size: 4, ..TrainOptions::new(120, 1e-2) };
    let (model, history) = train_lm_with(&config, tokenizer, &texts, &opts)?;
    Ok(LmSummary {
        params: config.param_count(),
        first_loss: history[0],
        final_loss: *history.last().expect("epochs > 0"),
        completion: model.generate("Where does Ben live?", 4)?,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    println!("{} parameters, loss {:.3} -> {:.4}", s.params, s.first_loss, s.final_loss);
    println!("Where does Ben live? {}", s.completion);
    Ok(())
}
