// SPDX-License-Identifier: MIT OR Apache-2.0

// Compute budget of every unlearning method for a 7B-parameter model.

use nspu::flops::{efficiency_ratios, flops_table, render_table, Arithmetic, FlopsSpec};
use nspu::Result;

#[derive(Debug)]
pub struct FlopsSummary {
    pub table: String,
    pub vs_retrain: f64,
    pub vs_best_baseline: f64,
}

pub fn run_example() -> Result<FlopsSummary> {
    let spec = FlopsSpec::llama_7b();
    let rows = flops_table(&spec, Arithmetic::AsPrinted);
    let ratios = efficiency_ratios(&spec, Arithmetic::AsPrinted)?;
    Ok(FlopsSummary {
        table: render_table(&rows),
        vs_retrain: ratios.vs_retrain,
        vs_best_baseline: ratios.vs_best_baseline,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    print!("{}", s.table);
    println!("cheaper than retraining by {:.3e}x", s.vs_retrain);
    println!("cheaper than the best baseline by {:.3}x", s.vs_best_baseline);
    Ok(())
}
