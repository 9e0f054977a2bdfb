// SPDX-License-Identifier: MIT OR Apache-2.0

// Scores a hypothetical unlearning run from raw per-set measurements.

use nspu::metrics::{report, rouge_l_text, MetricInputs, MetricReport, SetMeasures, DEFAULT_EPSILON};
use nspu::Result;

pub fn run_example() -> Result<(MetricReport, f64)> {
    let target_forget = SetMeasures { ppl: 1.4, truth_ratio: 0.9, rouge: 0.95, cnll: 0.33 };
    let target_retain = SetMeasures { ppl: 1.3, truth_ratio: 0.9, rouge: 0.96, cnll: 0.26 };
    let unl_forget = SetMeasures { ppl: 3.1, truth_ratio: 0.6, rouge: 0.40, cnll: 1.13 };
    let unl_retain = SetMeasures { ppl: 1.4, truth_ratio: 0.88, rouge: 0.90, cnll: 0.34 };
    let inputs = MetricInputs::from_measures(
        &target_forget,
        &target_retain,
        &unl_forget,
        &unl_retain,
        (2.1, 2.4, 3.0),
        DEFAULT_EPSILON,
    );
    let rouge = rouge_l_text("the capital is paris", "the capital city is paris");
    Ok((report(&inputs)?, rouge))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let (r, rouge) = run_example()?;
    println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
    println!("rouge-l example: {rouge:.4}");
    Ok(())
}
