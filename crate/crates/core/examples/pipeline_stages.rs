// SPDX-License-Identifier: MIT OR Apache-2.0

// Drives the artifact pipeline stage by stage and shows that an unchanged
// stage is skipped on the second run.

use nspu::pipeline::{Pipeline, RunConfig, Stage, StageOutcome};
use nspu::Result;

pub fn run_example() -> Result<(Vec<StageOutcome>, Vec<StageOutcome>)> {
    let dir = std::env::temp_dir().join(format!("nspu-example-{}", std::process::id()));
    let config = RunConfig {
        output_dir: dir.clone(),
        ..RunConfig::default()
    };
    let pipeline = Pipeline::new(config)?;
    let stages = [Stage::GenData, Stage::Anonymize, Stage::Flops];
    let first = stages.iter().map(|&s| pipeline.run_stage(s)).collect::<Result<Vec<_>>>()?;
    let second = stages.iter().map(|&s| pipeline.run_stage(s)).collect::<Result<Vec<_>>>()?;
    let _ = std::fs::remove_dir_all(&dir);
    Ok((first, second))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let (first, second) = run_example()?;
    for (a, b) in first.iter().zip(&second) {
        println!("{:<10} first: {:<8} second: {}", a.stage.name(), if a.skipped { "skipped" } else { "ran" }, if b.skipped { "skipped" } else { "ran" });
    }
    Ok(())
}
