// SPDX-License-Identifier: MIT OR Apache-2.0

// Learns a map from "anonymized" to "original" activations on a synthetic
// task where the two are related by a fixed linear transform.

use ndarray::Array2;
use nspu::numeric::RegressionStats;
use nspu::projector::{evaluate_projector, rows, train_projector_with, ProjectorConfig};
use nspu::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn run_example() -> Result<RegressionStats> {
    let (n, d) = (600, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gauss = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
    let x: Array2<f64> = gauss((n, d));
    let w: Array2<f64> = gauss((d, d)) / (d as f64).sqrt();
    let y = x.dot(&w);
    let config = ProjectorConfig {
        epochs: 80,
        dropout: 0.0,
        lambda_inv: 0.0,
        val_fraction: 0.2,
        seed: 2,
        ..ProjectorConfig::for_dim(d)
    };
    let (model, report) = train_projector_with(&x, &y, &config, None)?;
    evaluate_projector(&model, &rows(&x, &report.val_indices), &rows(&y, &report.val_indices))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    println!("held-out R² {:.4}, mean cosine {:.4}, MSE {:.5}", s.r2, s.cosine_mean, s.mse);
    Ok(())
}
