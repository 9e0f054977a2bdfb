// SPDX-License-Identifier: MIT OR Apache-2.0

// Chooses the PCA rank from the explained-variance threshold.

use ndarray::Array2;
use nspu::numeric::pca_adaptive;
use nspu::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug)]
pub struct RankSweep {
    /// `(tau, k)` pairs.
    pub ranks: Vec<(f64, usize)>,
    pub eigenvalues: Vec<f64>,
}

pub fn run_example() -> Result<RankSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scales = [8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.05];
    let h = Array2::from_shape_fn((300, scales.len()), |(_, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scales[j] * z
    });
    let mut ranks = Vec::new();
    let mut eigenvalues = Vec::new();
    for tau in [0.5, 0.8, 0.9, 0.95, 0.99] {
        let pca = pca_adaptive(&h, tau)?;
        eigenvalues = pca.spectrum.eigenvalues.clone();
        ranks.push((tau, pca.k));
    }
    Ok(RankSweep { ranks, eigenvalues })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    let ev: Vec<String> = s.eigenvalues.iter().map(|e| format!("{e:.3}")).collect();
    println!("eigenvalues: {}", ev.join(" "));
    for (tau, k) in s.ranks {
        println!("tau {tau:.2} -> k {k}");
    }
    Ok(())
}
