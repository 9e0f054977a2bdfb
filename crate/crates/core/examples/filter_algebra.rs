// SPDX-License-Identifier: MIT OR Apache-2.0

// Builds a forget subspace from correlated samples, installs `I - aUU^T`
// and shows how much energy each component keeps.

use ndarray::Array2;
use nspu::forget::{apply_filter, build_from_matrix, decompose, make_filter};
use nspu::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug)]
pub struct FilterSummary {
    pub k: usize,
    pub forget_norm_before: f64,
    pub forget_norm_after: f64,
    pub safe_norm_before: f64,
    pub safe_norm_after: f64,
}

pub fn run_example() -> Result<FilterSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (200, 16);
    let h = Array2::from_shape_fn((n, d), |(_, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        if j < 2 { 5.0 * z } else { 0.1 * z }
    });
    let subspace = build_from_matrix(&h, 0.95)?;
    let filter = make_filter(&subspace, 0.8)?;
    let v = h.row(0);
    let (f0, s0) = decompose(&subspace, v)?;
    let out = apply_filter(&filter, v)?;
    let (f1, s1) = decompose(&subspace, out.view())?;
    let norm = |a: &ndarray::Array1<f64>| a.dot(a).sqrt();
    Ok(FilterSummary {
        k: subspace.k(),
        forget_norm_before: norm(&f0),
        forget_norm_after: norm(&f1),
        safe_norm_before: norm(&s0),
        safe_norm_after: norm(&s1),
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let s = run_example()?;
    println!("k = {}", s.k);
    println!("forget component {:.4} -> {:.4}", s.forget_norm_before, s.forget_norm_after);
    println!("safe component   {:.4} -> {:.4}", s.safe_norm_before, s.safe_norm_after);
    Ok(())
}
