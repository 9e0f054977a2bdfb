// SPDX-License-Identifier: MIT OR Apache-2.0

// Distribution shift between two activation sets: centroid distance and
// biased MMD² with a median-heuristic RBF bandwidth.

use ndarray::Array2;
use nspu::drift::{centroid_distance, mmd2_biased, Bandwidth};
use nspu::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug)]
pub struct DriftSummary {
    /// `(shift, centroid distance, mmd2)`.
    pub rows: Vec<(f64, f64, f64)>,
}

pub fn run_example() -> Result<DriftSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |n: usize, shift: f64| {
        Array2::from_shape_fn((n, 8), |(_, j)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z + if j == 0 { shift } else { 0.0 }
        })
    };
    let base = draw(120, 0.0);
    let mut rows = Vec::new();
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let other = draw(120, shift);
        rows.push((
            shift,
            centroid_distance(&base, &other)?,
            mmd2_biased(&base, &other, Bandwidth::MedianHeuristic)?,
        ));
    }
    Ok(DriftSummary { rows })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    println!("{:>6} {:>10} {:>10}", "shift", "centroid", "mmd2");
    for (s, c, m) in run_example()?.rows {
        println!("{s:>6.1} {c:>10.4} {m:>10.5}");
    }
    Ok(())
}
