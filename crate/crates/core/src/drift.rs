// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise representational drift between a target and an unlearned
//! model: centroid distance and the biased RBF-MMD² estimator.

use std::fmt::Write as _;

use ndarray::Axis;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NspuError, Result};
use crate::lm::{ActivationMatrix, LanguageModel};
use crate::numeric::{column_mean, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetLabel {
    Forget,
    Retain,
}

impl SetLabel {
    pub fn name(self) -> &'static str {
        match self {
            SetLabel::Forget => "forget",
            SetLabel::Retain => "retain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub layer: usize,
    pub set_label: SetLabel,
    pub centroid_distance: f64,
    pub mmd2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over the pooled rows.
    MedianHeuristic,
}

fn check_cols(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(NspuError::Shape(format!(
            "activation widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(NspuError::Shape("activation sets must be non-empty".into()));
    }
    Ok(())
}

/// `||mean(a) - mean(b)||_2`.
pub fn centroid_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_cols(a, b)?;
    let diff = column_mean(a) - column_mean(b);
    Ok(diff.dot(&diff).sqrt())
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the non-zero pairwise distances over the rows of `a` and `b`;
/// 1 when every pooled row coincides.
pub fn median_bandwidth(a: &Matrix, b: &Matrix) -> f64 {
    let pooled = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths");
    let n = pooled.nrows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(pooled.row(i), pooled.row(j)).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|x, y| x.total_cmp(y));
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Biased MMD² with an RBF kernel; both sets must have `N >= 2` rows.
pub fn mmd2_biased(a: &Matrix, b: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    check_cols(a, b)?;
    if a.nrows() != b.nrows() {
        return Err(NspuError::Shape(format!(
            "MMD needs equal set sizes, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let n = a.nrows();
    if n < 2 {
        return Err(NspuError::Shape("MMD needs at least 2 rows per set".into()));
    }
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => median_bandwidth(a, b),
    };
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(NspuError::InvalidParameter(format!(
            "RBF bandwidth must be positive, got {sigma}"
        )));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kernel_sum = |x: &Matrix, y: &Matrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += (-sq_dist(x.row(i), y.row(j)) * gamma).exp();
            }
        }
        s
    };
    let nn = (n * n) as f64;
    Ok(kernel_sum(a, a) / nn - 2.0 * kernel_sum(a, b) / nn + kernel_sum(b, b) / nn)
}

/// Subsamples the larger matrix (seeded) so both have the same row count.
pub fn equalize(a: &Matrix, b: &Matrix, seed: u64) -> (Matrix, Matrix) {
    let n = a.nrows().min(b.nrows());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |m: &Matrix| {
        if m.nrows() == n {
            m.clone()
        } else {
            let mut idx = sample(&mut rng, m.nrows(), n).into_vec();
            idx.sort_unstable();
            m.select(Axis(0), &idx)
        }
    };
    (pick(a), pick(b))
}

/// Drift of every layer's residual stream (post-adapter) on both sets.
pub fn layer_sweep(
    target: &LanguageModel,
    unlearned: &LanguageModel,
    forget_texts: &[String],
    retain_texts: &[String],
) -> Result<Vec<DriftRow>> {
    if target.config != unlearned.config || target.tokenizer != unlearned.tokenizer {
        return Err(NspuError::IncompatibleModels(
            "target and unlearned models differ in config or vocabulary".into(),
        ));
    }
    let mut rows = Vec::with_capacity(2 * target.config.n_layers);
    for layer in 0..target.config.n_layers {
        for (label, texts) in [(SetLabel::Forget, forget_texts), (SetLabel::Retain, retain_texts)] {
            let ids: Vec<String> = (0..texts.len()).map(|i| i.to_string()).collect();
            let a: ActivationMatrix = target.extract_activations_post(texts, &ids, layer)?;
            let b = unlearned.extract_activations_post(texts, &ids, layer)?;
            rows.push(DriftRow {
                layer,
                set_label: label,
                centroid_distance: centroid_distance(&a.matrix, &b.matrix)?,
                mmd2: mmd2_biased(&a.matrix, &b.matrix, Bandwidth::MedianHeuristic)?,
            });
        }
    }
    Ok(rows)
}

/// `layer,set,centroid,mmd2` CSV.
pub fn to_csv(rows: &[DriftRow]) -> String {
    let mut out = String::from("layer,set,centroid,mmd2\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e}",
            r.layer,
            r.set_label.name(),
            r.centroid_distance,
            r.mmd2
        );
    }
    out
}
