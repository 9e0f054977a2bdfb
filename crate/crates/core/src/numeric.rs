// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra, PCA, kernels and summary statistics.
//!
//! Everything here works in `f64` on row-major [`Matrix`] values
//! (`ndarray::Array2<f64>`). Functions are pure; callers may share inputs
//! freely across threads.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{NspuError, Result};

/// Row-major `rows x cols` matrix of finite `f64` values.
pub type Matrix = Array2<f64>;

/// Thin SVD factors: `left * diag(singulars) * right_t == m`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub left: Matrix,
    pub singulars: Array1<f64>,
    pub right_t: Matrix,
}

/// Descending eigenvalues with their orthonormal eigenvectors stored as columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSpectrum {
    pub eigenvalues: Vec<f64>,
    /// `cols x r` matrix; column `i` pairs with `eigenvalues[i]`.
    pub components: Matrix,
}

/// Result of [`pca_adaptive`].
#[derive(Debug, Clone)]
pub struct Pca {
    pub spectrum: EigenSpectrum,
    pub k: usize,
    pub mean: Array1<f64>,
}

/// Reconstruction statistics between a prediction and a ground-truth matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
    pub cosine_mean: f64,
    pub pearson_mean: f64,
    /// Rows skipped by `pearson_mean` because a side had zero variance.
    pub pearson_excluded: usize,
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.is_empty() {
        return Err(NspuError::InvalidMatrix(format!("{what} is empty")));
    }
    if let Some(bad) = m.iter().find(|v| !v.is_finite()) {
        return Err(NspuError::InvalidMatrix(format!(
            "{what} contains non-finite value {bad}"
        )));
    }
    Ok(())
}

/// Thin singular value decomposition with singular values sorted descending.
pub fn svd(m: &Matrix) -> Result<Svd> {
    ensure_finite(m, "svd input")?;
    let (rows, cols) = m.dim();
    let dm = DMatrix::from_fn(rows, cols, |i, j| m[[i, j]]);
    let dec = dm.svd(true, true);
    let u = dec
        .u
        .ok_or_else(|| NspuError::InvalidMatrix("svd did not produce U".into()))?;
    let v_t = dec
        .v_t
        .ok_or_else(|| NspuError::InvalidMatrix("svd did not produce V^T".into()))?;
    let r = dec.singular_values.len();

    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        dec.singular_values[b]
            .partial_cmp(&dec.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut left = Matrix::zeros((rows, r));
    let mut right_t = Matrix::zeros((r, cols));
    let mut singulars = Array1::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        singulars[dst] = dec.singular_values[src].max(0.0);
        for i in 0..rows {
            left[[i, dst]] = u[(i, src)];
        }
        for j in 0..cols {
            right_t[[dst, j]] = v_t[(src, j)];
        }
    }
    Ok(Svd {
        left,
        singulars,
        right_t,
    })
}

/// Column means of `h`.
pub fn column_mean(h: &Matrix) -> Array1<f64> {
    let n = h.nrows() as f64;
    let mut mean = Array1::zeros(h.ncols());
    for row in h.rows() {
        mean += &row;
    }
    mean / n
}

/// Smallest `k` whose leading eigenvalues reach `tau` of the total variance.
///
/// Uses the first index where the running sum is `>= tau * total`; the result
/// is clamped to `1..=cap`.
pub fn rank_for_variance(eigenvalues: &[f64], tau: f64, cap: usize) -> usize {
    let total: f64 = eigenvalues.iter().sum();
    let target = tau * total;
    let mut running = 0.0;
    let mut k = eigenvalues.len();
    for (i, &lambda) in eigenvalues.iter().enumerate() {
        running += lambda;
        if running >= target {
            k = i + 1;
            break;
        }
    }
    k.clamp(1, cap.max(1))
}

/// Mean-centred PCA with adaptive rank selection by explained variance.
///
/// Eigenvalues are `s_i^2 / (n - 1)` from the SVD of the centred matrix.
/// Eigenvalues below the numerical noise floor of the decomposition are
/// snapped to zero so exactly rank-deficient data selects its true rank.
pub fn pca_adaptive(h: &Matrix, tau: f64) -> Result<Pca> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NspuError::InvalidParameter(format!(
            "tau must lie in (0, 1], got {tau}"
        )));
    }
    let (n, d) = h.dim();
    if n < 2 {
        return Err(NspuError::DegenerateData(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    ensure_finite(h, "PCA input")?;
    let mean = column_mean(h);
    let centered = h - &mean;
    let dec = svd(&centered)?;

    let denom = (n - 1) as f64;
    let mut eigenvalues: Vec<f64> = dec.singulars.iter().map(|s| s * s / denom).collect();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let scale: f64 = h.iter().map(|v| v * v).sum::<f64>() / denom;
    let floor = (n.max(d) as f64) * f64::EPSILON * 16.0 * top.max(scale * f64::EPSILON);
    for lambda in eigenvalues.iter_mut() {
        if *lambda <= floor {
            *lambda = 0.0;
        }
    }
    if eigenvalues.iter().all(|&l| l == 0.0) {
        return Err(NspuError::DegenerateData(
            "all rows are identical (zero variance)".into(),
        ));
    }

    let cap = (n - 1).min(d);
    let k = rank_for_variance(&eigenvalues, tau, cap);
    let components = dec.right_t.t().to_owned();
    Ok(Pca {
        spectrum: EigenSpectrum {
            eigenvalues,
            components,
        },
        k,
        mean,
    })
}

/// Gaussian RBF kernel `exp(-||x - y||^2 / (2 sigma^2))`.
pub fn rbf_kernel(x: ArrayView1<f64>, y: ArrayView1<f64>, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(NspuError::InvalidParameter(format!(
            "RBF bandwidth must be positive, got {sigma}"
        )));
    }
    if x.len() != y.len() {
        return Err(NspuError::Shape(format!(
            "rbf_kernel dims {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(rbf_unchecked(x, y, sigma))
}

#[inline]
pub(crate) fn rbf_unchecked(x: ArrayView1<f64>, y: ArrayView1<f64>, sigma: f64) -> f64 {
    let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * sigma * sigma)).exp()
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let dot = a.dot(&b);
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn pearson(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.sum() / n;
    let mb = b.sum() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Regression statistics of `pred` against `truth`, row = sample.
///
/// `mse` and `mae` average the per-row squared L2 and L1 norms of the error.
/// `r2` compares against the column-mean predictor.
pub fn stats(pred: &Matrix, truth: &Matrix) -> Result<RegressionStats> {
    if pred.dim() != truth.dim() {
        return Err(NspuError::Shape(format!(
            "stats: pred {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if pred.nrows() == 0 {
        return Err(NspuError::EmptyDataset("stats on zero rows".into()));
    }
    let n = pred.nrows() as f64;
    let ybar = column_mean(truth);

    let mut sse = KahanSum::default();
    let mut sae = KahanSum::default();
    let mut sst = KahanSum::default();
    let mut cos = KahanSum::default();
    let mut pear = KahanSum::default();
    let mut pear_n = 0usize;
    for (p, t) in pred.axis_iter(Axis(0)).zip(truth.axis_iter(Axis(0))) {
        let mut row_se = 0.0;
        let mut row_ae = 0.0;
        let mut row_st = 0.0;
        for ((pv, tv), mv) in p.iter().zip(t.iter()).zip(ybar.iter()) {
            row_se += (tv - pv) * (tv - pv);
            row_ae += (tv - pv).abs();
            row_st += (tv - mv) * (tv - mv);
        }
        sse.add(row_se);
        sae.add(row_ae);
        sst.add(row_st);
        cos.add(cosine(p, t));
        if let Some(r) = pearson(p, t) {
            pear.add(r);
            pear_n += 1;
        }
    }
    let sse = sse.total();
    let sst = sst.total();
    let r2 = if sst == 0.0 {
        if sse == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - sse / sst
    };
    Ok(RegressionStats {
        mse: sse / n,
        mae: sae.total() / n,
        r2,
        cosine_mean: cos.total() / n,
        pearson_mean: if pear_n == 0 {
            0.0
        } else {
            pear.total() / pear_n as f64
        },
        pearson_excluded: pred.nrows() - pear_n,
    })
}

/// Neumaier-compensated running sum; the result does not depend on how
/// many partial sums fed it as long as the order of `add` calls is fixed.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = KahanSum::default();
    for x in it {
        acc.add(x);
    }
    acc.total()
}

/// Largest absolute entry of `a^T a - I`.
pub fn orthonormality_error(a: &Matrix) -> f64 {
    let gram = a.t().dot(a);
    let mut worst: f64 = 0.0;
    for ((i, j), v) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((v - target).abs());
    }
    worst
}
