// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forget subspace and the `I - alpha U U^T` unlearning filter.
//!
//! The filter is kept in factored form: applying it to a vector costs
//! `O(d k)` and the dense `d x d` operator is never built.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor, TensorData, MAGIC_SUBSPACE};
use crate::error::{NspuError, Result};
use crate::lm::ActivationMatrix;
use crate::numeric::{pca_adaptive, Matrix};

/// Default explained-variance threshold for choosing `k`.
pub const DEFAULT_TAU: f64 = 0.95;

/// Top-`k` principal directions of projected forget-set activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgetSubspace {
    /// `d x k`, orthonormal columns.
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
    pub tau: f64,
    /// Column mean of the input; kept for diagnostics only.
    pub mean: Array1<f64>,
    pub n_samples: usize,
}

impl ForgetSubspace {
    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn to_container(&self) -> Container {
        Container {
            magic: MAGIC_SUBSPACE,
            meta: serde_json::json!({
                "tau": self.tau,
                "n_samples": self.n_samples,
                "eigenvalues": self.eigenvalues,
            }),
            tensors: vec![
                Tensor {
                    name: "basis".into(),
                    shape: vec![self.dim(), self.k()],
                    data: TensorData::F64(self.basis.iter().copied().collect()),
                },
                Tensor {
                    name: "mean".into(),
                    shape: vec![self.mean.len()],
                    data: TensorData::F64(self.mean.to_vec()),
                },
            ],
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |m: &str| NspuError::Checkpoint(format!("subspace: {m}"));
        let basis_t = c.tensor("basis")?;
        let [d, k] = basis_t.shape[..] else {
            return Err(bad("basis must be 2-D"));
        };
        let basis = Array2::from_shape_vec((d, k), basis_t.data.clone().into_f64())
            .map_err(|e| bad(&e.to_string()))?;
        let mean = Array1::from(c.tensor("mean")?.data.clone().into_f64());
        if mean.len() != d {
            return Err(bad("mean length differs from basis rows"));
        }
        let eigenvalues: Vec<f64> = serde_json::from_value(c.meta["eigenvalues"].clone())?;
        if eigenvalues.len() != k {
            return Err(bad("eigenvalue count differs from k"));
        }
        Ok(Self {
            basis,
            eigenvalues,
            tau: c.meta["tau"].as_f64().ok_or_else(|| bad("tau missing"))?,
            mean,
            n_samples: c.meta["n_samples"].as_u64().ok_or_else(|| bad("n_samples missing"))? as usize,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path, MAGIC_SUBSPACE)?)
    }
}

/// Non-trainable adapter `v -> v - alpha U (U^T v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningFilter {
    pub basis: Matrix,
    pub alpha: f64,
}

impl UnlearningFilter {
    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    /// Row-wise application to an `n x d` matrix.
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.dim() {
            return Err(NspuError::Shape(format!(
                "filter expects {} columns, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        let coeff = x.dot(&self.basis);
        Ok(x - &(coeff.dot(&self.basis.t()) * self.alpha))
    }
}

/// PCA on `h_est` with the adaptive-`k` rule.
pub fn build_forget_subspace(h_est: &ActivationMatrix, tau: f64) -> Result<ForgetSubspace> {
    build_from_matrix(&h_est.matrix, tau)
}

pub fn build_from_matrix(h: &Matrix, tau: f64) -> Result<ForgetSubspace> {
    let pca = pca_adaptive(h, tau)?;
    let k = pca.k.min(pca.spectrum.components.ncols());
    let basis = pca
        .spectrum
        .components
        .slice(ndarray::s![.., ..k])
        .to_owned();
    Ok(ForgetSubspace {
        basis,
        eigenvalues: pca.spectrum.eigenvalues[..k].to_vec(),
        tau,
        mean: pca.mean,
        n_samples: h.nrows(),
    })
}

pub fn make_filter(subspace: &ForgetSubspace, alpha: f64) -> Result<UnlearningFilter> {
    if !alpha.is_finite() {
        return Err(NspuError::InvalidParameter(format!(
            "alpha must be finite, got {alpha}"
        )));
    }
    Ok(UnlearningFilter {
        basis: subspace.basis.clone(),
        alpha,
    })
}

fn check_dim(basis: &Matrix, v: ArrayView1<f64>) -> Result<()> {
    if v.len() != basis.nrows() {
        return Err(NspuError::Shape(format!(
            "vector has length {}, subspace dimension is {}",
            v.len(),
            basis.nrows()
        )));
    }
    Ok(())
}

/// `v - alpha U (U^T v)`.
pub fn apply_filter(filter: &UnlearningFilter, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_dim(&filter.basis, v)?;
    let coeff = filter.basis.t().dot(&v);
    Ok(&v - &(filter.basis.dot(&coeff) * filter.alpha))
}

/// Splits `v` into its component inside span(U) and the orthogonal rest.
pub fn decompose(
    subspace: &ForgetSubspace,
    v: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    check_dim(&subspace.basis, v)?;
    let coeff = subspace.basis.t().dot(&v);
    let forget = subspace.basis.dot(&coeff);
    let safe = &v - &forget;
    Ok((forget, safe))
}

/// Energy fraction of each row that lies inside span(U).
pub fn subspace_energy(subspace: &ForgetSubspace, x: &Matrix) -> Result<Array1<f64>> {
    if x.ncols() != subspace.dim() {
        return Err(NspuError::Shape(format!(
            "matrix has {} columns, subspace dimension is {}",
            x.ncols(),
            subspace.dim()
        )));
    }
    let coeff = x.dot(&subspace.basis);
    let inside = coeff.map_axis(Axis(1), |r| r.dot(&r));
    let total = x.map_axis(Axis(1), |r| r.dot(&r));
    Ok(Array1::from_iter(
        inside
            .iter()
            .zip(total.iter())
            .map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 }),
    ))
}

/// Dense `I - alpha U U^T`, for tests and diagnostics.
pub fn dense_operator(filter: &UnlearningFilter) -> Matrix {
    let d = filter.dim();
    Array2::eye(d) - filter.basis.dot(&filter.basis.t()) * filter.alpha
}
