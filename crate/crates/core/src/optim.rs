// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with optional global gradient-norm clipping.

use crate::lm::params::{lit, Real};

#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    /// Standard moments (0.9, 0.999), `eps = 1e-8`.
    pub fn new(shapes: &[usize], clip: Option<f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// Global L2 norm over all gradient tensors.
    pub fn grad_norm(grads: &[&[F]]) -> f64 {
        grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// One update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: Vec<&mut [F]>, grads: &[&[F]], lr: f64) -> f64 {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let norm = Self::grad_norm(grads);
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2): (F, F) = (lit(self.beta1), lit(self.beta2));
        let (one_b1, one_b2): (F, F) = (lit(1.0 - self.beta1), lit(1.0 - self.beta2));
        let step: F = lit(lr / bc1);
        let inv_bc2: F = lit(1.0 / bc2);
        let eps: F = lit(self.eps);
        let s: F = lit(scale);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let g = grads[i][j] * s;
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                p[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
