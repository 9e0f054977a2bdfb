// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parameter tensors of the decoder-only transformer.

use ndarray::{Array1, Array2, NdFloat};
use num_traits::FromPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NspuError, Result};

/// Float type the model kernels are generic over (`f32` for training,
/// `f64` for gradient checks).
pub trait Real: NdFloat + FromPrimitive {}
impl<T: NdFloat + FromPrimitive> Real for T {}

#[inline]
pub(crate) fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("float literal")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(NspuError::InvalidParameter(format!("{name} must be ≥ 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(NspuError::InvalidParameter(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NspuError::InvalidParameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (v, d, f, t) = (self.vocab_size, self.d_model, self.d_ff, self.max_seq_len);
        let block = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d);
        v * d + t * d + self.n_layers * block + 2 * d + d * v + v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub w_qkv: Array2<F>,
    pub b_qkv: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w_fc: Array2<F>,
    pub b_fc: Array1<F>,
    pub w_proj: Array2<F>,
    pub b_proj: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<F> {
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
    pub w_out: Array2<F>,
    pub b_out: Array1<F>,
}

const BLOCK_NAMES: [&str; 12] = [
    "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o", "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj",
    "b_proj",
];

fn slice<F>(a: &ndarray::ArrayBase<ndarray::OwnedRepr<F>, impl ndarray::Dimension>) -> &[F] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut<F>(a: &mut ndarray::ArrayBase<ndarray::OwnedRepr<F>, impl ndarray::Dimension>) -> &mut [F] {
    a.as_slice_mut().expect("parameters are contiguous")
}

impl<F: Real> LmParams<F> {
    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * n_layers)`, zero biases, unit LayerNorm gains.
    pub fn init(cfg: &LmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let (v, d, f, t) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut normal = |shape: (usize, usize), s: f64| {
            let dist = Normal::new(0.0, s).expect("normal");
            Array2::from_shape_fn(shape, |_| lit::<F>(dist.sample(&mut rng)))
        };
        let tok_emb = normal((v, d), std);
        let pos_emb = normal((t, d), std);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: normal((d, 3 * d), std),
                b_qkv: Array1::zeros(3 * d),
                w_o: normal((d, d), resid_std),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_fc: normal((d, f), std),
                b_fc: Array1::zeros(f),
                w_proj: normal((f, d), resid_std),
                b_proj: Array1::zeros(d),
            });
        }
        let w_out = normal((d, v), std);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out,
            b_out: Array1::zeros(v),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| F::zero())
    }

    pub fn map(&self, f: impl Fn(F) -> F + Copy) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            for x in s.iter_mut() {
                *x = f(*x);
            }
        }
        out
    }

    pub fn cast<G: Real>(&self) -> LmParams<G> {
        let c = |x: &F| G::from_f64(x.to_f64().expect("finite")).expect("cast");
        LmParams {
            tok_emb: self.tok_emb.map(c),
            pos_emb: self.pos_emb.map(c),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: b.ln1_g.map(c),
                    ln1_b: b.ln1_b.map(c),
                    w_qkv: b.w_qkv.map(c),
                    b_qkv: b.b_qkv.map(c),
                    w_o: b.w_o.map(c),
                    b_o: b.b_o.map(c),
                    ln2_g: b.ln2_g.map(c),
                    ln2_b: b.ln2_b.map(c),
                    w_fc: b.w_fc.map(c),
                    b_fc: b.b_fc.map(c),
                    w_proj: b.w_proj.map(c),
                    b_proj: b.b_proj.map(c),
                })
                .collect(),
            lnf_g: self.lnf_g.map(c),
            lnf_b: self.lnf_b.map(c),
            w_out: self.w_out.map(c),
            b_out: self.b_out.map(c),
        }
    }

    /// `(name, shape, data)` for every tensor, in a fixed order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.shape().to_vec(), slice(&self.tok_emb)),
            ("pos_emb".to_string(), self.pos_emb.shape().to_vec(), slice(&self.pos_emb)),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let parts: [(Vec<usize>, &[F]); 12] = [
                (b.ln1_g.shape().to_vec(), slice(&b.ln1_g)),
                (b.ln1_b.shape().to_vec(), slice(&b.ln1_b)),
                (b.w_qkv.shape().to_vec(), slice(&b.w_qkv)),
                (b.b_qkv.shape().to_vec(), slice(&b.b_qkv)),
                (b.w_o.shape().to_vec(), slice(&b.w_o)),
                (b.b_o.shape().to_vec(), slice(&b.b_o)),
                (b.ln2_g.shape().to_vec(), slice(&b.ln2_g)),
                (b.ln2_b.shape().to_vec(), slice(&b.ln2_b)),
                (b.w_fc.shape().to_vec(), slice(&b.w_fc)),
                (b.b_fc.shape().to_vec(), slice(&b.b_fc)),
                (b.w_proj.shape().to_vec(), slice(&b.w_proj)),
                (b.b_proj.shape().to_vec(), slice(&b.b_proj)),
            ];
            for (name, (shape, data)) in BLOCK_NAMES.iter().zip(parts) {
                out.push((format!("blocks.{i}.{name}"), shape, data));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g.shape().to_vec(), slice(&self.lnf_g)));
        out.push(("lnf_b".to_string(), self.lnf_b.shape().to_vec(), slice(&self.lnf_b)));
        out.push(("w_out".to_string(), self.w_out.shape().to_vec(), slice(&self.w_out)));
        out.push(("b_out".to_string(), self.b_out.shape().to_vec(), slice(&self.b_out)));
        out
    }

    /// Mutable views in the same order as [`LmParams::named`].
    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![slice_mut(&mut self.tok_emb), slice_mut(&mut self.pos_emb)];
        for b in self.blocks.iter_mut() {
            out.extend([
                slice_mut(&mut b.ln1_g),
                slice_mut(&mut b.ln1_b),
                slice_mut(&mut b.w_qkv),
                slice_mut(&mut b.b_qkv),
                slice_mut(&mut b.w_o),
                slice_mut(&mut b.b_o),
                slice_mut(&mut b.ln2_g),
                slice_mut(&mut b.ln2_b),
                slice_mut(&mut b.w_fc),
                slice_mut(&mut b.b_fc),
                slice_mut(&mut b.w_proj),
                slice_mut(&mut b.b_proj),
            ]);
        }
        out.extend([
            slice_mut(&mut self.lnf_g),
            slice_mut(&mut self.lnf_b),
            slice_mut(&mut self.w_out),
            slice_mut(&mut self.b_out),
        ]);
        out
    }

    pub fn slices(&self) -> Vec<&[F]> {
        self.named().into_iter().map(|(_, _, s)| s).collect()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access by global index (order of [`LmParams::named`]).
    pub fn get_flat(&self, mut idx: usize) -> F {
        for s in self.slices() {
            if idx < s.len() {
                return s[idx];
            }
            idx -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, value: F) {
        for s in self.slices_mut() {
            if idx < s.len() {
                s[idx] = value;
                return;
            }
            idx -= s.len();
        }
        panic!("parameter index out of range")
    }

    /// Rebuilds parameters from named tensors, validating shapes against `cfg`.
    pub fn from_named(cfg: &LmConfig, tensors: &[(String, Vec<usize>, Vec<F>)]) -> Result<Self> {
        let mut p = LmParams::<F>::init(&LmConfig { seed: 0, ..cfg.clone() });
        let expected: Vec<(String, Vec<usize>)> =
            p.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(NspuError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), dst) in expected.iter().zip(p.slices_mut()) {
            let (tn, ts, data) = tensors
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| NspuError::Checkpoint(format!("missing tensor {name}")))?;
            if ts != shape || data.len() != dst.len() {
                return Err(NspuError::Checkpoint(format!(
                    "tensor {tn} has shape {ts:?}, expected {shape:?}"
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(p)
    }
}
