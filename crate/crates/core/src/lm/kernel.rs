// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward and backward passes over packed batches.
//!
//! A packed batch concatenates several sequences row-wise into one `N x d`
//! activation matrix; every dense layer runs as a single matrix product and
//! attention is evaluated per segment with a causal mask.
//!
//! ```text
//! x0 = tok_emb[ids] + pos_emb[pos]
//! block: x1 = x + W_o·attn(LN1(x));  x2 = x1 + W_proj·gelu(W_fc·LN2(x1))
//!        tap = x2 (pre-adapter);     x_out = x2 - alpha·(x2 U) U^T  (if adapter)
//! head:  logits = LN_f(x_L)·W_out + b_out
//! ```

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{lit, Block, LmConfig, LmParams, Real};

/// Unlearning filter in the model's float type.
#[derive(Debug, Clone)]
pub struct AdapterW<F> {
    pub layer: usize,
    /// `d x k` orthonormal basis.
    pub basis: Array2<F>,
    pub alpha: F,
}

impl<F: Real> AdapterW<F> {
    /// `x - alpha * (x U) U^T`, row-wise.
    pub fn apply(&self, x: &Array2<F>) -> Array2<F> {
        if self.basis.ncols() == 0 {
            return x.clone();
        }
        let coeff = x.dot(&self.basis);
        let proj = coeff.dot(&self.basis.t());
        x - &(proj * self.alpha)
    }
}

/// Sequences concatenated row-wise; `segments[i] = (start, len)`.
#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Per-row loss weight (0 or 1).
    pub weights: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
}

impl Packed {
    /// Adds a full token sequence; next-token targets with index
    /// `>= loss_from` (in the original sequence) carry weight 1.
    pub fn push(&mut self, seq: &[u32], loss_from: usize) {
        assert!(seq.len() >= 2, "sequence needs at least two tokens");
        let start = self.inputs.len();
        let len = seq.len() - 1;
        for i in 0..len {
            self.inputs.push(seq[i]);
            self.targets.push(seq[i + 1]);
            self.weights.push(if i + 1 >= loss_from { 1.0 } else { 0.0 });
        }
        self.segments.push((start, len));
    }

    /// Adds an input-only segment (no targets, weight 0).
    pub fn push_inputs(&mut self, ids: &[u32]) {
        let start = self.inputs.len();
        self.inputs.extend_from_slice(ids);
        self.targets.extend(std::iter::repeat_n(0, ids.len()));
        self.weights.extend(std::iter::repeat_n(0.0, ids.len()));
        self.segments.push((start, ids.len()));
    }

    pub fn rows(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<F> {
    ln1: LnCache<F>,
    a: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Vec<Array2<F>>>,
    attn: Array2<F>,
    drop1: Option<Array2<F>>,
    ln2: LnCache<F>,
    c: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
    drop2: Option<Array2<F>>,
    /// Block output before any adapter.
    pub tap: Array2<F>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    pub(crate) blocks: Vec<BlockCache<F>>,
    pub(crate) lnf: Option<LnCache<F>>,
    pub(crate) f: Option<Array2<F>>,
    pub(crate) segments: Vec<(usize, usize)>,
    /// Residual stream after each executed block (post-adapter).
    pub outputs: Vec<Array2<F>>,
}

impl<F: Real> ForwardCache<F> {
    /// Block `l` output before the adapter, one row per packed position.
    pub fn tap(&self, layer: usize) -> &Array2<F> {
        &self.blocks[layer].tap
    }
}

const LN_EPS: f64 = 1e-5;

fn layer_norm<F: Real>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let eps: F = lit(LN_EPS);
    let df: F = lit(d as f64);
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / df;
        let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / df;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        let mut out = xhat.row_mut(i);
        Zip::from(&mut out).and(&row).for_each(|o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: &Array1<F>,
    grads: Option<(&mut Array1<F>, &mut Array1<F>)>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * g;
    let df: F = lit(d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_dh = dh.sum();
        let sum_dh_xh = dh.dot(&xh);
        let r = cache.rstd[i] / df;
        let mut out = dx.row_mut(i);
        Zip::from(&mut out)
            .and(&dh)
            .and(&xh)
            .for_each(|o, &a, &h| *o = r * (df * a - sum_dh - h * sum_dh_xh));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu<F: Real>(u: F) -> F {
    let half: F = lit(0.5);
    let inner = lit::<F>(GELU_C) * (u + lit::<F>(GELU_A) * u * u * u);
    half * u * (F::one() + inner.tanh())
}

#[inline]
fn gelu_grad<F: Real>(u: F) -> F {
    let half: F = lit(0.5);
    let inner = lit::<F>(GELU_C) * (u + lit::<F>(GELU_A) * u * u * u);
    let t = inner.tanh();
    let dinner = lit::<F>(GELU_C) * (F::one() + lit::<F>(3.0 * GELU_A) * u * u);
    half * (F::one() + t) + half * u * (F::one() - t * t) * dinner
}

fn add_bias<F: Real>(mut m: Array2<F>, b: &Array1<F>) -> Array2<F> {
    m += b;
    m
}

fn dropout_mask<F: Real>(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<F> {
    let keep: F = lit(1.0 / (1.0 - p));
    Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { F::zero() } else { keep })
}

fn attention_forward<F: Real>(
    qkv: &Array2<F>,
    segments: &[(usize, usize)],
    n_heads: usize,
) -> (Array2<F>, Vec<Vec<Array2<F>>>) {
    let n = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale: F = lit(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(segments.len());
    for &(start, len) in segments {
        let mut seg_probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = qkv.slice(s![start..start + len, h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![start..start + len, d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![start..start + len, 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t()) * scale;
            for i in 0..len {
                let mut row = scores.row_mut(i);
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    max = max.max(row[j]);
                }
                let mut total = F::zero();
                for j in 0..len {
                    if j <= i {
                        let e = (row[j] - max).exp();
                        row[j] = e;
                        total += e;
                    } else {
                        row[j] = F::zero();
                    }
                }
                row.mapv_inplace(|e| e / total);
            }
            let o = scores.dot(&v);
            out.slice_mut(s![start..start + len, h * dh..(h + 1) * dh]).assign(&o);
            seg_probs.push(scores);
        }
        probs.push(seg_probs);
    }
    (out, probs)
}

fn attention_backward<F: Real>(
    d_attn: &Array2<F>,
    qkv: &Array2<F>,
    probs: &[Vec<Array2<F>>],
    segments: &[(usize, usize)],
    n_heads: usize,
) -> Array2<F> {
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale: F = lit(1.0 / (dh as f64).sqrt());
    let mut dqkv = Array2::zeros(qkv.dim());
    for (seg, &(start, len)) in segments.iter().enumerate() {
        for h in 0..n_heads {
            let p = &probs[seg][h];
            let rows = start..start + len;
            let q = qkv.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![rows.clone(), d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let dout = d_attn.slice(s![rows.clone(), h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            let mut ds = Array2::zeros((len, len));
            for i in 0..len {
                let mut dot = F::zero();
                for j in 0..=i {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![rows, 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
    }
    dqkv
}

fn block_forward<F: Real>(
    b: &Block<F>,
    x: &Array2<F>,
    segments: &[(usize, usize)],
    cfg: &LmConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> BlockCache<F> {
    let (a, ln1) = layer_norm(x, &b.ln1_g, &b.ln1_b);
    let qkv = add_bias(a.dot(&b.w_qkv), &b.b_qkv);
    let (attn, probs) = attention_forward(&qkv, segments, cfg.n_heads);
    let mut attn_out = add_bias(attn.dot(&b.w_o), &b.b_o);
    let (mut drop1, mut drop2) = (None, None);
    let mut rng = dropout;
    if let Some(r) = rng.as_deref_mut() {
        let m = dropout_mask(attn_out.dim(), cfg.dropout, r);
        attn_out *= &m;
        drop1 = Some(m);
    }
    let x1 = x + &attn_out;
    let (c, ln2) = layer_norm(&x1, &b.ln2_g, &b.ln2_b);
    let u = add_bias(c.dot(&b.w_fc), &b.b_fc);
    let g = u.mapv(gelu);
    let mut m = add_bias(g.dot(&b.w_proj), &b.b_proj);
    if let Some(r) = rng.as_deref_mut() {
        let mask = dropout_mask(m.dim(), cfg.dropout, r);
        m *= &mask;
        drop2 = Some(mask);
    }
    let tap = x1 + &m;
    BlockCache {
        ln1,
        a,
        qkv,
        probs,
        attn,
        drop1,
        ln2,
        c,
        u,
        g,
        drop2,
        tap,
    }
}

/// Runs blocks `0..=upto` (or all blocks plus the head when `upto` is `None`)
/// from the given input residual stream.
pub fn forward_from<F: Real>(
    params: &LmParams<F>,
    cfg: &LmConfig,
    adapter: Option<&AdapterW<F>>,
    x0: Array2<F>,
    segments: &[(usize, usize)],
    upto: Option<usize>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> (ForwardCache<F>, Option<Array2<F>>) {
    let last = upto.unwrap_or(cfg.n_layers - 1);
    let use_dropout = cfg.dropout > 0.0;
    let mut x = x0;
    let mut blocks = Vec::with_capacity(last + 1);
    let mut outputs = Vec::with_capacity(last + 1);
    for (l, b) in params.blocks.iter().enumerate().take(last + 1) {
        let rng = if use_dropout { dropout.as_deref_mut() } else { None };
        let cache = block_forward(b, &x, segments, cfg, rng);
        x = match adapter {
            Some(ad) if ad.layer == l => ad.apply(&cache.tap),
            _ => cache.tap.clone(),
        };
        outputs.push(x.clone());
        blocks.push(cache);
    }
    if upto.is_some() {
        return (
            ForwardCache {
                blocks,
                lnf: None,
                f: None,
                segments: segments.to_vec(),
                outputs,
            },
            None,
        );
    }
    let (f, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let logits = add_bias(f.dot(&params.w_out), &params.b_out);
    (
        ForwardCache {
            blocks,
            lnf: Some(lnf),
            f: Some(f),
            segments: segments.to_vec(),
            outputs,
        },
        Some(logits),
    )
}

/// Token plus positional embeddings for a packed batch.
pub fn embed<F: Real>(params: &LmParams<F>, packed: &Packed) -> Array2<F> {
    let d = params.tok_emb.ncols();
    let mut x0 = Array2::zeros((packed.rows(), d));
    for &(start, len) in &packed.segments {
        for p in 0..len {
            let row = start + p;
            let tok = packed.inputs[row] as usize;
            let mut out = x0.row_mut(row);
            out.assign(&params.tok_emb.row(tok));
            out += &params.pos_emb.row(p);
        }
    }
    x0
}

pub fn forward<F: Real>(
    params: &LmParams<F>,
    cfg: &LmConfig,
    adapter: Option<&AdapterW<F>>,
    packed: &Packed,
    dropout: Option<&mut ChaCha8Rng>,
) -> (ForwardCache<F>, Array2<F>) {
    let x0 = embed(params, packed);
    let (cache, logits) = forward_from(params, cfg, adapter, x0, &packed.segments, None, dropout);
    (cache, logits.expect("full forward produces logits"))
}

/// Row-wise log-softmax.
pub fn log_softmax<F: Real>(logits: ArrayView2<F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = row.fold(F::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Weighted mean cross-entropy and its gradient w.r.t. logits.
/// `sign = -1` turns descent on the loss into ascent.
pub fn cross_entropy<F: Real>(logits: &Array2<F>, packed: &Packed, sign: f64) -> (f64, Array2<F>) {
    let logp = log_softmax(logits.view());
    let total_w: f64 = packed.weights.iter().sum();
    let norm = if total_w > 0.0 { total_w } else { 1.0 };
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.dim());
    for (i, &w) in packed.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let t = packed.targets[i] as usize;
        loss -= w * logp[[i, t]].to_f64().unwrap_or(f64::NAN);
        let scale: F = lit(sign * w / norm);
        let mut row = dlogits.row_mut(i);
        Zip::from(&mut row)
            .and(&logp.row(i))
            .for_each(|g, &lp| *g = lp.exp() * scale);
        row[t] -= scale;
    }
    (loss / norm, dlogits)
}

/// Backpropagates through blocks `top..=0`.
///
/// `d_top` is the gradient w.r.t. the residual stream leaving block `top`
/// (post-adapter). Returns the gradient w.r.t. the block-0 input `x0`.
pub fn backward_blocks<F: Real>(
    params: &LmParams<F>,
    cfg: &LmConfig,
    adapter: Option<&AdapterW<F>>,
    cache: &ForwardCache<F>,
    d_top: Array2<F>,
    top: usize,
    mut grads: Option<&mut LmParams<F>>,
) -> Array2<F> {
    let mut dx = d_top;
    for l in (0..=top).rev() {
        let b = &params.blocks[l];
        let bc = &cache.blocks[l];
        if let Some(ad) = adapter.filter(|a| a.layer == l) {
            dx = ad.apply(&dx);
        }
        // MLP sublayer
        let mut dm = dx.clone();
        if let Some(mask) = &bc.drop2 {
            dm *= mask;
        }
        let mut dg = dm.dot(&b.w_proj.t());
        if let Some(gr) = grads.as_deref_mut() {
            let gb = &mut gr.blocks[l];
            gb.w_proj += &bc.g.t().dot(&dm);
            gb.b_proj += &dm.sum_axis(Axis(0));
        }
        Zip::from(&mut dg).and(&bc.u).for_each(|g, &u| *g *= gelu_grad(u));
        let du = dg;
        let dc = du.dot(&b.w_fc.t());
        if let Some(gr) = grads.as_deref_mut() {
            let gb = &mut gr.blocks[l];
            gb.w_fc += &bc.c.t().dot(&du);
            gb.b_fc += &du.sum_axis(Axis(0));
        }
        let dx1_ln = match grads.as_deref_mut() {
            Some(gr) => {
                let gb = &mut gr.blocks[l];
                layer_norm_backward(&dc, &bc.ln2, &b.ln2_g, Some((&mut gb.ln2_g, &mut gb.ln2_b)))
            }
            None => layer_norm_backward(&dc, &bc.ln2, &b.ln2_g, None),
        };
        let dx1 = dx + &dx1_ln;

        // attention sublayer
        let mut dao = dx1.clone();
        if let Some(mask) = &bc.drop1 {
            dao *= mask;
        }
        let d_attn = dao.dot(&b.w_o.t());
        if let Some(gr) = grads.as_deref_mut() {
            let gb = &mut gr.blocks[l];
            gb.w_o += &bc.attn.t().dot(&dao);
            gb.b_o += &dao.sum_axis(Axis(0));
        }
        let dqkv = attention_backward(&d_attn, &bc.qkv, &bc.probs, &cache.segments, cfg.n_heads);
        let da = dqkv.dot(&b.w_qkv.t());
        if let Some(gr) = grads.as_deref_mut() {
            let gb = &mut gr.blocks[l];
            gb.w_qkv += &bc.a.t().dot(&dqkv);
            gb.b_qkv += &dqkv.sum_axis(Axis(0));
        }
        let dx_ln = match grads.as_deref_mut() {
            Some(gr) => {
                let gb = &mut gr.blocks[l];
                layer_norm_backward(&da, &bc.ln1, &b.ln1_g, Some((&mut gb.ln1_g, &mut gb.ln1_b)))
            }
            None => layer_norm_backward(&da, &bc.ln1, &b.ln1_g, None),
        };
        dx = dx1 + &dx_ln;
    }
    dx
}

/// Full backward from `dlogits`, accumulating into `grads`.
pub fn backward<F: Real>(
    params: &LmParams<F>,
    cfg: &LmConfig,
    adapter: Option<&AdapterW<F>>,
    packed: &Packed,
    cache: &ForwardCache<F>,
    dlogits: &Array2<F>,
    grads: &mut LmParams<F>,
) {
    let f = cache.f.as_ref().expect("backward needs a full forward");
    let lnf = cache.lnf.as_ref().expect("backward needs a full forward");
    grads.w_out += &f.t().dot(dlogits);
    grads.b_out += &dlogits.sum_axis(Axis(0));
    let df = dlogits.dot(&params.w_out.t());
    let dx_top = layer_norm_backward(&df, lnf, &params.lnf_g, Some((&mut grads.lnf_g, &mut grads.lnf_b)));
    let dx0 = backward_blocks(params, cfg, adapter, cache, dx_top, cfg.n_layers - 1, Some(grads));
    for &(start, len) in &packed.segments {
        for p in 0..len {
            let row = start + p;
            let tok = packed.inputs[row] as usize;
            let g = dx0.row(row);
            let mut te = grads.tok_emb.row_mut(tok);
            te += &g;
            let mut pe = grads.pos_emb.row_mut(p);
            pe += &g;
        }
    }
}

/// Loss and parameter gradient for one packed batch.
pub fn loss_and_grad<F: Real>(
    params: &LmParams<F>,
    cfg: &LmConfig,
    adapter: Option<&AdapterW<F>>,
    packed: &Packed,
    sign: f64,
    dropout: Option<&mut ChaCha8Rng>,
) -> (f64, LmParams<F>) {
    let (cache, logits) = forward(params, cfg, adapter, packed, dropout);
    let (loss, dlogits) = cross_entropy(&logits, packed, sign);
    let mut grads = params.zeros_like();
    backward(params, cfg, adapter, packed, &cache, &dlogits, &mut grads);
    (loss, grads)
}

/// Loss only (no dropout).
pub fn loss<F: Real>(
    params: &LmParams<F>,
    cfg: &LmConfig,
    adapter: Option<&AdapterW<F>>,
    packed: &Packed,
) -> f64 {
    let (_, logits) = forward(params, cfg, adapter, packed, None);
    cross_entropy(&logits, packed, 1.0).0
}
