// SPDX-License-Identifier: MIT OR Apache-2.0

//! FLOPs estimates for retraining, the fine-tuning baselines and NSPU.
//!
//! ```text
//! train   = 6 · tokens · params        forward = 2 · tokens · params
//! GA      = 3 · forward(forget) · epochs_ga          (backward = 2 · forward)
//! GD      = GA + 3 · forward(retain) · epochs_gd_retain
//! KLM = GA,  DPO = NPO = GD
//! NSPU    = 3 · mlp_forward · mlp_samples · mlp_epochs + 2 · forward(extraction)
//! mlp_forward = Σ 2 · in · out over the three linear layers
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NspuError, Result};

/// Inputs of the estimate; every field is optional so that a partially
/// specified run can still price the methods it covers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlopsSpec {
    pub param_count: Option<f64>,
    pub pretrain_tokens: Option<f64>,
    pub retain_samples: Option<f64>,
    pub retain_seq_len: Option<f64>,
    pub forget_samples: Option<f64>,
    pub forget_seq_len: Option<f64>,
    pub mlp_dims: Option<[f64; 4]>,
    pub mlp_train_samples: Option<f64>,
    pub mlp_epochs: Option<f64>,
    pub extraction_samples: Option<f64>,
    pub extraction_avg_tokens: Option<f64>,
    pub epochs_ga: Option<f64>,
    pub epochs_gd_retain: Option<f64>,
}

impl FlopsSpec {
    /// The 7B-parameter reference configuration.
    pub fn llama_7b() -> Self {
        Self {
            param_count: Some(7e9),
            pretrain_tokens: Some(2e12),
            retain_samples: Some(3600.0),
            retain_seq_len: Some(512.0),
            forget_samples: Some(2000.0),
            forget_seq_len: Some(512.0),
            mlp_dims: Some([4096.0, 8192.0, 8192.0, 4096.0]),
            mlp_train_samples: Some(21243.0),
            mlp_epochs: Some(10.0),
            extraction_samples: Some(21243.0),
            extraction_avg_tokens: Some(128.0),
            epochs_ga: Some(3.0),
            epochs_gd_retain: Some(5.0),
        }
    }

    /// Same spec with `param_count` multiplied by `factor`.
    pub fn scaled_params(&self, factor: f64) -> Self {
        Self {
            param_count: self.param_count.map(|p| p * factor),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Retrain,
    GA,
    GD,
    KLM,
    DPO,
    NPO,
    NSPU,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Retrain,
        Method::GA,
        Method::GD,
        Method::KLM,
        Method::DPO,
        Method::NPO,
        Method::NSPU,
    ];
    pub const BASELINES: [Method; 5] = [Method::GA, Method::GD, Method::KLM, Method::DPO, Method::NPO];

    pub fn name(self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::GA => "GA",
            Method::GD => "GD",
            Method::KLM => "KLM",
            Method::DPO => "DPO",
            Method::NPO => "NPO",
            Method::NSPU => "NSPU",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `Exact` keeps full precision; `AsPrinted` rounds the per-sample MLP
/// training cost to three significant figures before multiplying out, as
/// the published worked example does.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arithmetic {
    #[default]
    Exact,
    AsPrinted,
}

pub fn forward_flops(tokens: f64, params: f64) -> f64 {
    2.0 * tokens * params
}

pub fn train_flops(tokens: f64, params: f64) -> f64 {
    6.0 * tokens * params
}

fn need(v: Option<f64>, name: &str) -> Result<f64> {
    let v = v.ok_or_else(|| NspuError::IncompleteSpec(format!("missing {name}")))?;
    if !(v >= 0.0) || !v.is_finite() {
        return Err(NspuError::IncompleteSpec(format!("{name} must be ≥ 0, got {v}")));
    }
    Ok(v)
}

fn params(spec: &FlopsSpec) -> Result<f64> {
    let p = need(spec.param_count, "param_count")?;
    if p <= 0.0 {
        return Err(NspuError::IncompleteSpec("param_count must be > 0".into()));
    }
    Ok(p)
}

/// Rounds to `sig` significant figures.
pub fn round_sig(x: f64, sig: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let scale = 10f64.powi(sig as i32 - 1 - mag);
    (x * scale).round() / scale
}

/// Scientific rendering with `sig` significant figures, e.g. `1.29024e17`.
pub fn render_sig(x: f64, sig: u32) -> String {
    let s = format!("{:.*e}", sig.saturating_sub(1) as usize, x);
    match s.split_once('e') {
        Some((mant, exp)) if mant.contains('.') => {
            format!("{}e{}", mant.trim_end_matches('0').trim_end_matches('.'), exp)
        }
        _ => s,
    }
}

/// Breakdown of the NSPU estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NspuFlops {
    pub mlp_forward_per_sample: f64,
    pub mlp_train_per_sample: f64,
    pub stage1: f64,
    pub extraction_per_pass: f64,
    pub stage2: f64,
    pub total: f64,
}

pub fn mlp_forward_per_sample(dims: [f64; 4]) -> f64 {
    2.0 * dims[0] * dims[1] + 2.0 * dims[1] * dims[2] + 2.0 * dims[2] * dims[3]
}

pub fn nspu_flops(spec: &FlopsSpec, mode: Arithmetic) -> Result<NspuFlops> {
    let p = params(spec)?;
    let dims = spec
        .mlp_dims
        .ok_or_else(|| NspuError::IncompleteSpec("missing mlp_dims".into()))?;
    let fwd = mlp_forward_per_sample(dims);
    let per_sample = fwd + 2.0 * fwd;
    let per_sample = match mode {
        Arithmetic::Exact => per_sample,
        Arithmetic::AsPrinted => round_sig(per_sample, 3),
    };
    let stage1 = per_sample
        * need(spec.mlp_train_samples, "mlp_train_samples")?
        * need(spec.mlp_epochs, "mlp_epochs")?;
    let extraction = forward_flops(
        need(spec.extraction_samples, "extraction_samples")?
            * need(spec.extraction_avg_tokens, "extraction_avg_tokens")?,
        p,
    );
    let stage2 = 2.0 * extraction;
    Ok(NspuFlops {
        mlp_forward_per_sample: fwd,
        mlp_train_per_sample: per_sample,
        stage1,
        extraction_per_pass: extraction,
        stage2,
        total: stage1 + stage2,
    })
}

fn ga(spec: &FlopsSpec) -> Result<f64> {
    let p = params(spec)?;
    let fwd = forward_flops(
        need(spec.forget_samples, "forget_samples")? * need(spec.forget_seq_len, "forget_seq_len")?,
        p,
    );
    Ok((fwd + 2.0 * fwd) * need(spec.epochs_ga, "epochs_ga")?)
}

fn gd(spec: &FlopsSpec) -> Result<f64> {
    let p = params(spec)?;
    let fwd = forward_flops(
        need(spec.retain_samples, "retain_samples")? * need(spec.retain_seq_len, "retain_seq_len")?,
        p,
    );
    Ok(ga(spec)? + (fwd + 2.0 * fwd) * need(spec.epochs_gd_retain, "epochs_gd_retain")?)
}

pub fn method_flops(method: Method, spec: &FlopsSpec, mode: Arithmetic) -> Result<f64> {
    match method {
        Method::Retrain => {
            let tokens = need(spec.pretrain_tokens, "pretrain_tokens")?
                + need(spec.retain_samples, "retain_samples")? * need(spec.retain_seq_len, "retain_seq_len")?;
            Ok(train_flops(tokens, params(spec)?))
        }
        Method::GA | Method::KLM => ga(spec),
        Method::GD | Method::DPO | Method::NPO => gd(spec),
        Method::NSPU => Ok(nspu_flops(spec, mode)?.total),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRatios {
    pub vs_retrain: f64,
    pub vs_best_baseline: f64,
}

pub fn ratios_from(retrain: f64, baselines: &[f64], nspu: f64) -> EfficiencyRatios {
    let best = baselines.iter().copied().fold(f64::INFINITY, f64::min);
    EfficiencyRatios {
        vs_retrain: retrain / nspu,
        vs_best_baseline: best / nspu,
    }
}

pub fn efficiency_ratios(spec: &FlopsSpec, mode: Arithmetic) -> Result<EfficiencyRatios> {
    let nspu = method_flops(Method::NSPU, spec, mode)?;
    let retrain = method_flops(Method::Retrain, spec, mode)?;
    let baselines: Vec<f64> = Method::BASELINES
        .iter()
        .filter_map(|&m| method_flops(m, spec, mode).ok())
        .collect();
    if baselines.is_empty() {
        return Err(NspuError::IncompleteSpec("no baseline is computable".into()));
    }
    Ok(ratios_from(retrain, &baselines, nspu))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub method: Method,
    pub flops: f64,
    /// Eight significant figures.
    pub rendered: String,
}

/// Every computable method, in [`Method::ALL`] order.
pub fn flops_table(spec: &FlopsSpec, mode: Arithmetic) -> Vec<FlopsRow> {
    Method::ALL
        .iter()
        .filter_map(|&m| {
            method_flops(m, spec, mode).ok().map(|f| FlopsRow {
                method: m,
                flops: f,
                rendered: render_sig(f, 8),
            })
        })
        .collect()
}

/// Fixed-width text table.
pub fn render_table(rows: &[FlopsRow]) -> String {
    let mut out = format!("{:<8} {:>22} {:>16}\n", "method", "flops", "rounded");
    for r in rows {
        out.push_str(&format!("{:<8} {:>22.6e} {:>16}\n", r.method.name(), r.flops, r.rendered));
    }
    out
}
