// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gradient-ascent (GA) and gradient-difference (GD) unlearning baselines.
//!
//! ```text
//! GA:  minimise  -L(D_forget)
//! GD:  minimise   L(D_retain) - lambda * L(D_forget)
//! ```
//!
//! GD alternates one retain minibatch and one forget minibatch per round.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, MAGIC_LM};
use crate::corpus::QARecord;
use crate::error::{NspuError, Result};
use crate::lm::{answer_nll, finetune_alternating, finetune_with, Direction, LanguageModel, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineMethod {
    GA,
    GD,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::GA => "GA",
            BaselineMethod::GD => "GD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the forget term in GD.
    pub lambda_gd: f64,
    pub batch_size: usize,
    /// When set, the forget-set CNLL of the input model must lie below it.
    pub max_start_cnll: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            method: BaselineMethod::GA,
            epochs: 5,
            lr: 1e-4,
            lambda_gd: 1.0,
            batch_size: 16,
            max_start_cnll: None,
        }
    }
}

impl BaselineConfig {
    pub fn ga(epochs: usize, lr: f64) -> Self {
        Self {
            method: BaselineMethod::GA,
            epochs,
            lr,
            ..Self::default()
        }
    }

    pub fn gd(epochs: usize, lr: f64, lambda_gd: f64) -> Self {
        Self {
            method: BaselineMethod::GD,
            epochs,
            lr,
            lambda_gd,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(NspuError::InvalidParameter("baseline epochs must be ≥ 1".into()));
        }
        if !self.lr.is_finite() {
            return Err(NspuError::InvalidParameter(format!("lr must be finite, got {}", self.lr)));
        }
        if self.method == BaselineMethod::GD && !(self.lambda_gd > 0.0 && self.lambda_gd.is_finite()) {
            return Err(NspuError::InvalidParameter(format!(
                "lambda_gd must be > 0, got {}",
                self.lambda_gd
            )));
        }
        if self.batch_size == 0 {
            return Err(NspuError::InvalidParameter("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            ..TrainOptions::new(self.epochs, self.lr)
        }
    }
}

fn pairs(records: &[&QARecord]) -> Vec<(String, String)> {
    records
        .iter()
        .map(|r| (r.question.clone(), r.answer.clone()))
        .collect()
}

/// Sample-weighted mean answer NLL.
pub fn mean_cnll(model: &LanguageModel, records: &[&QARecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(NspuError::EmptyDataset("no records".into()));
    }
    let v = answer_nll(model, &pairs(records))?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

fn precheck(model: &LanguageModel, forget: &[&QARecord], config: &BaselineConfig) -> Result<()> {
    if let Some(limit) = config.max_start_cnll {
        let c = mean_cnll(model, forget)?;
        if !(c < limit) {
            return Err(NspuError::InvalidInput(format!(
                "model does not memorise the forget set: CNLL {c:.4} ≥ {limit}"
            )));
        }
    }
    Ok(())
}

/// Gradient ascent on the forget set; returns a new model.
pub fn run_ga(model: &LanguageModel, forget: &[&QARecord], config: &BaselineConfig) -> Result<LanguageModel> {
    config.validate()?;
    if forget.is_empty() {
        return Err(NspuError::EmptyDataset("forget set is empty".into()));
    }
    precheck(model, forget, config)?;
    Ok(finetune_with(model, &pairs(forget), &config.options(), Direction::Ascent)?.0)
}

/// Retain descent alternated with `lambda_gd`-weighted forget ascent.
pub fn run_gd(
    model: &LanguageModel,
    forget: &[&QARecord],
    retain: &[&QARecord],
    config: &BaselineConfig,
) -> Result<LanguageModel> {
    config.validate()?;
    if forget.is_empty() || retain.is_empty() {
        return Err(NspuError::EmptyDataset("GD needs non-empty forget and retain sets".into()));
    }
    precheck(model, forget, config)?;
    Ok(finetune_alternating(
        model,
        &pairs(retain),
        &pairs(forget),
        config.lambda_gd,
        &config.options(),
    )?
    .0)
}

/// Dispatches on `config.method`.
pub fn run_baseline(
    model: &LanguageModel,
    forget: &[&QARecord],
    retain: &[&QARecord],
    config: &BaselineConfig,
) -> Result<LanguageModel> {
    match config.method {
        BaselineMethod::GA => run_ga(model, forget, config),
        BaselineMethod::GD => run_gd(model, forget, retain, config),
    }
}

/// LM checkpoint with a `method` tag in its metadata.
pub fn save_baseline(model: &LanguageModel, method: BaselineMethod, path: &Path) -> Result<()> {
    let mut c = model.to_container()?;
    c.meta["method"] = serde_json::Value::from(method.name());
    c.save(path)
}

pub fn load_baseline(path: &Path) -> Result<(LanguageModel, Option<String>)> {
    let c = Container::load(path, MAGIC_LM)?;
    let tag = c.meta.get("method").and_then(|v| v.as_str()).map(str::to_string);
    Ok((LanguageModel::from_container(&c)?, tag))
}
