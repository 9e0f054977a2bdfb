// SPDX-License-Identifier: MIT OR Apache-2.0

//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineMethod};
use crate::corpus::check_overlap_fraction;
use crate::error::{NspuError, Result};
use crate::flops::{Arithmetic, FlopsSpec};
use crate::lm::{LmConfig, TrainOptions};
use crate::metrics::DEFAULT_EPSILON;
use crate::projector::ProjectorConfig;

/// A single strength or a grid swept on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Value(f64),
    Grid(Vec<f64>),
}

impl AlphaSpec {
    /// 14-point geometric grid from 0.005 to 1.
    pub fn default_grid() -> Self {
        let n = 14;
        let ratio = (1.0f64 / 0.005).powf(1.0 / (n - 1) as f64);
        let mut grid: Vec<f64> = (0..n).map(|i| 0.005 * ratio.powi(i as i32)).collect();
        grid[n - 1] = 1.0;
        AlphaSpec::Grid(grid)
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            AlphaSpec::Value(a) => vec![*a],
            AlphaSpec::Grid(g) => g.clone(),
        }
    }
}

/// `"last"` or a block index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterLayer {
    Named(LayerName),
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerName {
    Last,
}

impl FilterLayer {
    pub fn resolve(self, n_layers: usize) -> Result<usize> {
        match self {
            FilterLayer::Named(LayerName::Last) => Ok(n_layers - 1),
            FilterLayer::Index(i) if i < n_layers => Ok(i),
            FilterLayer::Index(i) => Err(NspuError::Config(format!(
                "filter_layer {i} outside [0, {n_layers})"
            ))),
        }
    }
}

/// Which text of a record feeds activation extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationText {
    Question,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub profiles_per_domain: usize,
    pub public_profiles_per_domain: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            profiles_per_domain: 10,
            public_profiles_per_domain: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub overlap_fraction: f64,
    /// Defaults to every novel record not withheld as a non-member.
    pub forget_slots: Option<usize>,
    /// Fraction of forget and retain records used to select alpha.
    pub validation_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            overlap_fraction: 0.05,
            forget_slots: None,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_layers: 2,
            n_heads: 4,
            d_ff: 384,
            max_seq_len: 64,
            dropout: 0.0,
            epochs: 150,
            lr: 3e-3,
            batch_size: 16,
        }
    }
}

impl LmSection {
    pub fn lm_config(&self, vocab_size: usize, seed: u64) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            ..TrainOptions::new(self.epochs, self.lr)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorSection {
    pub hidden_multiplier: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub lambda_inv: f64,
    pub inv_steps: usize,
    pub inv_every: usize,
    pub inv_batch: usize,
    pub inv_lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        let p = ProjectorConfig::for_dim(1);
        Self {
            hidden_multiplier: 2,
            dropout: p.dropout,
            lr: p.lr,
            epochs: p.epochs,
            lambda_inv: p.lambda_inv,
            inv_steps: p.inv_steps,
            inv_every: p.inv_every,
            inv_batch: p.inv_batch,
            inv_lr: p.inv_lr,
            batch_size: p.batch_size,
            val_fraction: p.val_fraction,
        }
    }
}

impl ProjectorSection {
    pub fn projector_config(&self, d: usize, seed: u64) -> ProjectorConfig {
        ProjectorConfig {
            d_in: d,
            d_hidden: self.hidden_multiplier * d,
            d_out: d,
            dropout: self.dropout,
            lr: self.lr,
            epochs: self.epochs,
            lambda_inv: self.lambda_inv,
            inv_steps: self.inv_steps,
            inv_every: self.inv_every,
            inv_batch: self.inv_batch,
            inv_lr: self.inv_lr,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Extra tokens allowed beyond the reference answer length.
    pub generation_slack: usize,
    pub baselines: Vec<BaselineMethod>,
    pub ga: BaselineConfig,
    pub gd: BaselineConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            generation_slack: 4,
            baselines: vec![BaselineMethod::GA],
            ga: BaselineConfig::ga(5, 1e-3),
            gd: BaselineConfig::gd(5, 1e-3, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    pub arithmetic: Arithmetic,
    pub spec: FlopsSpec,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            arithmetic: Arithmetic::AsPrinted,
            spec: FlopsSpec::llama_7b(),
        }
    }
}

/// Existing artifacts to import instead of recomputing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResumeSection {
    pub target: Option<PathBuf>,
    pub projector: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tau: f64,
    pub alpha: AlphaSpec,
    pub filter_layer: FilterLayer,
    pub activation_text: ActivationText,
    pub epsilon: f64,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub lm: LmSection,
    pub projector: ProjectorSection,
    pub eval: EvalSection,
    pub flops: FlopsSection,
    pub resume: ResumeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            tau: crate::forget::DEFAULT_TAU,
            alpha: AlphaSpec::default_grid(),
            filter_layer: FilterLayer::Named(LayerName::Last),
            activation_text: ActivationText::Question,
            epsilon: DEFAULT_EPSILON,
            corpus: CorpusSection::default(),
            split: SplitSection::default(),
            lm: LmSection::default(),
            projector: ProjectorSection::default(),
            eval: EvalSection::default(),
            flops: FlopsSection::default(),
            resume: ResumeSection::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> NspuError {
    NspuError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NspuError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config_err(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        let alphas = self.alpha.values();
        if alphas.is_empty() {
            return Err(config_err("alpha grid is empty"));
        }
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(config_err(format!("alpha {a} outside [0, 1]")));
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err("epsilon must be positive"));
        }
        check_overlap_fraction(self.split.overlap_fraction).map_err(|e| config_err(e.to_string()))?;
        if !(self.split.validation_fraction > 0.0 && self.split.validation_fraction <= 1.0) {
            return Err(config_err("split.validation_fraction must lie in (0, 1]"));
        }
        if self.corpus.profiles_per_domain < 2 || self.corpus.public_profiles_per_domain < 1 {
            return Err(config_err("corpus needs ≥ 2 main and ≥ 1 public profiles per domain"));
        }
        self.lm
            .lm_config(8, self.seed)
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        if self.lm.epochs == 0 {
            return Err(config_err("lm.epochs must be ≥ 1"));
        }
        if let FilterLayer::Index(i) = self.filter_layer {
            if i >= self.lm.n_layers {
                return Err(config_err(format!(
                    "filter_layer {i} outside [0, {})",
                    self.lm.n_layers
                )));
            }
        }
        self.projector
            .projector_config(self.lm.d_model, self.seed)
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        for b in [&self.eval.ga, &self.eval.gd] {
            b.validate().map_err(|e| config_err(e.to_string()))?;
        }
        for p in [&self.resume.target, &self.resume.projector].into_iter().flatten() {
            if !p.exists() {
                return Err(config_err(format!("resume path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn layer(&self) -> Result<usize> {
        self.filter_layer.resolve(self.lm.n_layers)
    }
}
