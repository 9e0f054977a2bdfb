// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven experiment pipeline.
//!
//! ```text
//! gen-data → anonymize → train-lm → train-projector → build-subspace
//!          → apply-filter → evaluate → drift → flops
//! ```
//!
//! Every stage reads only the artifacts it declares, writes its outputs
//! under the run directory and records input and output hashes in
//! `manifest.json`. A stage whose config fingerprint, inputs and outputs are
//! unchanged is skipped.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anonymizer::{anonymize, leaked_entities, AnonText, PlaceholderSidecar};
use crate::baselines::{run_baseline, save_baseline, BaselineMethod};
use crate::container::write_file;
use crate::corpus::{
    default_forget_slots, generate_corpus, generate_corpus_with, load_jsonl, load_jsonl_as, make_split,
    save_jsonl, CorpusParams, ProfilePool, QARecord, SplitSpec,
};
use crate::drift::{layer_sweep, to_csv, DriftRow};
use crate::error::{NspuError, Result};
use crate::flops::{efficiency_ratios, flops_table, render_table, EfficiencyRatios, FlopsRow};
use crate::forget::{build_forget_subspace, make_filter, ForgetSubspace};
use crate::lm::{train_lm_with, LanguageModel, Tokenizer};
use crate::metrics::{
    aggregate, ces, hcnll, hps, hrs, measure_set, report, GenerationBudget, MetricInputs, MetricReport,
    SetMeasures,
};
use crate::numeric::{stats, RegressionStats};
use crate::projector::{project, rows, train_projector_with, InversionContext, ProjectorModel, ProjectorReport};
use crate::sqs::{run_sqs, SqsResult};

pub use config::{ActivationText, AlphaSpec, FilterLayer, RunConfig};
pub use manifest::{hash_file, sha256_hex, Manifest, StageRecord};

// ----------------------------------------------------------------------------
// Artifacts
// ----------------------------------------------------------------------------

/// Artifact paths, relative to the run directory.
pub mod paths {
    pub const CORPUS: &str = "data/corpus.jsonl";
    pub const PUBLIC: &str = "data/public.jsonl";
    pub const SPLIT: &str = "data/split.json";
    pub const FORGET_ANON: &str = "data/forget_anon.jsonl";
    pub const FORGET_PLACEHOLDERS: &str = "data/forget_placeholders.jsonl";
    pub const PUBLIC_ANON: &str = "data/public_anon.jsonl";
    pub const ANON_SCAN: &str = "data/anon_scan.json";
    pub const TARGET: &str = "models/target.nspu";
    pub const LM_HISTORY: &str = "reports/lm_history.json";
    pub const PUBLIC_ANON_ACTS: &str = "acts/public_anon.actv";
    pub const PUBLIC_ORIG_ACTS: &str = "acts/public_orig.actv";
    pub const PROJECTOR: &str = "models/projector.proj";
    pub const PROJECTOR_REPORT: &str = "reports/projector.json";
    pub const FORGET_ANON_ACTS: &str = "acts/forget_anon.actv";
    pub const FORGET_EST_ACTS: &str = "acts/forget_est.actv";
    pub const SUBSPACE: &str = "models/subspace.fsub";
    pub const UNLEARNED: &str = "models/unlearned.nspu";
    pub const ALPHA_SWEEP: &str = "reports/alpha_sweep.json";
    pub const REPORT: &str = "reports/report.json";
    pub const DRIFT_CSV: &str = "reports/drift.csv";
    pub const DRIFT_JSON: &str = "reports/drift.json";
    pub const FLOPS_JSON: &str = "reports/flops.json";
    pub const FLOPS_TXT: &str = "reports/flops.txt";

    pub fn baseline(method: crate::baselines::BaselineMethod) -> String {
        format!("models/baseline_{}.nspu", method.name().to_lowercase())
    }

    pub fn sidecar(actv: &str) -> String {
        format!("{actv}.ids.json")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Anonymize,
    TrainLm,
    TrainProjector,
    BuildSubspace,
    ApplyFilter,
    Evaluate,
    Drift,
    Flops,
    RunAll,
}

impl Stage {
    /// Executable stages in pipeline order.
    pub const ORDER: [Stage; 9] = [
        Stage::GenData,
        Stage::Anonymize,
        Stage::TrainLm,
        Stage::TrainProjector,
        Stage::BuildSubspace,
        Stage::ApplyFilter,
        Stage::Evaluate,
        Stage::Drift,
        Stage::Flops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Anonymize => "anonymize",
            Stage::TrainLm => "train-lm",
            Stage::TrainProjector => "train-projector",
            Stage::BuildSubspace => "build-subspace",
            Stage::ApplyFilter => "apply-filter",
            Stage::Evaluate => "evaluate",
            Stage::Drift => "drift",
            Stage::Flops => "flops",
            Stage::RunAll => "run-all",
        }
    }

    /// Artifacts the stage may read.
    pub fn inputs(self) -> &'static [&'static str] {
        use paths::*;
        match self {
            Stage::GenData | Stage::Flops | Stage::RunAll => &[],
            Stage::Anonymize => &[CORPUS, PUBLIC, SPLIT],
            Stage::TrainLm => &[CORPUS, PUBLIC, PUBLIC_ANON, SPLIT],
            Stage::TrainProjector => &[TARGET, PUBLIC, PUBLIC_ANON],
            Stage::BuildSubspace => &[TARGET, PROJECTOR, FORGET_ANON],
            Stage::ApplyFilter => &[TARGET, SUBSPACE, CORPUS, SPLIT],
            Stage::Evaluate | Stage::Drift => &[TARGET, UNLEARNED, CORPUS, SPLIT],
        }
    }

    pub fn outputs(self, config: &RunConfig) -> Vec<String> {
        use paths::*;
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        match self {
            Stage::GenData => v(&[CORPUS, PUBLIC, SPLIT]),
            Stage::Anonymize => v(&[FORGET_ANON, FORGET_PLACEHOLDERS, PUBLIC_ANON, ANON_SCAN]),
            Stage::TrainLm => v(&[TARGET, LM_HISTORY]),
            Stage::TrainProjector => {
                let mut o = v(&[PROJECTOR, PROJECTOR_REPORT, PUBLIC_ANON_ACTS, PUBLIC_ORIG_ACTS]);
                o.push(sidecar(PUBLIC_ANON_ACTS));
                o.push(sidecar(PUBLIC_ORIG_ACTS));
                o
            }
            Stage::BuildSubspace => {
                let mut o = v(&[SUBSPACE, FORGET_ANON_ACTS, FORGET_EST_ACTS]);
                o.push(sidecar(FORGET_ANON_ACTS));
                o.push(sidecar(FORGET_EST_ACTS));
                o
            }
            Stage::ApplyFilter => v(&[UNLEARNED, ALPHA_SWEEP]),
            Stage::Evaluate => {
                let mut o = v(&[REPORT]);
                o.extend(config.eval.baselines.iter().map(|&m| baseline(m)));
                o
            }
            Stage::Drift => v(&[DRIFT_CSV, DRIFT_JSON]),
            Stage::Flops => v(&[FLOPS_JSON, FLOPS_TXT]),
            Stage::RunAll => Vec::new(),
        }
    }

    /// Stage that writes `artifact`.
    pub fn producer(artifact: &str) -> Option<Stage> {
        let cfg = RunConfig::default();
        Stage::ORDER
            .into_iter()
            .find(|s| s.outputs(&cfg).iter().any(|o| o == artifact))
            .or_else(|| artifact.starts_with("models/baseline_").then_some(Stage::Evaluate))
    }

    /// The slice of the config the stage depends on.
    fn fingerprint(self, c: &RunConfig) -> serde_json::Value {
        use serde_json::json;
        let body = match self {
            Stage::GenData => json!([c.seed, c.corpus, c.split.overlap_fraction, c.split.forget_slots]),
            Stage::Anonymize | Stage::RunAll => json!([]),
            Stage::TrainLm => json!([c.seed, c.lm, c.resume.target]),
            Stage::TrainProjector => {
                json!([c.seed, c.projector, c.activation_text, c.filter_layer, c.resume.projector])
            }
            Stage::BuildSubspace => json!([c.tau, c.activation_text, c.filter_layer]),
            Stage::ApplyFilter => json!([
                c.seed,
                c.alpha,
                c.filter_layer,
                c.split.validation_fraction,
                c.eval.generation_slack,
                c.epsilon
            ]),
            Stage::Evaluate => json!([c.eval, c.epsilon]),
            Stage::Drift => json!([c.activation_text]),
            Stage::Flops => json!([c.flops]),
        };
        json!({"stage": self.name(), "config": body, "version": env!("CARGO_PKG_VERSION")})
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = NspuError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::RunAll])
            .find(|st| st.name() == s)
            .ok_or_else(|| NspuError::Config(format!("unknown stage `{s}`")))
    }
}

// ----------------------------------------------------------------------------
// Reports
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnonScan {
    pub records_scanned: usize,
    pub leaked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSummary {
    pub layer: usize,
    pub pairs: usize,
    pub validation: Option<RegressionStats>,
    pub training: ProjectorReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub forget_ppl_ratio: f64,
    pub retain_ppl_ratio: f64,
    pub hps: f64,
    pub ces: f64,
    pub hrs: f64,
    pub hcnll: f64,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub selected_alpha: f64,
    pub validation_forget: usize,
    pub validation_retain: usize,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub forget: SetMeasures,
    pub retain: SetMeasures,
    pub sqs: SqsResult,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub layer: usize,
    pub alpha: f64,
    pub k: usize,
    pub target_forget: SetMeasures,
    pub target_retain: SetMeasures,
    pub methods: Vec<MethodResult>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
    pub ratios: Option<EfficiencyRatios>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub elapsed: Duration,
}

// ----------------------------------------------------------------------------
// Helpers
// ----------------------------------------------------------------------------

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Original record text used for activation extraction.
pub fn record_text(record: &QARecord, mode: ActivationText) -> String {
    match mode {
        ActivationText::Question => record.question.clone(),
        ActivationText::Full => record.full_text(),
    }
}

pub fn anon_text(anon: &AnonText, mode: ActivationText) -> String {
    match mode {
        ActivationText::Question => anon.anon_question.clone(),
        ActivationText::Full => anon.full_text(),
    }
}

/// Texts the target model is trained on: forget ∪ retain, never non-members.
pub fn training_texts(corpus: &[QARecord], split: &SplitSpec) -> Vec<String> {
    split.training_records(corpus).iter().map(|r| r.full_text()).collect()
}

/// Vocabulary sources: training texts, their perturbed answers and the
/// public corpus in original and anonymized form.
pub fn vocabulary_texts(
    corpus: &[QARecord],
    split: &SplitSpec,
    public: &[QARecord],
    public_anon: &[AnonText],
) -> Vec<String> {
    let train = split.training_records(corpus);
    let mut out = training_texts(corpus, split);
    out.extend(train.iter().flat_map(|r| r.perturbed_answers.iter().cloned()));
    out.extend(public.iter().map(QARecord::full_text));
    out.extend(public_anon.iter().map(AnonText::full_text));
    out
}

/// Seeded subset of `records` holding `ceil(fraction * n)` of them.
pub fn validation_subset<'a>(records: &[&'a QARecord], fraction: f64, seed: u64) -> Vec<&'a QARecord> {
    let n = ((records.len() as f64) * fraction).ceil() as usize;
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let mut keep = idx[..n.clamp(1, records.len().max(1)).min(records.len())].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i]).collect()
}

fn four_metrics(
    t_f: &SetMeasures,
    t_r: &SetMeasures,
    u_f: &SetMeasures,
    u_r: &SetMeasures,
    eps: f64,
) -> Result<(f64, f64, f64, f64)> {
    let (_, _, h) = hps(t_f.ppl, u_f.ppl, t_r.ppl, u_r.ppl, eps)?;
    let (_, _, c) = ces(t_r.truth_ratio, u_r.truth_ratio, t_f.truth_ratio, u_f.truth_ratio)?;
    let (_, _, r) = hrs(t_r.rouge, u_r.rouge, t_f.rouge, u_f.rouge)?;
    let (_, _, n) = hcnll(t_f.cnll, u_f.cnll, t_r.cnll, u_r.cnll, eps)?;
    Ok((h, c, r, n))
}

// ----------------------------------------------------------------------------
// Runner
// ----------------------------------------------------------------------------

pub struct Pipeline {
    pub config: RunConfig,
}

/// Read access restricted to a stage's declared inputs.
struct Inputs<'a> {
    stage: Stage,
    dir: &'a Path,
}

impl Inputs<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        assert!(
            self.stage.inputs().contains(&rel),
            "stage {} read undeclared input {rel}",
            self.stage
        );
        self.dir.join(rel)
    }

    fn load<T>(&self, rel: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let path = self.path(rel);
        f(&path).map_err(|e| NspuError::StageInput {
            stage: self.stage.name().into(),
            path: path.clone(),
            hint: format!(
                "artifact is unreadable ({e}); re-run `nspu {}`",
                Stage::producer(rel).map_or("run-all", Stage::name)
            ),
        })
    }

    fn corpus(&self) -> Result<Vec<QARecord>> {
        self.load(paths::CORPUS, load_jsonl)
    }

    fn public(&self) -> Result<Vec<QARecord>> {
        self.load(paths::PUBLIC, load_jsonl)
    }

    fn split(&self) -> Result<SplitSpec> {
        self.load(paths::SPLIT, |p| {
            let bytes = std::fs::read(p).map_err(|e| NspuError::io(p, e))?;
            Ok(serde_json::from_slice(&bytes)?)
        })
    }

    fn anon(&self, rel: &str) -> Result<Vec<AnonText>> {
        self.load(rel, load_jsonl_as::<AnonText>)
    }

    fn model(&self, rel: &str) -> Result<LanguageModel> {
        self.load(rel, LanguageModel::load)
    }
}

struct Outputs<'a> {
    dir: &'a Path,
}

impl Outputs<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn bytes(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.path(rel), bytes)
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.bytes(rel, &to_json(value)?)
    }

    fn jsonl<T: Serialize>(&self, rel: &str, records: &[T]) -> Result<()> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| NspuError::io(parent, e))?;
        }
        save_jsonl(records, &path)
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn dir(&self) -> &Path {
        &self.config.output_dir
    }

    /// Runs `stage` (or every stage for `run-all`).
    pub fn run(&self, stage: Stage) -> Result<Vec<StageOutcome>> {
        if stage == Stage::RunAll {
            return Stage::ORDER.iter().map(|&s| self.run_stage(s)).collect();
        }
        Ok(vec![self.run_stage(stage)?])
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let started = Instant::now();
        let dir = self.dir();
        std::fs::create_dir_all(dir).map_err(|e| NspuError::io(dir, e))?;
        let mut input_hashes = BTreeMap::new();
        for rel in stage.inputs() {
            let path = dir.join(rel);
            if !path.exists() {
                let producer = Stage::producer(rel).map_or("run-all", Stage::name);
                return Err(NspuError::StageInput {
                    stage: stage.name().into(),
                    path,
                    hint: format!("run `nspu {producer}` first"),
                });
            }
            input_hashes.insert(rel.to_string(), hash_file(&path)?);
        }
        let config_hash = sha256_hex(&serde_json::to_vec(&stage.fingerprint(&self.config))?);
        let mut manifest = Manifest::load(dir)?;
        if manifest.is_current(dir, stage.name(), &config_hash, &input_hashes) {
            return Ok(StageOutcome {
                stage,
                skipped: true,
                elapsed: started.elapsed(),
            });
        }
        let inputs = Inputs { stage, dir };
        let out = Outputs { dir };
        match stage {
            Stage::GenData => self.gen_data(&out)?,
            Stage::Anonymize => self.anonymize(&inputs, &out)?,
            Stage::TrainLm => self.train_lm(&inputs, &out)?,
            Stage::TrainProjector => self.train_projector(&inputs, &out)?,
            Stage::BuildSubspace => self.build_subspace(&inputs, &out)?,
            Stage::ApplyFilter => self.apply_filter(&inputs, &out)?,
            Stage::Evaluate => self.evaluate(&inputs, &out)?,
            Stage::Drift => self.drift(&inputs, &out)?,
            Stage::Flops => self.flops(&out)?,
            Stage::RunAll => unreachable!("expanded by run"),
        }
        let mut outputs = BTreeMap::new();
        for rel in stage.outputs(&self.config) {
            outputs.insert(rel.clone(), hash_file(&dir.join(&rel))?);
        }
        manifest.stages.insert(
            stage.name().to_string(),
            StageRecord {
                config_hash,
                inputs: input_hashes,
                outputs,
            },
        );
        manifest.save(dir)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            elapsed: started.elapsed(),
        })
    }

    // ------------------------------------------------------------------------
    // Stages
    // ------------------------------------------------------------------------

    fn gen_data(&self, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let corpus = generate_corpus(c.seed, c.corpus.profiles_per_domain);
        let public = generate_corpus_with(&CorpusParams {
            seed: c.seed,
            profiles_per_domain: c.corpus.public_profiles_per_domain,
            pool: ProfilePool::Public,
        });
        let slots = c
            .split
            .forget_slots
            .unwrap_or_else(|| default_forget_slots(&corpus, c.split.overlap_fraction));
        let split = make_split(&corpus, c.split.overlap_fraction, slots, c.seed)?;
        out.jsonl(paths::CORPUS, &corpus)?;
        out.jsonl(paths::PUBLIC, &public)?;
        out.json(paths::SPLIT, &split)
    }

    fn anonymize(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let corpus = inp.corpus()?;
        let split = inp.split()?;
        let public = inp.public()?;
        let (forget_anon, sidecars): (Vec<AnonText>, Vec<PlaceholderSidecar>) =
            split.forget_records(&corpus).into_iter().map(|r| anonymize(r).split()).unzip();
        let public_anon: Vec<AnonText> = public.iter().map(|r| anonymize(r).split().0).collect();
        for a in forget_anon.iter().chain(&public_anon) {
            if let Some(hit) = leaked_entities(&a.full_text()).into_iter().next() {
                return Err(NspuError::InvalidRecord {
                    id: a.original_id.clone(),
                    reason: format!("anonymized text still contains `{hit}`"),
                });
            }
        }
        out.jsonl(paths::FORGET_ANON, &forget_anon)?;
        out.jsonl(paths::FORGET_PLACEHOLDERS, &sidecars)?;
        out.jsonl(paths::PUBLIC_ANON, &public_anon)?;
        out.json(
            paths::ANON_SCAN,
            &AnonScan {
                records_scanned: forget_anon.len() + public_anon.len(),
                leaked: 0,
            },
        )
    }

    fn train_lm(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let corpus = inp.corpus()?;
        let split = inp.split()?;
        let public = inp.public()?;
        let public_anon = inp.anon(paths::PUBLIC_ANON)?;
        let (model, history) = match &c.resume.target {
            Some(path) => (LanguageModel::load(path)?, Vec::new()),
            None => {
                let vocab = vocabulary_texts(&corpus, &split, &public, &public_anon);
                let tokenizer = Tokenizer::build(vocab.iter().map(String::as_str));
                let cfg = c.lm.lm_config(tokenizer.vocab_size(), c.seed);
                train_lm_with(&cfg, tokenizer, &training_texts(&corpus, &split), &c.lm.train_options())?
            }
        };
        model.save(&out.path(paths::TARGET))?;
        out.json(paths::LM_HISTORY, &history)
    }

    fn train_projector(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let target = inp.model(paths::TARGET)?;
        let layer = c.layer()?;
        let public = inp.public()?;
        let public_anon = inp.anon(paths::PUBLIC_ANON)?;
        let ids: Vec<String> = public.iter().map(|r| r.id.clone()).collect();
        let orig_texts: Vec<String> = public.iter().map(|r| record_text(r, c.activation_text)).collect();
        let anon_texts: Vec<String> = public_anon.iter().map(|a| anon_text(a, c.activation_text)).collect();
        let anon = target.extract_activations(&anon_texts, &ids, layer)?;
        let orig = target.extract_activations(&orig_texts, &ids, layer)?;
        let (projector, training) = match &c.resume.projector {
            Some(path) => (ProjectorModel::load(path)?, ProjectorReport::default()),
            None => {
                let pcfg = c.projector.projector_config(target.config.d_model, c.seed);
                let map = target.activation_map(layer)?;
                let x_orig = orig_texts
                    .iter()
                    .map(|t| target.embed_text(t))
                    .collect::<Result<Vec<_>>>()?;
                let emb = &target.params64().tok_emb;
                let mean = emb.mean().unwrap_or(0.0);
                let init_scale = (emb.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(1.0)).sqrt();
                let ctx = InversionContext {
                    map: &map,
                    x_orig: &x_orig,
                    init_scale,
                };
                train_projector_with(&anon.matrix, &orig.matrix, &pcfg, Some(&ctx))?
            }
        };
        let validation = if training.val_indices.is_empty() {
            None
        } else {
            let x = rows(&anon.matrix, &training.val_indices);
            let y = rows(&orig.matrix, &training.val_indices);
            Some(stats(&projector.forward(&x)?, &y)?)
        };
        projector.save(&out.path(paths::PROJECTOR))?;
        anon.save(&out.path(paths::PUBLIC_ANON_ACTS))?;
        orig.save(&out.path(paths::PUBLIC_ORIG_ACTS))?;
        out.json(
            paths::PROJECTOR_REPORT,
            &ProjectorSummary {
                layer,
                pairs: ids.len(),
                validation,
                training,
            },
        )
    }

    fn build_subspace(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let target = inp.model(paths::TARGET)?;
        let projector = inp.load(paths::PROJECTOR, ProjectorModel::load)?;
        let forget_anon = inp.anon(paths::FORGET_ANON)?;
        let texts: Vec<String> = forget_anon.iter().map(|a| anon_text(a, c.activation_text)).collect();
        let ids: Vec<String> = forget_anon.iter().map(|a| a.original_id.clone()).collect();
        let anon = target.extract_activations(&texts, &ids, c.layer()?)?;
        let estimated = project(&projector, &anon)?;
        let subspace = build_forget_subspace(&estimated, c.tau)?;
        anon.save(&out.path(paths::FORGET_ANON_ACTS))?;
        estimated.save(&out.path(paths::FORGET_EST_ACTS))?;
        subspace.save(&out.path(paths::SUBSPACE))
    }

    fn apply_filter(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let target = inp.model(paths::TARGET)?;
        let subspace = inp.load(paths::SUBSPACE, ForgetSubspace::load)?;
        let layer = c.layer()?;
        let sweep = match &c.alpha {
            AlphaSpec::Value(a) => AlphaSweep {
                selected_alpha: *a,
                validation_forget: 0,
                validation_retain: 0,
                rows: Vec::new(),
            },
            AlphaSpec::Grid(grid) => {
                let corpus = inp.corpus()?;
                let split = inp.split()?;
                sweep_alpha(&target, &subspace, layer, grid, &corpus, &split, c)?
            }
        };
        let unlearned = target.attach_filter(&make_filter(&subspace, sweep.selected_alpha)?, layer)?;
        unlearned.save(&out.path(paths::UNLEARNED))?;
        out.json(paths::ALPHA_SWEEP, &sweep)
    }

    fn evaluate(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let target = inp.model(paths::TARGET)?;
        let unlearned = inp.model(paths::UNLEARNED)?;
        let corpus = inp.corpus()?;
        let split = inp.split()?;
        let slot = unlearned.adapter.as_ref().ok_or_else(|| NspuError::StageInput {
            stage: Stage::Evaluate.name().into(),
            path: inp.path(paths::UNLEARNED),
            hint: "checkpoint carries no filter; re-run `nspu apply-filter`".into(),
        })?;
        let (layer, alpha, k) = (slot.layer, slot.filter.alpha, slot.filter.basis.ncols());
        let forget = split.forget_records(&corpus);
        let retain = split.retain_records(&corpus);
        let budget = GenerationBudget::AnswerPlus(c.eval.generation_slack);
        let t_f = measure_set(&target, &forget, budget)?;
        let t_r = measure_set(&target, &retain, budget)?;
        let result = |name: &str, model: &LanguageModel| -> Result<MethodResult> {
            let u_f = measure_set(model, &forget, budget)?;
            let u_r = measure_set(model, &retain, budget)?;
            let sqs = run_sqs(&target, model, &split, &corpus)?;
            let inputs = MetricInputs::from_measures(&t_f, &t_r, &u_f, &u_r, (sqs.m_r, sqs.m_f, sqs.m_nm), c.epsilon);
            Ok(MethodResult {
                method: name.to_string(),
                forget: u_f,
                retain: u_r,
                sqs,
                metrics: report(&inputs)?,
            })
        };
        let mut methods = vec![result("NSPU", &unlearned)?];
        for &m in &c.eval.baselines {
            let cfg = match m {
                BaselineMethod::GA => c.eval.ga,
                BaselineMethod::GD => c.eval.gd,
            };
            let model = run_baseline(&target, &forget, &retain, &cfg)?;
            save_baseline(&model, m, &out.path(&paths::baseline(m)))?;
            methods.push(result(m.name(), &model)?);
        }
        out.json(
            paths::REPORT,
            &EvalReport {
                seed: c.seed,
                layer,
                alpha,
                k,
                target_forget: t_f,
                target_retain: t_r,
                methods,
            },
        )
    }

    fn drift(&self, inp: &Inputs<'_>, out: &Outputs<'_>) -> Result<()> {
        let c = &self.config;
        let target = inp.model(paths::TARGET)?;
        let unlearned = inp.model(paths::UNLEARNED)?;
        let corpus = inp.corpus()?;
        let split = inp.split()?;
        let texts = |rs: Vec<&QARecord>| rs.into_iter().map(|r| record_text(r, c.activation_text)).collect::<Vec<_>>();
        let rows: Vec<DriftRow> = layer_sweep(
            &target,
            &unlearned,
            &texts(split.forget_records(&corpus)),
            &texts(split.retain_records(&corpus)),
        )?;
        out.bytes(paths::DRIFT_CSV, to_csv(&rows).as_bytes())?;
        out.json(paths::DRIFT_JSON, &rows)
    }

    fn flops(&self, out: &Outputs<'_>) -> Result<()> {
        let f = &self.config.flops;
        let rows = flops_table(&f.spec, f.arithmetic);
        out.bytes(paths::FLOPS_TXT, render_table(&rows).as_bytes())?;
        out.json(
            paths::FLOPS_JSON,
            &FlopsReport {
                rows,
                ratios: efficiency_ratios(&f.spec, f.arithmetic).ok(),
            },
        )
    }

    // ------------------------------------------------------------------------
    // Readers for finished runs
    // ------------------------------------------------------------------------

    pub fn read_report(&self) -> Result<EvalReport> {
        read_json(&self.dir().join(paths::REPORT))
    }

    pub fn read_sweep(&self) -> Result<AlphaSweep> {
        read_json(&self.dir().join(paths::ALPHA_SWEEP))
    }

    pub fn read_drift(&self) -> Result<Vec<DriftRow>> {
        read_json(&self.dir().join(paths::DRIFT_JSON))
    }

    pub fn read_flops(&self) -> Result<FlopsReport> {
        read_json(&self.dir().join(paths::FLOPS_JSON))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| NspuError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Evaluates every alpha of `grid` on a validation subset of the forget and
/// retain sets and selects the one with the highest aggregate (first on ties).
pub fn sweep_alpha(
    target: &LanguageModel,
    subspace: &ForgetSubspace,
    layer: usize,
    grid: &[f64],
    corpus: &[QARecord],
    split: &SplitSpec,
    c: &RunConfig,
) -> Result<AlphaSweep> {
    let frac = c.split.validation_fraction;
    let vf = validation_subset(&split.forget_records(corpus), frac, c.seed);
    let vr = validation_subset(&split.retain_records(corpus), frac, c.seed.wrapping_add(1));
    let budget = GenerationBudget::AnswerPlus(c.eval.generation_slack);
    let t_f = measure_set(target, &vf, budget)?;
    let t_r = measure_set(target, &vr, budget)?;
    let mut rows_out = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let model = target.attach_filter(&make_filter(subspace, alpha)?, layer)?;
        let u_f = measure_set(&model, &vf, budget)?;
        let u_r = measure_set(&model, &vr, budget)?;
        let (h, ce, r, n) = four_metrics(&t_f, &t_r, &u_f, &u_r, c.epsilon)?;
        rows_out.push(SweepRow {
            alpha,
            forget_ppl_ratio: u_f.ppl / t_f.ppl,
            retain_ppl_ratio: u_r.ppl / t_r.ppl,
            hps: h,
            ces: ce,
            hrs: r,
            hcnll: n,
            aggregate: aggregate(Some(h), Some(ce), Some(r), Some(n))?,
        });
    }
    let best = rows_out
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.aggregate >= r.aggregate => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| NspuError::Config("alpha grid is empty".into()))?;
    Ok(AlphaSweep {
        selected_alpha: best.alpha,
        validation_forget: vf.len(),
        validation_retain: vr.len(),
        rows: rows_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ORDER.into_iter().chain([Stage::RunAll]) {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!(matches!("train".parse::<Stage>(), Err(NspuError::Config(_))));
    }

    #[test]
    fn every_input_has_an_earlier_producer() {
        for (i, s) in Stage::ORDER.iter().enumerate() {
            for rel in s.inputs() {
                let p = Stage::producer(rel).expect("produced");
                let at = Stage::ORDER.iter().position(|x| *x == p).unwrap();
                assert!(at < i, "{rel} for {s}");
            }
        }
    }

    #[test]
    fn subspace_inputs_exclude_original_forget_text() {
        let inputs = Stage::BuildSubspace.inputs();
        assert_eq!(inputs, &[paths::TARGET, paths::PROJECTOR, paths::FORGET_ANON]);
        assert!(!inputs.contains(&paths::CORPUS));
        assert!(!inputs.contains(&paths::FORGET_PLACEHOLDERS));
    }

    #[test]
    fn validation_subset_is_seeded_and_sized() {
        let corpus = generate_corpus(1, 2);
        let refs: Vec<&QARecord> = corpus.iter().collect();
        let a = validation_subset(&refs, 0.2, 3);
        assert_eq!(a.len(), (refs.len() as f64 * 0.2).ceil() as usize);
        assert_eq!(a, validation_subset(&refs, 0.2, 3));
    }

    #[test]
    fn missing_input_is_a_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let p = Pipeline::new(cfg).unwrap();
        let err = p.run_stage(Stage::Evaluate).unwrap_err();
        assert!(matches!(err, NspuError::StageInput { .. }));
        assert!(err.is_user_error());
        assert!(err.to_string().contains("nspu train-lm"));
    }
}
