// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer: training, scoring, generation, a
//! per-layer activation tap and an adapter slot for the unlearning filter.
//!
//! Parameters are stored and trained in `f32`. Scoring, activation
//! extraction and generation run in `f64` on a lazily cached copy.

pub mod kernel;
pub mod params;
pub mod tokenizer;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{
    activations_from_bytes, activations_to_bytes, read_file, write_file, Container, Tensor,
    TensorData, MAGIC_LM,
};
use crate::error::{NspuError, Result};
use crate::forget::UnlearningFilter;
use crate::numeric::Matrix;
use crate::optim::Adam;
use crate::projector::ActivationMap;

use kernel::{AdapterW, Packed};
pub use params::{LmConfig, LmParams};
pub use tokenizer::Tokenizer;
use tokenizer::{BOS, EOS};

/// Rows are last-token hidden states, one per input text.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub layer: usize,
    pub matrix: Matrix,
    pub sample_ids: Vec<String>,
}

impl ActivationMatrix {
    pub fn new(layer: usize, matrix: Matrix, sample_ids: Vec<String>) -> Result<Self> {
        if matrix.nrows() != sample_ids.len() {
            return Err(NspuError::Shape(format!(
                "{} rows but {} sample ids",
                matrix.nrows(),
                sample_ids.len()
            )));
        }
        Ok(Self {
            layer,
            matrix,
            sample_ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".ids.json");
        PathBuf::from(name)
    }

    /// Writes the `ACTV` payload plus a `<path>.ids.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let data: Vec<f64> = self.matrix.iter().copied().collect();
        let bytes = activations_to_bytes(self.matrix.nrows(), self.matrix.ncols(), self.layer, &data);
        write_file(path, &bytes)?;
        write_file(&Self::sidecar(path), &serde_json::to_vec(&self.sample_ids)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, cols, layer, data) = activations_from_bytes(&read_file(path)?)?;
        let ids: Vec<String> = serde_json::from_slice(&read_file(&Self::sidecar(path))?)?;
        let matrix = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| NspuError::Checkpoint(e.to_string()))?;
        Self::new(layer, matrix, ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Descent,
    Ascent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl TrainOptions {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            batch_size: 16,
            clip: 1.0,
        }
    }
}

/// Filter slot: `(layer, filter)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSlot {
    pub layer: usize,
    pub filter: UnlearningFilter,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: LmParams<f32>,
    pub tokenizer: Tokenizer,
    pub adapter: Option<AdapterSlot>,
    params64: OnceLock<LmParams<f64>>,
}

impl PartialEq for LanguageModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.params == other.params
            && self.tokenizer == other.tokenizer
            && self.adapter == other.adapter
    }
}

fn adapter_of<F: params::Real>(slot: &Option<AdapterSlot>) -> Option<AdapterW<F>> {
    slot.as_ref().map(|a| AdapterW {
        layer: a.layer,
        basis: a.filter.basis.mapv(|x| F::from_f64(x).expect("finite basis")),
        alpha: F::from_f64(a.filter.alpha).expect("finite alpha"),
    })
}

impl LanguageModel {
    pub fn new(config: LmConfig, params: LmParams<f32>, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(NspuError::Shape(format!(
                "tokenizer has {} entries, config.vocab_size is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        if params.len() != config.param_count() {
            return Err(NspuError::Shape("parameters do not match config".into()));
        }
        Ok(Self {
            config,
            params,
            tokenizer,
            adapter: None,
            params64: OnceLock::new(),
        })
    }

    /// Freshly initialised model for `tokenizer`.
    pub fn init(config: &LmConfig, tokenizer: Tokenizer) -> Result<Self> {
        let config = LmConfig {
            vocab_size: tokenizer.vocab_size(),
            ..config.clone()
        };
        config.validate()?;
        let params = LmParams::init(&config);
        Self::new(config, params, tokenizer)
    }

    pub fn params64(&self) -> &LmParams<f64> {
        self.params64.get_or_init(|| self.params.cast())
    }

    fn with_params(&self, params: LmParams<f32>) -> Self {
        Self {
            params,
            params64: OnceLock::new(),
            ..self.clone()
        }
    }

    fn check_len(&self, seq_len: usize) -> Result<()> {
        let inputs = seq_len.saturating_sub(1);
        if inputs > self.config.max_seq_len {
            return Err(NspuError::SequenceTooLong {
                len: inputs,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// `<bos> text <eos>`.
    pub fn encode_text(&self, text: &str) -> Result<Vec<u32>> {
        let mut seq = vec![BOS];
        seq.extend(self.tokenizer.encode(text));
        seq.push(EOS);
        self.check_len(seq.len())?;
        Ok(seq)
    }

    /// `<bos> question answer <eos>` and the index of the first answer token.
    pub fn encode_qa(&self, question: &str, answer: &str) -> Result<(Vec<u32>, usize)> {
        let mut seq = vec![BOS];
        seq.extend(self.tokenizer.encode(question));
        let answer_start = seq.len();
        seq.extend(self.tokenizer.encode(answer));
        seq.push(EOS);
        self.check_len(seq.len())?;
        Ok((seq, answer_start))
    }

    fn encode_prefix(&self, text: &str) -> Result<Vec<u32>> {
        let mut seq = vec![BOS];
        seq.extend(self.tokenizer.encode(text));
        if seq.len() > self.config.max_seq_len {
            return Err(NspuError::SequenceTooLong {
                len: seq.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(seq)
    }

    /// Log-probability of every answer token under teacher forcing.
    pub fn token_logprobs(&self, question: &str, answer: &str) -> Result<Vec<f64>> {
        Ok(self
            .token_logprobs_batch(&[(question.to_string(), answer.to_string())])?
            .remove(0))
    }

    pub fn token_logprobs_batch(&self, pairs: &[(String, String)]) -> Result<Vec<Vec<f64>>> {
        let encoded = pairs
            .iter()
            .map(|(q, a)| self.encode_qa(q, a))
            .collect::<Result<Vec<_>>>()?;
        let p = self.params64();
        let adapter = adapter_of::<f64>(&self.adapter);
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in encoded.chunks(32) {
            let mut packed = Packed::default();
            for (seq, start) in chunk {
                packed.push(seq, *start);
            }
            let (_, logits) = kernel::forward(p, &self.config, adapter.as_ref(), &packed, None);
            let logp = kernel::log_softmax(logits.view());
            for ((seq, start), &(seg_start, _)) in chunk.iter().zip(&packed.segments) {
                // input row r predicts seq[r + 1]; answer tokens exclude the final <eos>
                let vals = (*start..seq.len() - 1)
                    .map(|t| logp[[seg_start + t - 1, seq[t] as usize]])
                    .collect();
                out.push(vals);
            }
        }
        Ok(out)
    }

    /// Mean per-token negative log-likelihood of each full text (`<eos>` included).
    pub fn text_nll(&self, texts: &[String]) -> Result<Vec<f64>> {
        let encoded = texts
            .iter()
            .map(|t| self.encode_text(t))
            .collect::<Result<Vec<_>>>()?;
        let p = self.params64();
        let adapter = adapter_of::<f64>(&self.adapter);
        let mut out = Vec::with_capacity(texts.len());
        for chunk in encoded.chunks(32) {
            let mut packed = Packed::default();
            for seq in chunk {
                packed.push(seq, 1);
            }
            let (_, logits) = kernel::forward(p, &self.config, adapter.as_ref(), &packed, None);
            let logp = kernel::log_softmax(logits.view());
            for &(start, len) in &packed.segments {
                let nll: f64 = (start..start + len)
                    .map(|r| -logp[[r, packed.targets[r] as usize]])
                    .sum();
                out.push(nll / len as f64);
            }
        }
        Ok(out)
    }

    fn activations(&self, texts: &[String], layer: usize, post_adapter: bool) -> Result<Matrix> {
        if layer >= self.config.n_layers {
            return Err(NspuError::InvalidParameter(format!(
                "layer {layer} outside [0, {})",
                self.config.n_layers
            )));
        }
        let encoded = texts
            .iter()
            .map(|t| self.encode_prefix(t))
            .collect::<Result<Vec<_>>>()?;
        let p = self.params64();
        let adapter = adapter_of::<f64>(&self.adapter);
        let mut out = Array2::zeros((texts.len(), self.config.d_model));
        let mut row = 0;
        for chunk in encoded.chunks(32) {
            let mut packed = Packed::default();
            for seq in chunk {
                packed.push_inputs(seq);
            }
            let x0 = kernel::embed(p, &packed);
            let (cache, _) = kernel::forward_from(
                p,
                &self.config,
                adapter.as_ref(),
                x0,
                &packed.segments,
                Some(layer),
                None,
            );
            let source = if post_adapter {
                &cache.outputs[layer]
            } else {
                cache.tap(layer)
            };
            for &(start, len) in &packed.segments {
                out.row_mut(row).assign(&source.row(start + len - 1));
                row += 1;
            }
        }
        Ok(out)
    }

    /// Last-token hidden state after block `layer`, before any adapter.
    pub fn extract_activations(
        &self,
        texts: &[String],
        ids: &[String],
        layer: usize,
    ) -> Result<ActivationMatrix> {
        ActivationMatrix::new(layer, self.activations(texts, layer, false)?, ids.to_vec())
    }

    /// Same as [`LanguageModel::extract_activations`] but after the adapter.
    pub fn extract_activations_post(
        &self,
        texts: &[String],
        ids: &[String],
        layer: usize,
    ) -> Result<ActivationMatrix> {
        ActivationMatrix::new(layer, self.activations(texts, layer, true)?, ids.to_vec())
    }

    /// New model with `filter` in the adapter slot at `layer` (replacing any
    /// previous filter).
    pub fn attach_filter(&self, filter: &UnlearningFilter, layer: usize) -> Result<Self> {
        if filter.dim() != self.config.d_model {
            return Err(NspuError::Shape(format!(
                "filter dimension {} != d_model {}",
                filter.dim(),
                self.config.d_model
            )));
        }
        if layer >= self.config.n_layers {
            return Err(NspuError::InvalidParameter(format!(
                "layer {layer} outside [0, {})",
                self.config.n_layers
            )));
        }
        let mut m = self.clone();
        m.adapter = Some(AdapterSlot {
            layer,
            filter: filter.clone(),
        });
        Ok(m)
    }

    pub fn detach_filter(&self) -> Self {
        let mut m = self.clone();
        m.adapter = None;
        m
    }

    /// Greedy decoding of up to `max_new_tokens` after `prompt`.
    pub fn generate(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let mut seq = self.encode_prefix(prompt)?;
        let p = self.params64();
        let adapter = adapter_of::<f64>(&self.adapter);
        let mut produced = Vec::new();
        for _ in 0..max_new_tokens {
            if seq.len() > self.config.max_seq_len {
                break;
            }
            let mut packed = Packed::default();
            packed.push_inputs(&seq);
            let x0 = kernel::embed(p, &packed);
            let (cache, _) = kernel::forward_from(
                p,
                &self.config,
                adapter.as_ref(),
                x0,
                &packed.segments,
                Some(self.config.n_layers - 1),
                None,
            );
            let last = cache.outputs[self.config.n_layers - 1]
                .slice(s![seq.len() - 1..seq.len(), ..])
                .to_owned();
            let logits = head_logits(p, &last);
            let next = argmax(logits.row(0).iter().copied()) as u32;
            if next == EOS {
                break;
            }
            produced.push(next);
            seq.push(next);
        }
        Ok(self.tokenizer.decode(&produced))
    }

    /// Token embeddings (`<bos>` + text, no positions) as a continuous input.
    pub fn embed_text(&self, text: &str) -> Result<Matrix> {
        let seq = self.encode_prefix(text)?;
        let p = self.params64();
        Ok(Array2::from_shape_fn((seq.len(), self.config.d_model), |(i, j)| {
            p.tok_emb[[seq[i] as usize, j]]
        }))
    }

    /// Differentiable map from a token-embedding sequence to the last-token
    /// activation at `layer` (no adapter).
    pub fn activation_map(&self, layer: usize) -> Result<LmActivationMap<'_>> {
        if layer >= self.config.n_layers {
            return Err(NspuError::InvalidParameter(format!(
                "layer {layer} outside [0, {})",
                self.config.n_layers
            )));
        }
        Ok(LmActivationMap { model: self, layer })
    }

    pub fn to_container(&self) -> Result<Container> {
        let adapter_meta = self.adapter.as_ref().map(|a| {
            serde_json::json!({"layer": a.layer, "alpha": a.filter.alpha})
        });
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.tokenizer.vocab(),
            "adapter": adapter_meta,
        });
        let mut tensors: Vec<Tensor> = self
            .params
            .named()
            .into_iter()
            .map(|(name, shape, data)| Tensor {
                name,
                shape,
                data: TensorData::F32(data.to_vec()),
            })
            .collect();
        if let Some(a) = &self.adapter {
            tensors.push(Tensor {
                name: "adapter.basis".into(),
                shape: a.filter.basis.shape().to_vec(),
                data: TensorData::F64(a.filter.basis.iter().copied().collect()),
            });
        }
        Ok(Container {
            magic: MAGIC_LM,
            meta,
            tensors,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: LmConfig = serde_json::from_value(c.meta["config"].clone())?;
        let vocab: Vec<String> = serde_json::from_value(c.meta["vocab"].clone())?;
        let named: Vec<(String, Vec<usize>, Vec<f32>)> = c
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with("adapter."))
            .map(|t| (t.name.clone(), t.shape.clone(), t.data.clone().into_f32()))
            .collect();
        config.validate()?;
        let params = LmParams::from_named(&config, &named)?;
        let mut model = Self::new(config, params, Tokenizer::from_vocab(vocab))?;
        if let Some(a) = c.meta.get("adapter").filter(|v| !v.is_null()) {
            let layer = a["layer"]
                .as_u64()
                .ok_or_else(|| NspuError::Checkpoint("adapter.layer missing".into()))?
                as usize;
            let alpha = a["alpha"]
                .as_f64()
                .ok_or_else(|| NspuError::Checkpoint("adapter.alpha missing".into()))?;
            let t = c.tensor("adapter.basis")?;
            if t.shape.len() != 2 {
                return Err(NspuError::Checkpoint("adapter.basis must be 2-D".into()));
            }
            let basis = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone().into_f64())
                .map_err(|e| NspuError::Checkpoint(e.to_string()))?;
            model = model.attach_filter(&UnlearningFilter { basis, alpha }, layer)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path, MAGIC_LM)?)
    }
}

fn head_logits(p: &LmParams<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
    }
    let f = &out * &p.lnf_g + &p.lnf_b;
    f.dot(&p.w_out) + &p.b_out
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Embedding-space view of the model used for inversion.
#[derive(Debug, Clone, Copy)]
pub struct LmActivationMap<'a> {
    model: &'a LanguageModel,
    layer: usize,
}

impl LmActivationMap<'_> {
    fn run(&self, x: &Matrix) -> (kernel::ForwardCache<f64>, Vec<(usize, usize)>) {
        let p = self.model.params64();
        let t = x.nrows();
        let x0 = x + &p.pos_emb.slice(s![..t, ..]);
        let segments = vec![(0, t)];
        let (cache, _) =
            kernel::forward_from(p, &self.model.config, None, x0, &segments, Some(self.layer), None);
        (cache, segments)
    }
}

impl ActivationMap for LmActivationMap<'_> {
    fn input_dim(&self) -> usize {
        self.model.config.d_model
    }

    fn output_dim(&self) -> usize {
        self.model.config.d_model
    }

    fn forward(&self, x: &Matrix) -> Array1<f64> {
        let (cache, _) = self.run(x);
        cache.tap(self.layer).row(x.nrows() - 1).to_owned()
    }

    fn vjp(&self, x: &Matrix, dh: &Array1<f64>) -> Matrix {
        let (cache, _) = self.run(x);
        let mut d_top = Array2::zeros(x.dim());
        d_top.row_mut(x.nrows() - 1).assign(dh);
        kernel::backward_blocks(
            self.model.params64(),
            &self.model.config,
            None,
            &cache,
            d_top,
            self.layer,
            None,
        )
    }

    fn loss_grad(&self, x: &Matrix, target: &Array1<f64>) -> (f64, Matrix) {
        let (cache, _) = self.run(x);
        let last = x.nrows() - 1;
        let diff = &cache.tap(self.layer).row(last) - target;
        let loss = diff.dot(&diff);
        let mut d_top = Array2::zeros(x.dim());
        d_top.row_mut(last).assign(&(diff * 2.0));
        let dx = kernel::backward_blocks(
            self.model.params64(),
            &self.model.config,
            None,
            &cache,
            d_top,
            self.layer,
            None,
        );
        (loss, dx)
    }
}

// ----------------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------------

/// One group of training sequences with its gradient sign and weight.
struct Group<'a> {
    sequences: &'a [(Vec<u32>, usize)],
    scale: f64,
}

/// Adam over shuffled minibatches; with several groups, each epoch
/// alternates one minibatch per group round-robin.
fn run_schedule(
    model: &LanguageModel,
    groups: &[Group<'_>],
    opts: &TrainOptions,
    seed: u64,
) -> Result<(LanguageModel, Vec<f64>)> {
    if opts.batch_size == 0 {
        return Err(NspuError::InvalidParameter("batch_size must be ≥ 1".into()));
    }
    let mut params = model.params.clone();
    let adapter = adapter_of::<f32>(&model.adapter);
    let shapes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::<f32>::new(&shapes, Some(opts.clip));
    let mut orders: Vec<Vec<usize>> = groups.iter().map(|g| (0..g.sequences.len()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20b);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        for o in orders.iter_mut() {
            o.shuffle(&mut rng);
        }
        let batches: Vec<Vec<&[usize]>> = orders.iter().map(|o| o.chunks(opts.batch_size).collect()).collect();
        let rounds = batches.iter().map(Vec::len).max().unwrap_or(0);
        let (mut total, mut weight) = (0.0, 0.0);
        for round in 0..rounds {
            for (g, group) in groups.iter().enumerate() {
                let Some(batch) = batches[g].get(round) else {
                    continue;
                };
                let mut packed = Packed::default();
                for &i in batch.iter() {
                    let (seq, from) = &group.sequences[i];
                    packed.push(seq, *from);
                }
                let w: f64 = packed.weights.iter().sum();
                if w == 0.0 {
                    continue;
                }
                let dropout = (model.config.dropout > 0.0).then_some(&mut drop_rng);
                let (loss, grads) = kernel::loss_and_grad(
                    &params,
                    &model.config,
                    adapter.as_ref(),
                    &packed,
                    group.scale,
                    dropout,
                );
                if !loss.is_finite() {
                    return Err(NspuError::TrainingDiverged(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                total += loss * w;
                weight += w;
                let g = grads.slices();
                let norm = adam.step(params.slices_mut(), &g, opts.lr);
                if !norm.is_finite() {
                    return Err(NspuError::TrainingDiverged(format!(
                        "non-finite gradient at epoch {epoch}"
                    )));
                }
            }
        }
        history.push(total / weight.max(1.0));
    }
    if params.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(NspuError::TrainingDiverged("non-finite parameters".into()));
    }
    Ok((model.with_params(params), history))
}

fn run_epochs(
    model: &LanguageModel,
    sequences: &[(Vec<u32>, usize)],
    opts: &TrainOptions,
    sign: f64,
    seed: u64,
) -> Result<(LanguageModel, Vec<f64>)> {
    run_schedule(model, &[Group { sequences, scale: sign }], opts, seed)
}

/// Trains a fresh model on `texts` with a tokenizer built from them.
pub fn train_lm(config: &LmConfig, texts: &[String], epochs: usize, lr: f64) -> Result<LanguageModel> {
    let tokenizer = Tokenizer::build(texts.iter().map(String::as_str));
    Ok(train_lm_with(config, tokenizer, texts, &TrainOptions::new(epochs, lr))?.0)
}

/// Trains a fresh model; returns it with the mean training loss of every epoch.
pub fn train_lm_with(
    config: &LmConfig,
    tokenizer: Tokenizer,
    texts: &[String],
    opts: &TrainOptions,
) -> Result<(LanguageModel, Vec<f64>)> {
    if texts.is_empty() {
        return Err(NspuError::EmptyDataset("no training texts".into()));
    }
    if opts.epochs == 0 {
        return Err(NspuError::InvalidParameter("epochs must be ≥ 1".into()));
    }
    let model = LanguageModel::init(config, tokenizer)?;
    let seqs = texts
        .iter()
        .map(|t| Ok((model.encode_text(t)?, 1)))
        .collect::<Result<Vec<_>>>()?;
    run_epochs(&model, &seqs, opts, 1.0, model.config.seed)
}

/// Continues training on question/answer pairs with the loss on answer
/// tokens only, in the given direction.
pub fn finetune(
    model: &LanguageModel,
    qa_pairs: &[(String, String)],
    epochs: usize,
    lr: f64,
    direction: Direction,
) -> Result<LanguageModel> {
    Ok(finetune_with(model, qa_pairs, &TrainOptions::new(epochs, lr), direction)?.0)
}

pub fn finetune_with(
    model: &LanguageModel,
    qa_pairs: &[(String, String)],
    opts: &TrainOptions,
    direction: Direction,
) -> Result<(LanguageModel, Vec<f64>)> {
    if qa_pairs.is_empty() {
        return Err(NspuError::EmptyDataset("no fine-tuning pairs".into()));
    }
    let seqs = qa_pairs
        .iter()
        .map(|(q, a)| model.encode_qa(q, a))
        .collect::<Result<Vec<_>>>()?;
    run_epochs(
        model,
        &seqs,
        opts,
        direction.sign(),
        model.config.seed.wrapping_add(0x9e37_79b9),
    )
}

/// Alternates descent minibatches on `descend` with ascent minibatches on
/// `ascend` (gradient scaled by `ascent_weight`), one of each per round.
pub fn finetune_alternating(
    model: &LanguageModel,
    descend: &[(String, String)],
    ascend: &[(String, String)],
    ascent_weight: f64,
    opts: &TrainOptions,
) -> Result<(LanguageModel, Vec<f64>)> {
    if descend.is_empty() || ascend.is_empty() {
        return Err(NspuError::EmptyDataset("both pair sets must be non-empty".into()));
    }
    let encode = |pairs: &[(String, String)]| {
        pairs
            .iter()
            .map(|(q, a)| model.encode_qa(q, a))
            .collect::<Result<Vec<_>>>()
    };
    let (d, a) = (encode(descend)?, encode(ascend)?);
    run_schedule(
        model,
        &[
            Group {
                sequences: &d,
                scale: 1.0,
            },
            Group {
                sequences: &a,
                scale: -ascent_weight,
            },
        ],
        opts,
        model.config.seed.wrapping_add(0x9e37_79b9),
    )
}

/// Mean answer-token NLL per pair (answer tokens only, `<eos>` excluded).
pub fn answer_nll(model: &LanguageModel, pairs: &[(String, String)]) -> Result<Vec<f64>> {
    Ok(model
        .token_logprobs_batch(pairs)?
        .into_iter()
        .map(|lp| {
            if lp.is_empty() {
                0.0
            } else {
                -lp.iter().sum::<f64>() / lp.len() as f64
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forget::{build_from_matrix, make_filter};
    use rand::Rng;

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 24,
            ..LmConfig::default()
        }
    }

    fn texts() -> Vec<String> {
        vec![
            "the cat sat on the mat".into(),
            "a dog ran in the park".into(),
            "where does alice live ? alice lives in paris".into(),
        ]
    }

    #[test]
    fn fd_gradient_check_f64() {
        let tok = Tokenizer::build(texts().iter().map(String::as_str));
        let cfg = LmConfig {
            vocab_size: tok.vocab_size(),
            seed: 3,
            ..tiny_cfg()
        };
        let params = LmParams::<f64>::init(&cfg).map(|x| x * 5.0);
        let model = LanguageModel::init(&cfg, tok).unwrap();
        let mut packed = Packed::default();
        for t in texts() {
            packed.push(&model.encode_text(&t).unwrap(), 2);
        }
        let (_, grads) = kernel::loss_and_grad(&params, &cfg, None, &packed, 1.0, None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = params.len();
        let mut checked = 0;
        while checked < 25 {
            let idx = rng.random_range(0..n);
            let g = grads.get_flat(idx);
            let h = 1e-5;
            let mut p = params.clone();
            let x = p.get_flat(idx);
            p.set_flat(idx, x + h);
            let lp = kernel::loss(&p, &cfg, None, &packed);
            p.set_flat(idx, x - h);
            let lm = kernel::loss(&p, &cfg, None, &packed);
            let fd = (lp - lm) / (2.0 * h);
            if g.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue;
            }
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "param {idx}: analytic {g}, fd {fd}, rel {rel}");
            checked += 1;
        }
    }

    #[test]
    fn fresh_model_logprobs_near_uniform() {
        let tok = Tokenizer::build(texts().iter().map(String::as_str));
        let v = tok.vocab_size() as f64;
        let model = LanguageModel::init(&tiny_cfg(), tok).unwrap();
        let lp = model.token_logprobs("where does alice live ?", "alice lives in paris").unwrap();
        assert_eq!(lp.len(), 4);
        for x in lp {
            assert!(x <= 0.0);
            assert!((x + v.ln()).abs() < 0.05, "{x} vs {}", -v.ln());
        }
    }

    #[test]
    fn overlength_is_rejected() {
        let tok = Tokenizer::build(["a b c"]);
        let model = LanguageModel::init(&LmConfig { max_seq_len: 4, ..tiny_cfg() }, tok).unwrap();
        assert!(matches!(
            model.token_logprobs("a b", "c a b"),
            Err(NspuError::SequenceTooLong { .. })
        ));
        assert!(model.token_logprobs("a", "b c").is_ok());
    }

    #[test]
    fn zero_epochs_and_empty_inputs_fail() {
        assert!(train_lm(&tiny_cfg(), &texts(), 0, 1e-3).is_err());
        assert!(train_lm(&tiny_cfg(), &[], 1, 1e-3).is_err());
    }

    #[test]
    fn adapter_zero_alpha_is_neutral_and_replaces() {
        let tok = Tokenizer::build(texts().iter().map(String::as_str));
        let model = LanguageModel::init(&tiny_cfg(), tok).unwrap();
        let ids: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let acts = model.extract_activations(&texts(), &ids, 0).unwrap();
        let mut h = acts.matrix.clone();
        h.row_mut(2).mapv_inplace(|x| x * 3.0);
        let sub = build_from_matrix(&h, 0.9).unwrap();
        let f0 = make_filter(&sub, 0.0).unwrap();
        let m0 = model.attach_filter(&f0, 0).unwrap();
        let a = model.token_logprobs("the cat", "sat on the mat").unwrap();
        let b = m0.token_logprobs("the cat", "sat on the mat").unwrap();
        assert_eq!(a, b);
        let f1 = make_filter(&sub, 0.7).unwrap();
        let twice = m0.attach_filter(&f1, 1).unwrap().attach_filter(&f1, 0).unwrap();
        assert_eq!(twice.adapter.as_ref().unwrap().layer, 0);
        assert_eq!(twice, model.attach_filter(&f1, 0).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let tok = Tokenizer::build(texts().iter().map(String::as_str));
        let model = LanguageModel::init(&tiny_cfg(), tok).unwrap();
        let sub = build_from_matrix(
            &Array2::from_shape_fn((4, 16), |(i, j)| ((i * 7 + j * 3) % 5) as f64),
            0.9,
        )
        .unwrap();
        let m = model.attach_filter(&make_filter(&sub, 0.25).unwrap(), 1).unwrap();
        let c = m.to_container().unwrap();
        let back = LanguageModel::from_container(
            &Container::from_bytes(&c.to_bytes().unwrap(), MAGIC_LM).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn generate_budget_and_determinism() {
        let tok = Tokenizer::build(texts().iter().map(String::as_str));
        let model = LanguageModel::init(&tiny_cfg(), tok).unwrap();
        assert_eq!(model.generate("the cat", 0).unwrap(), "");
        let a = model.generate("the cat", 5).unwrap();
        assert_eq!(a, model.generate("the cat", 5).unwrap());
    }
}
