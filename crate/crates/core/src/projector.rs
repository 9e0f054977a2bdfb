// SPDX-License-Identifier: MIT OR Apache-2.0

//! Latent representation aligner: a three-layer MLP mapping anonymised
//! activations to estimates of the original activations, trained with an
//! inversion-resistance penalty.
//!
//! ```text
//! h_est = W3 · relu(W2 · relu(W1 · x + b1) + b2) + b3      (dropout after each relu)
//! L     = mean ||h_est - h||^2 / d  -  lambda_inv · mean ||phi(x'*) - h_est(anchor)||^2 / d
//! ```
//!
//! `x'*` is the result of the inner inversion, refreshed every `inv_every`
//! epochs on a small anchor set and held constant in between.

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor, TensorData, MAGIC_PROJECTOR};
use crate::error::{NspuError, Result};
use crate::lm::ActivationMatrix;
use crate::numeric::{stats, Matrix, RegressionStats};
use crate::optim::Adam;

/// Differentiable map from a continuous input sequence (`T x d_in`) to a
/// single activation vector.
pub trait ActivationMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn forward(&self, x: &Matrix) -> Array1<f64>;
    /// Vector-Jacobian product `dh^T · d phi / dx`.
    fn vjp(&self, x: &Matrix, dh: &Array1<f64>) -> Matrix;

    /// `||phi(x) - target||^2` and its gradient w.r.t. `x`.
    fn loss_grad(&self, x: &Matrix, target: &Array1<f64>) -> (f64, Matrix) {
        let diff = self.forward(x) - target;
        let loss = diff.dot(&diff);
        (loss, self.vjp(x, &(diff * 2.0)))
    }
}

/// `phi(x) = M x` on single-row inputs.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub m: Matrix,
}

impl ActivationMap for LinearMap {
    fn input_dim(&self) -> usize {
        self.m.ncols()
    }

    fn output_dim(&self) -> usize {
        self.m.nrows()
    }

    fn forward(&self, x: &Matrix) -> Array1<f64> {
        self.m.dot(&x.row(0))
    }

    fn vjp(&self, _x: &Matrix, dh: &Array1<f64>) -> Matrix {
        self.m.t().dot(dh).insert_axis(Axis(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub lambda_inv: f64,
    pub inv_steps: usize,
    pub inv_every: usize,
    /// Anchor pairs per inversion refresh.
    pub inv_batch: usize,
    /// Step size of the inner gradient descent.
    pub inv_lr: f64,
    pub batch_size: usize,
    /// Fraction of pairs held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl ProjectorConfig {
    /// `d -> 2d -> 2d -> d` with the default optimisation settings.
    pub fn for_dim(d: usize) -> Self {
        Self {
            d_in: d,
            d_hidden: 2 * d,
            d_out: d,
            dropout: 0.1,
            lr: 1e-3,
            epochs: 200,
            lambda_inv: 0.01,
            inv_steps: 20,
            inv_every: 25,
            inv_batch: 4,
            inv_lr: 0.05,
            batch_size: 32,
            val_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_out == 0 {
            return Err(NspuError::InvalidParameter("projector dims must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NspuError::InvalidParameter(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.lambda_inv >= 0.0) || !self.lambda_inv.is_finite() {
            return Err(NspuError::InvalidParameter(format!(
                "lambda_inv must be ≥ 0, got {}",
                self.lambda_inv
            )));
        }
        if self.batch_size == 0 || self.inv_every == 0 {
            return Err(NspuError::InvalidParameter(
                "batch_size and inv_every must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(NspuError::InvalidParameter(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorModel {
    pub config: ProjectorConfig,
    pub w1: Matrix,
    pub b1: Array1<f64>,
    pub w2: Matrix,
    pub b2: Array1<f64>,
    pub w3: Matrix,
    pub b3: Array1<f64>,
}

struct MlpCache {
    x: Matrix,
    z1: Matrix,
    a1: Matrix,
    z2: Matrix,
    a2: Matrix,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Grads {
    w1: Matrix,
    b1: Array1<f64>,
    w2: Matrix,
    b2: Array1<f64>,
    w3: Matrix,
    b3: Array1<f64>,
}

impl ProjectorModel {
    /// Uniform `±1/sqrt(fan_in)` init for weights and biases.
    pub fn init(config: &ProjectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
            let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
            (w, b)
        };
        let (w1, b1) = layer(config.d_in, config.d_hidden);
        let (w2, b2) = layer(config.d_hidden, config.d_hidden);
        let (w3, b3) = layer(config.d_hidden, config.d_out);
        Ok(Self {
            config: config.clone(),
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(config: &ProjectorConfig) -> Result<Self> {
        let mut m = Self::init(config)?;
        for s in m.slices_mut() {
            s.fill(0.0);
        }
        Ok(m)
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().expect("contiguous"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
            self.b2.as_slice_mut().expect("contiguous"),
            self.w3.as_slice_mut().expect("contiguous"),
            self.b3.as_slice_mut().expect("contiguous"),
        ]
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
            self.w3.as_slice().expect("contiguous"),
            self.b3.as_slice().expect("contiguous"),
        ]
    }

    fn forward_cached(&self, x: &Matrix, mut dropout: Option<&mut ChaCha8Rng>) -> (Matrix, MlpCache) {
        let p = self.config.dropout;
        let mut mask = |m: &mut Matrix| {
            if let Some(rng) = dropout.as_deref_mut() {
                if p > 0.0 {
                    let keep = 1.0 / (1.0 - p);
                    m.mapv_inplace(|v| if rng.random::<f64>() < p { 0.0 } else { v * keep });
                }
            }
        };
        let z1 = x.dot(&self.w1) + &self.b1;
        let mut a1 = z1.mapv(|v| v.max(0.0));
        mask(&mut a1);
        let z2 = a1.dot(&self.w2) + &self.b2;
        let mut a2 = z2.mapv(|v| v.max(0.0));
        mask(&mut a2);
        let out = a2.dot(&self.w3) + &self.b3;
        (
            out,
            MlpCache {
                x: x.clone(),
                z1,
                a1,
                z2,
                a2,
            },
        )
    }

    fn backward(&self, cache: &MlpCache, dout: &Matrix, grads: &mut Grads) {
        grads.w3 += &cache.a2.t().dot(dout);
        grads.b3 += &dout.sum_axis(Axis(0));
        let mut da2 = dout.dot(&self.w3.t());
        // dropout masks are recovered from a2 == 0 where z2 > 0
        ndarray::Zip::from(&mut da2)
            .and(&cache.z2)
            .and(&cache.a2)
            .for_each(|g, &z, &a| {
                if z <= 0.0 {
                    *g = 0.0;
                } else if a != 0.0 {
                    *g *= a / z;
                } else {
                    *g = 0.0;
                }
            });
        grads.w2 += &cache.a1.t().dot(&da2);
        grads.b2 += &da2.sum_axis(Axis(0));
        let mut da1 = da2.dot(&self.w2.t());
        ndarray::Zip::from(&mut da1)
            .and(&cache.z1)
            .and(&cache.a1)
            .for_each(|g, &z, &a| {
                if z <= 0.0 {
                    *g = 0.0;
                } else if a != 0.0 {
                    *g *= a / z;
                } else {
                    *g = 0.0;
                }
            });
        grads.w1 += &cache.x.t().dot(&da1);
        grads.b1 += &da1.sum_axis(Axis(0));
    }

    fn zero_grads(&self) -> Grads {
        Grads {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.len()),
            w2: Array2::zeros(self.w2.dim()),
            b2: Array1::zeros(self.b2.len()),
            w3: Array2::zeros(self.w3.dim()),
            b3: Array1::zeros(self.b3.len()),
        }
    }

    /// All parameters in `w1, b1, w2, b2, w3, b3` order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat_param(&mut self, mut idx: usize, value: f64) {
        for s in self.slices_mut() {
            if idx < s.len() {
                s[idx] = value;
                return;
            }
            idx -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// Evaluation-mode forward pass on rows of `x`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.config.d_in {
            return Err(NspuError::Shape(format!(
                "projector expects {} columns, got {}",
                self.config.d_in,
                x.ncols()
            )));
        }
        Ok(self.forward_cached(x, None).0)
    }

    pub fn to_container(&self) -> Result<Container> {
        let names = ["w1", "b1", "w2", "b2", "w3", "b3"];
        let shapes = [
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
            self.w3.shape().to_vec(),
            self.b3.shape().to_vec(),
        ];
        let tensors = names
            .iter()
            .zip(shapes)
            .zip(self.slices())
            .map(|((n, shape), data)| Tensor {
                name: n.to_string(),
                shape,
                data: TensorData::F64(data.to_vec()),
            })
            .collect();
        Ok(Container {
            magic: MAGIC_PROJECTOR,
            meta: serde_json::json!({ "config": self.config }),
            tensors,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: ProjectorConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut m = Self::zeros(&config)?;
        let names = ["w1", "b1", "w2", "b2", "w3", "b3"];
        for (name, dst) in names.iter().zip(m.slices_mut()) {
            let t = c.tensor(name)?;
            if t.data.len() != dst.len() {
                return Err(NspuError::Checkpoint(format!(
                    "tensor {name} has {} values, expected {}",
                    t.data.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(&t.data.clone().into_f64());
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path, MAGIC_PROJECTOR)?)
    }
}

/// Row-wise evaluation-mode projection.
pub fn project(model: &ProjectorModel, anon: &ActivationMatrix) -> Result<ActivationMatrix> {
    ActivationMatrix::new(anon.layer, model.forward(&anon.matrix)?, anon.sample_ids.clone())
}

pub fn evaluate_projector(model: &ProjectorModel, anon: &Matrix, orig: &Matrix) -> Result<RegressionStats> {
    if anon.nrows() == 0 {
        return Err(NspuError::EmptyDataset("no test pairs".into()));
    }
    stats(&model.forward(anon)?, orig)
}

// ----------------------------------------------------------------------------
// Inversion
// ----------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum InversionInit {
    /// `N(0, scale^2)` entries from the given seed.
    Random { seed: u64, scale: f64 },
    At(Matrix),
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub x_star: Matrix,
    /// Inner loss before each step and after the last one.
    pub losses: Vec<f64>,
}

impl Inversion {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

/// Gradient descent on `||phi(x') - h_est||^2` over a continuous input.
pub fn invert(
    map: &dyn ActivationMap,
    h_est: &Array1<f64>,
    shape: (usize, usize),
    init: InversionInit,
    steps: usize,
    lr: f64,
) -> Result<Inversion> {
    if steps == 0 {
        return Err(NspuError::InvalidParameter("inversion steps must be ≥ 1".into()));
    }
    if h_est.len() != map.output_dim() || shape.1 != map.input_dim() {
        return Err(NspuError::Shape(format!(
            "inversion target has {} dims, map outputs {}; input width {} vs {}",
            h_est.len(),
            map.output_dim(),
            shape.1,
            map.input_dim()
        )));
    }
    let mut x = match init {
        InversionInit::Random { seed, scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, scale)
                .map_err(|e| NspuError::InvalidParameter(e.to_string()))?;
            Array2::from_shape_fn(shape, |_| dist.sample(&mut rng))
        }
        InversionInit::At(m) => {
            if m.dim() != shape {
                return Err(NspuError::Shape("inversion init has wrong shape".into()));
            }
            m
        }
    };
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grad) = map.loss_grad(&x, h_est);
        if !loss.is_finite() {
            return Err(NspuError::InversionDiverged(format!(
                "non-finite inner loss at step {step}"
            )));
        }
        losses.push(loss);
        x.scaled_add(-lr, &grad);
    }
    let last = map.loss_grad(&x, h_est).0;
    if !last.is_finite() {
        return Err(NspuError::InversionDiverged("non-finite final inner loss".into()));
    }
    losses.push(last);
    Ok(Inversion { x_star: x, losses })
}

/// `||x'* - x_orig||^2` after inverting `h_est` from a random start.
pub fn inversion_score(
    map: &dyn ActivationMap,
    h_est: &Array1<f64>,
    x_orig: &Matrix,
    steps: usize,
    lr: f64,
    init: InversionInit,
) -> Result<f64> {
    let inv = invert(map, h_est, x_orig.dim(), init, steps, lr)?;
    let diff = &inv.x_star - x_orig;
    Ok(diff.iter().map(|v| v * v).sum())
}

// ----------------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------------

/// Inversion context for the penalty term: the activation map and the
/// original input sequence behind each training pair.
pub struct InversionContext<'a> {
    pub map: &'a dyn ActivationMap,
    pub x_orig: &'a [Matrix],
    /// Std of the random inner-loop initialisation.
    pub init_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectorReport {
    /// Held-out alignment MSE before training and after every epoch.
    pub val_history: Vec<f64>,
    /// Mean InvOptScore at each refresh.
    pub inv_scores: Vec<f64>,
    /// Mean final inner loss at each refresh.
    pub inv_losses: Vec<f64>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Frozen penalty anchors: anonymised input and `phi(x'*)`.
#[derive(Debug, Clone)]
pub(crate) struct Anchors {
    pub x_anon: Matrix,
    pub phi_star: Matrix,
}

/// Surrogate objective and gradient on one minibatch.
pub(crate) fn objective(
    model: &ProjectorModel,
    x: &Matrix,
    y: &Matrix,
    anchors: Option<&Anchors>,
    dropout: Option<&mut ChaCha8Rng>,
) -> (f64, Grads) {
    let d = model.config.d_out as f64;
    let n = x.nrows() as f64;
    let mut grads = model.zero_grads();
    let mut rng = dropout;
    let (out, cache) = model.forward_cached(x, rng.as_deref_mut());
    let diff = &out - y;
    let mut loss = diff.iter().map(|v| v * v).sum::<f64>() / (n * d);
    model.backward(&cache, &(diff * (2.0 / (n * d))), &mut grads);
    let lambda = model.config.lambda_inv;
    if let (Some(a), true) = (anchors, lambda > 0.0) {
        let na = a.x_anon.nrows() as f64;
        let (out_a, cache_a) = model.forward_cached(&a.x_anon, rng);
        let diff_a = &out_a - &a.phi_star;
        loss -= lambda * diff_a.iter().map(|v| v * v).sum::<f64>() / (na * d);
        model.backward(&cache_a, &(diff_a * (-2.0 * lambda / (na * d))), &mut grads);
    }
    (loss, grads)
}

/// Surrogate training objective without dropout and its gradient, flattened
/// like [`ProjectorModel::flat_params`]. `anchors` pairs anonymized anchor
/// inputs with their frozen inversion targets.
pub fn surrogate_objective(
    model: &ProjectorModel,
    x: &Matrix,
    y: &Matrix,
    anchors: Option<(&Matrix, &Matrix)>,
) -> (f64, Vec<f64>) {
    let anchors = anchors.map(|(a, p)| Anchors {
        x_anon: a.clone(),
        phi_star: p.clone(),
    });
    let (loss, g) = objective(model, x, y, anchors.as_ref(), None);
    let flat = [&g.w1, &g.w2, &g.w3]
        .iter()
        .zip([&g.b1, &g.b2, &g.b3])
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect();
    (loss, flat)
}

fn mse(model: &ProjectorModel, x: &Matrix, y: &Matrix) -> f64 {
    let out = model.forward_cached(x, None).0;
    let diff = out - y;
    diff.iter().map(|v| v * v).sum::<f64>() / diff.len().max(1) as f64
}

fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    m.select(Axis(0), idx)
}

/// Pure-alignment training (no inversion term unless a context is given).
pub fn train_projector(anon: &Matrix, orig: &Matrix, config: &ProjectorConfig) -> Result<ProjectorModel> {
    Ok(train_projector_with(anon, orig, config, None)?.0)
}

pub fn train_projector_with(
    anon: &Matrix,
    orig: &Matrix,
    config: &ProjectorConfig,
    inversion: Option<&InversionContext<'_>>,
) -> Result<(ProjectorModel, ProjectorReport)> {
    config.validate()?;
    let n = anon.nrows();
    if n != orig.nrows() {
        return Err(NspuError::Shape(format!(
            "{n} anonymised rows vs {} original rows",
            orig.nrows()
        )));
    }
    if anon.ncols() != config.d_in || orig.ncols() != config.d_out {
        return Err(NspuError::Shape(format!(
            "pairs are {}→{}, config is {}→{}",
            anon.ncols(),
            orig.ncols(),
            config.d_in,
            config.d_out
        )));
    }
    if n < 10 {
        return Err(NspuError::EmptyDataset(format!("need ≥ 10 pairs, got {n}")));
    }
    if let Some(ctx) = inversion {
        if ctx.x_orig.len() != n {
            return Err(NspuError::Shape("one original input per pair required".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.min(n - 1);
    let mut val_indices = order[..n_val].to_vec();
    let mut train_indices = order[n_val..].to_vec();
    val_indices.sort_unstable();
    train_indices.sort_unstable();
    let (xv, yv) = (select_rows(anon, &val_indices), select_rows(orig, &val_indices));
    let eval_x = if n_val > 0 { &xv } else { anon };
    let eval_y = if n_val > 0 { &yv } else { orig };

    let mut model = ProjectorModel::init(config)?;
    let shapes: Vec<usize> = model.slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::<f64>::new(&shapes, None);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd20b);
    let mut report = ProjectorReport {
        val_history: vec![mse(&model, eval_x, eval_y)],
        train_indices: train_indices.clone(),
        val_indices,
        ..ProjectorReport::default()
    };
    let use_inv = config.lambda_inv > 0.0 && config.inv_steps > 0;
    let mut anchors: Option<Anchors> = None;
    let mut batch_order = train_indices.clone();
    for epoch in 0..config.epochs {
        if use_inv && epoch % config.inv_every == 0 {
            if let Some(ctx) = inversion {
                anchors = Some(refresh_anchors(
                    &model,
                    anon,
                    &train_indices,
                    ctx,
                    config,
                    &mut rng,
                    &mut report,
                )?);
            }
        }
        batch_order.shuffle(&mut rng);
        for batch in batch_order.chunks(config.batch_size) {
            let x = select_rows(anon, batch);
            let y = select_rows(orig, batch);
            let (loss, g) = objective(&model, &x, &y, anchors.as_ref(), Some(&mut drop_rng));
            if !loss.is_finite() {
                return Err(NspuError::TrainingDiverged(format!(
                    "projector loss non-finite at epoch {epoch}"
                )));
            }
            let gs: Vec<&[f64]> = vec![
                g.w1.as_slice().expect("contiguous"),
                g.b1.as_slice().expect("contiguous"),
                g.w2.as_slice().expect("contiguous"),
                g.b2.as_slice().expect("contiguous"),
                g.w3.as_slice().expect("contiguous"),
                g.b3.as_slice().expect("contiguous"),
            ];
            adam.step(model.slices_mut(), &gs, config.lr);
        }
        let v = mse(&model, eval_x, eval_y);
        if !v.is_finite() {
            return Err(NspuError::TrainingDiverged(format!(
                "projector validation loss non-finite at epoch {epoch}"
            )));
        }
        report.val_history.push(v);
    }
    Ok((model, report))
}

fn refresh_anchors(
    model: &ProjectorModel,
    anon: &Matrix,
    train_indices: &[usize],
    ctx: &InversionContext<'_>,
    config: &ProjectorConfig,
    rng: &mut ChaCha8Rng,
    report: &mut ProjectorReport,
) -> Result<Anchors> {
    let count = config.inv_batch.clamp(1, train_indices.len());
    let picks: Vec<usize> = sample(rng, train_indices.len(), count)
        .into_iter()
        .map(|i| train_indices[i])
        .collect();
    let x_anon = select_rows(anon, &picks);
    let h_est = model.forward(&x_anon)?;
    let mut phi_star = Array2::zeros((count, config.d_out));
    let (mut score_sum, mut loss_sum) = (0.0, 0.0);
    for (row, &i) in picks.iter().enumerate() {
        let x_orig = &ctx.x_orig[i];
        let target = h_est.row(row).to_owned();
        let inv = invert(
            ctx.map,
            &target,
            x_orig.dim(),
            InversionInit::Random {
                seed: rng.random(),
                scale: ctx.init_scale,
            },
            config.inv_steps,
            config.inv_lr,
        )?;
        let diff = &inv.x_star - x_orig;
        score_sum += diff.iter().map(|v| v * v).sum::<f64>();
        loss_sum += inv.final_loss();
        phi_star.row_mut(row).assign(&ctx.map.forward(&inv.x_star));
    }
    report.inv_scores.push(score_sum / count as f64);
    report.inv_losses.push(loss_sum / count as f64);
    Ok(Anchors { x_anon, phi_star })
}

/// Mean final inner-inversion loss when inverting `model`'s projections of
/// `anon` rows (deterministic per `seed`).
pub fn mean_inversion_loss(
    model: &ProjectorModel,
    anon: &Matrix,
    shapes: &[(usize, usize)],
    map: &dyn ActivationMap,
    steps: usize,
    lr: f64,
    init_scale: f64,
    seed: u64,
) -> Result<f64> {
    let h = model.forward(anon)?;
    let mut total = 0.0;
    for (i, &shape) in shapes.iter().enumerate() {
        let inv = invert(
            map,
            &h.row(i).to_owned(),
            shape,
            InversionInit::Random {
                seed: seed.wrapping_add(i as u64),
                scale: init_scale,
            },
            steps,
            lr,
        )?;
        total += inv.final_loss();
    }
    Ok(total / shapes.len().max(1) as f64)
}

/// Splits `m` into the listed rows, kept in order.
pub fn rows(m: &Matrix, idx: &[usize]) -> Matrix {
    select_rows(m, idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(d: usize) -> ProjectorConfig {
        ProjectorConfig {
            dropout: 0.0,
            ..ProjectorConfig::for_dim(d)
        }
    }

    #[test]
    fn forward_matches_hand_oracle() {
        let m = ProjectorModel::init(&small_cfg(3)).unwrap();
        let x = ndarray::array![[0.5, -1.0, 2.0], [0.1, 0.2, 0.3]];
        let out = m.forward(&x).unwrap();
        for r in 0..2 {
            let mut a1 = vec![0.0; 6];
            for j in 0..6 {
                let mut z = m.b1[j];
                for i in 0..3 {
                    z += x[[r, i]] * m.w1[[i, j]];
                }
                a1[j] = z.max(0.0);
            }
            let mut a2 = vec![0.0; 6];
            for j in 0..6 {
                let mut z = m.b2[j];
                for i in 0..6 {
                    z += a1[i] * m.w2[[i, j]];
                }
                a2[j] = z.max(0.0);
            }
            for j in 0..3 {
                let mut z = m.b3[j];
                for i in 0..6 {
                    z += a2[i] * m.w3[[i, j]];
                }
                assert!((z - out[[r, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = ProjectorModel::zeros(&small_cfg(4)).unwrap();
        let out = m.forward(&Array2::from_elem((1, 4), 3.0)).unwrap();
        assert_eq!(out.dim(), (1, 4));
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(m.forward(&Array2::zeros((1, 5))).is_err());
    }

    #[test]
    fn gradient_check_with_penalty() {
        let cfg = ProjectorConfig {
            lambda_inv: 0.3,
            seed: 4,
            ..small_cfg(8)
        };
        let model = ProjectorModel::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rand_m = |r, c| Array2::from_shape_fn((r, c), |_| rng.random::<f64>() - 0.5);
        let x = rand_m(6, 8);
        let y = rand_m(6, 8);
        let anchors = Anchors {
            x_anon: rand_m(3, 8),
            phi_star: rand_m(3, 8),
        };
        let (_, g) = objective(&model, &x, &y, Some(&anchors), None);
        let analytic: Vec<f64> = [
            g.w1.as_slice().unwrap(),
            g.b1.as_slice().unwrap(),
            g.w2.as_slice().unwrap(),
            g.b2.as_slice().unwrap(),
            g.w3.as_slice().unwrap(),
            g.b3.as_slice().unwrap(),
        ]
        .concat();
        let base = model.flat_params();
        for idx in (0..base.len()).step_by(7) {
            let h = 1e-6;
            let mut p = model.clone();
            p.set_flat_param(idx, base[idx] + h);
            let lp = objective(&p, &x, &y, Some(&anchors), None).0;
            p.set_flat_param(idx, base[idx] - h);
            let lm = objective(&p, &x, &y, Some(&anchors), None).0;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[idx];
            if a.abs() < 1e-9 && fd.abs() < 1e-9 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            assert!(rel < 1e-3, "idx {idx}: {a} vs {fd}");
        }
    }

    #[test]
    fn inversion_from_truth_scores_zero() {
        let m = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 + 1.0) * 0.1 + j as f64 * 0.2);
        let map = LinearMap { m };
        let x = ndarray::array![[0.3, -0.2, 0.9]];
        let h = map.forward(&x);
        let score = inversion_score(&map, &h, &x, 5, 0.1, InversionInit::At(x.clone())).unwrap();
        assert!(score < 1e-20);
        assert!(inversion_score(&map, &h, &x, 0, 0.1, InversionInit::At(x.clone())).is_err());
    }

    #[test]
    fn diverging_inversion_is_reported() {
        let map = LinearMap {
            m: Array2::from_elem((2, 2), 10.0),
        };
        let x = Array2::from_elem((1, 2), 1.0);
        let h = Array1::from_elem(2, -5.0);
        let r = inversion_score(&map, &h, &x, 500, 10.0, InversionInit::At(x.clone()));
        assert!(matches!(r, Err(NspuError::InversionDiverged(_))));
    }

    #[test]
    fn lambda_zero_is_deterministic() {
        let cfg = ProjectorConfig {
            lambda_inv: 0.0,
            epochs: 3,
            ..ProjectorConfig::for_dim(4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((30, 4), |_| rng.random::<f64>());
        let a = train_projector(&x, &x, &cfg).unwrap();
        let b = train_projector(&x, &x, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn container_round_trip() {
        let m = ProjectorModel::init(&small_cfg(3)).unwrap();
        let c = m.to_container().unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PROJ");
        let back =
            ProjectorModel::from_container(&Container::from_bytes(&bytes, MAGIC_PROJECTOR).unwrap())
                .unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn too_few_pairs_rejected() {
        let x = Array2::zeros((5, 4));
        assert!(train_projector(&x, &x, &small_cfg(4)).is_err());
        let y = Array2::zeros((20, 3));
        assert!(matches!(
            train_projector(&Array2::zeros((20, 4)), &y, &small_cfg(4)),
            Err(NspuError::Shape(_))
        ));
    }

    #[test]
    fn slicing_helper() {
        let m = ndarray::array![[1.0], [2.0], [3.0]];
        assert_eq!(rows(&m, &[2, 0]), ndarray::array![[3.0], [1.0]]);
    }
}
