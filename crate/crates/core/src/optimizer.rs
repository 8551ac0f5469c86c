//! Alternating mini-batch SGD over the model parameters and the sample
//! weights.
//!
//! Each iteration takes one mini-batch, steps the model parameters with the
//! weights held fixed, then steps the weights (through `omega`) with the
//! model held fixed. Weights live in one global vector indexed by sample.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::objective::{self, LossParts, ObjectiveConfig};
use crate::synthgen::Dataset;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlternatePer {
    /// One parameter step then one weight step per mini-batch.
    Batch,
    /// A full epoch of parameter steps, then a full epoch of weight steps
    /// over the same batches.
    Epoch,
}

impl std::str::FromStr for AlternatePer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "epoch" => Ok(Self::Epoch),
            other => Err(Error::Config(format!(
                "train.alternate_per must be `batch` or `epoch`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for AlternatePer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Epoch => "epoch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    pub lr_omega: f64,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    pub convergence_tol: f64,
    /// Iteration cap; `None` means `epochs` full passes over the data.
    pub max_iterations: Option<usize>,
    pub alternate_per: AlternatePer,
    /// Keep `omega` at its initial value (uniform unit weights).
    pub freeze_weights: bool,
    /// Rescale each block's gradient to at most this Euclidean norm; zero
    /// disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr_theta: 0.05,
            lr_omega: 0.05,
            seed: 0,
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
            convergence_tol: 1e-6,
            max_iterations: None,
            alternate_per: AlternatePer::Batch,
            freeze_weights: false,
            grad_clip: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("train.max_iterations must be positive".into()));
        }
        for (name, v) in [("train.lr_theta", self.lr_theta), ("train.lr_omega", self.lr_omega)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("train.convergence_tol must be non-negative".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("train.grad_clip must be non-negative".into()));
        }
        if self.model.repr_width == 0 || self.model.num_classes < 2 || self.model.hidden_widths.contains(&0) {
            return Err(Error::Config("model widths must be positive and num_classes >= 2".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: ModelParams,
    /// One entry per source sample; weights are `omega^2`.
    pub omega: Vec<f64>,
    pub seed: u64,
}

impl ModelState {
    pub fn weights(&self) -> Vec<f64> {
        objective::weights_from_omega(&self.omega)
    }

    pub fn mean_weight(&self) -> f64 {
        let w = self.weights();
        w.iter().sum::<f64>() / w.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub parts: LossParts,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
    /// Mean total loss of each completed epoch.
    pub epoch_means: Vec<f64>,
    pub converged: bool,
}

impl TrainHistory {
    /// `iteration,wce,g,pen2,pen3,total` with 17 significant digits,
    /// preceded by `preamble` lines written as `#` comments.
    pub fn to_csv(&self, preamble: &[String]) -> String {
        let mut out = String::new();
        for line in preamble {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("iteration,wce,g,pen2,pen3,total\n");
        for r in &self.records {
            let p = r.parts;
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.iteration, p.wce, p.g, p.pen2, p.pen3, p.total
            );
        }
        out
    }

    pub fn last(&self) -> Option<LossParts> {
        self.records.last().map(|r| r.parts)
    }
}

/// Fresh state: He-initialised parameters and unit weights. Returns the run
/// generator positioned after the parameter draws.
pub fn init_state(cfg: &TrainConfig, input_width: usize, n_samples: usize) -> Result<(ModelState, ChaCha8Rng)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let widths = cfg.model.extractor_widths(input_width);
    let params = ModelParams::init(&widths, cfg.model.num_classes, &mut rng)?;
    Ok((
        ModelState {
            params,
            omega: vec![1.0; n_samples],
            seed: cfg.seed,
        },
        rng,
    ))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

fn divergence(cfg: &TrainConfig, iteration: usize) -> Error {
    Error::Divergence {
        iteration,
        lr_theta: cfg.lr_theta,
        lr_omega: cfg.lr_omega,
    }
}

/// Turns a non-finite evaluation into a divergence error.
fn guard<T>(r: Result<T>, cfg: &TrainConfig, iteration: usize) -> Result<T> {
    match r {
        Err(Error::Evaluation(_)) => Err(divergence(cfg, iteration)),
        other => other,
    }
}

/// One gradient step on the model parameters with `omega` fixed. Returns the
/// loss before the step.
pub fn theta_step(
    state: &mut ModelState,
    x: &Tensor,
    labels: &[usize],
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let mut graph = Graph::new();
    let nodes = state.params.register(&mut graph, true);
    let om = graph.constant(Tensor::column(idx.iter().map(|&i| state.omega[i]).collect()));
    let xn = graph.constant(x.clone());
    let loss = objective::total_loss(&mut graph, &nodes, om, xn, labels, &cfg.objective, rng)?;
    let parts = loss.values(&graph);
    let mut grads = graph.backward(loss.total)?;
    let mut g: Vec<Tensor> = nodes.all().into_iter().map(|id| grads.take(id)).collect();
    clip(&mut g, cfg.grad_clip);
    for (p, g) in state.params.tensors_mut().into_iter().zip(&g) {
        for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
            *v -= cfg.lr_theta * d;
        }
    }
    Ok(parts)
}

/// One gradient step on the batch entries of `omega` with the model fixed.
/// Returns the loss before the step.
pub fn omega_step(
    state: &mut ModelState,
    x: &Tensor,
    labels: &[usize],
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let mut graph = Graph::new();
    let nodes = state.params.register(&mut graph, false);
    let om = graph.param(Tensor::column(idx.iter().map(|&i| state.omega[i]).collect()));
    let xn = graph.constant(x.clone());
    let loss = objective::total_loss(&mut graph, &nodes, om, xn, labels, &cfg.objective, rng)?;
    let parts = loss.values(&graph);
    let mut g = [graph.backward(loss.total)?.take(om)];
    clip(&mut g, cfg.grad_clip);
    for (&i, d) in idx.iter().zip(g[0].data()) {
        state.omega[i] -= cfg.lr_omega * d;
    }
    Ok(parts)
}

/// Loss of the current state on one batch, without gradients.
fn batch_loss(state: &ModelState, x: &Tensor, labels: &[usize], idx: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<LossParts> {
    let omega: Vec<f64> = idx.iter().map(|&i| state.omega[i]).collect();
    objective::evaluate(&state.params, &omega, x, labels, &cfg.objective, rng)
}

fn check_parts(parts: &LossParts, cfg: &TrainConfig, iteration: usize) -> Result<()> {
    let finite = [parts.wce, parts.g, parts.pen2, parts.pen3, parts.total]
        .iter()
        .all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(divergence(cfg, iteration))
    }
}

/// Trains on `source` (labels only from the source domain).
///
/// Each iteration records the loss of the updated state on its batch. The
/// run stops when the iteration cap is reached or when the epoch-mean total
/// loss changes by less than `convergence_tol` between consecutive epochs.
pub fn train(cfg: &TrainConfig, source: &Dataset) -> Result<(ModelState, TrainHistory)> {
    cfg.validate()?;
    let n = source.len();
    if n == 0 {
        return Err(Error::Data("source dataset is empty".into()));
    }
    if cfg.batch_size > n {
        return Err(Error::Config(format!(
            "train.batch_size {} exceeds the {n} source samples",
            cfg.batch_size
        )));
    }
    let (mut state, mut rng) = init_state(cfg, source.width(), n)?;
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let cap = cfg.max_iterations.unwrap_or(cfg.epochs * batches_per_epoch);
    let train_weights = !cfg.freeze_weights;

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut iteration = 0;
    'epochs: while iteration < cap {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_count = 0;
        let mut visited = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            if iteration == cap {
                break;
            }
            let (x, labels) = source.gather(idx);
            guard(theta_step(&mut state, &x, &labels, idx, cfg, &mut rng), cfg, iteration)?;
            if !state.params.is_finite() {
                return Err(divergence(cfg, iteration));
            }
            let parts = if train_weights && cfg.alternate_per == AlternatePer::Batch {
                guard(omega_step(&mut state, &x, &labels, idx, cfg, &mut rng), cfg, iteration)?;
                if state.omega.iter().any(|v| !v.is_finite()) {
                    return Err(divergence(cfg, iteration));
                }
                guard(batch_loss(&state, &x, &labels, idx, cfg, &mut rng), cfg, iteration)?
            } else {
                if train_weights {
                    visited.push((x.clone(), labels.clone(), idx.to_vec()));
                }
                guard(batch_loss(&state, &x, &labels, idx, cfg, &mut rng), cfg, iteration)?
            };
            check_parts(&parts, cfg, iteration)?;
            history.records.push(HistoryRecord { iteration, parts });
            epoch_total += parts.total;
            epoch_count += 1;
            iteration += 1;
        }
        if train_weights && cfg.alternate_per == AlternatePer::Epoch {
            for (x, labels, idx) in &visited {
                guard(omega_step(&mut state, x, labels, idx, cfg, &mut rng), cfg, iteration)?;
                if state.omega.iter().any(|v| !v.is_finite()) {
                    return Err(divergence(cfg, iteration));
                }
            }
        }
        if epoch_count == 0 {
            break;
        }
        let mean = epoch_total / epoch_count as f64;
        if let Some(&prev) = history.epoch_means.last() {
            if (mean - prev).abs() < cfg.convergence_tol {
                history.epoch_means.push(mean);
                history.converged = true;
                break 'epochs;
            }
        }
        history.epoch_means.push(mean);
    }
    Ok((state, history))
}

/// Predicted class per row; ties go to the lowest class index.
pub fn predict(state: &ModelState, x: &Tensor) -> Result<Vec<usize>> {
    if x.shape().len() != 2 || x.cols() != state.params.input_width() {
        return Err(Error::Dimension {
            kernel: "predict",
            left: x.shape().to_vec(),
            right: vec![state.params.input_width()],
        });
    }
    Ok(model::argmax_rows(&model::forward_logits(&state.params, x)?))
}
