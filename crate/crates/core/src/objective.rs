//! The full training objective: weighted cross-entropy, the balancing
//! regularizer, and the two weight penalties.
//!
//! ```text
//! L = (1/n) sum_i w_i CE_i + lambda1 * G + lambda2 * mean(W^2) + lambda3 * (mean(W) - 1)^2
//! ```
//!
//! Weights are parametrised as `W = omega^2` so they are non-negative by
//! construction.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::balance::{self, DEFAULT_EPS};
use crate::binarize::BinarizeMode;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams, ParamNodes};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eps: f64,
    pub binarize: BinarizeMode,
    /// Whether the regularizer's gradient reaches the representation (and so
    /// the extractor parameters). When false, `G` is evaluated on a detached
    /// copy of `Z` and only steers the sample weights.
    pub representation_grad: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 1e-4,
            lambda3: 0.1,
            eps: DEFAULT_EPS,
            binarize: BinarizeMode::default(),
            representation_grad: false,
        }
    }
}

impl ObjectiveConfig {
    /// Plain empirical risk: all extra terms switched off.
    pub fn erm() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("objective.lambda1", self.lambda1),
            ("objective.lambda2", self.lambda2),
            ("objective.lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("balance.eps must be positive, got {}", self.eps)));
        }
        if !(self.binarize.ste_clip > 0.0) {
            return Err(Error::Config(format!(
                "binarize.ste_clip must be positive, got {}",
                self.binarize.ste_clip
            )));
        }
        Ok(())
    }
}

/// `W = omega o omega` on the graph; `omega` is `n x 1`.
pub fn sample_weights(graph: &mut Graph, omega: NodeId) -> Result<NodeId> {
    graph.mul(omega, omega)
}

/// `W = omega^2` without a graph.
pub fn weights_from_omega(omega: &[f64]) -> Vec<f64> {
    omega.iter().map(|o| o * o).collect()
}

/// Node handles of the loss terms. Unweighted terms; `total` applies the
/// lambdas.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub wce: NodeId,
    pub g: NodeId,
    pub pen2: NodeId,
    pub pen3: NodeId,
    pub total: NodeId,
}

/// Values of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub wce: f64,
    pub g: f64,
    pub pen2: f64,
    pub pen3: f64,
    pub total: f64,
}

impl LossNodes {
    pub fn values(&self, graph: &Graph) -> LossParts {
        LossParts {
            wce: graph.value(self.wce).item(),
            g: graph.value(self.g).item(),
            pen2: graph.value(self.pen2).item(),
            pen3: graph.value(self.pen3).item(),
            total: graph.value(self.total).item(),
        }
    }
}

/// Records the objective on `graph`, with the indicator matrix produced by
/// `indicator` from the representation node it is handed.
///
/// `indicator` receives the representation (or its detached copy, see
/// [`ObjectiveConfig::representation_grad`]) and must return an `n x d`
/// node. Gradient checks substitute a smooth surrogate here.
pub fn total_loss_with<F>(
    graph: &mut Graph,
    params: &ParamNodes,
    omega: NodeId,
    x: NodeId,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    mut indicator: F,
) -> Result<LossNodes>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let n = graph.value(x).rows();
    if n == 0 || labels.len() != n {
        return Err(Error::Data(format!("batch has {n} rows and {} labels", labels.len())));
    }
    if graph.value(omega).shape() != [n, 1] {
        return Err(Error::Dimension {
            kernel: "total_loss",
            left: vec![n, 1],
            right: graph.value(omega).shape().to_vec(),
        });
    }
    let z = model::extract_features(graph, params, x)?;
    let logits = model::classify(graph, params, z)?;
    let w = sample_weights(graph, omega)?;
    let wce = model::weighted_ce(graph, logits, labels, w)?;

    let z_for_g = if cfg.representation_grad {
        z
    } else {
        graph.constant(graph.value(z).clone())
    };
    let b = indicator(graph, z_for_g)?;
    let g = balance::balance_loss(graph, z_for_g, b, w, cfg.eps)?;

    let w_sq = graph.square(w)?;
    let pen2 = graph.mean(w_sq)?;
    let one = graph.constant(Tensor::scalar(1.0));
    let w_mean = graph.mean(w)?;
    let dev = graph.sub(w_mean, one)?;
    let pen3 = graph.square(dev)?;

    // Terms with a zero coefficient are left out so the plain risk is
    // reproduced bit for bit.
    let mut total = wce;
    for (lambda, term) in [(cfg.lambda1, g), (cfg.lambda2, pen2), (cfg.lambda3, pen3)] {
        if lambda != 0.0 {
            let scaled = graph.scale(term, lambda)?;
            total = graph.add(total, scaled)?;
        }
    }
    Ok(LossNodes {
        wce,
        g,
        pen2,
        pen3,
        total,
    })
}

/// Records the objective with the configured binarizer.
pub fn total_loss<R: Rng + ?Sized>(
    graph: &mut Graph,
    params: &ParamNodes,
    omega: NodeId,
    x: NodeId,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossNodes> {
    let mode = cfg.binarize;
    total_loss_with(graph, params, omega, x, labels, cfg, |g, z| g.binarize(z, &mode, rng))
}

/// Loss terms for plain inputs, without gradients.
pub fn evaluate<R: Rng + ?Sized>(
    params: &ModelParams,
    omega: &[f64],
    x: &Tensor,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossParts> {
    let mut graph = Graph::new();
    let nodes = params.register(&mut graph, false);
    let om = graph.constant(Tensor::column(omega.to_vec()));
    let xn = graph.constant(x.clone());
    let loss = total_loss(&mut graph, &nodes, om, xn, labels, cfg, rng)?;
    Ok(loss.values(&graph))
}
