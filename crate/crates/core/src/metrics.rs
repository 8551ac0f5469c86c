//! Accuracy, input-gradient feature importance, rank correlation and
//! causal precision, plus the serialized report.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::objective::LossParts;
use crate::synthgen::Dataset;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy needs equal non-empty label vectors, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean over samples of `|d logit_{y_i} / d x_ij|` for each input column.
pub fn input_gradient_importance(params: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::Data("importance needs a non-empty dataset".into()));
    }
    if ds.width() != params.input_width() {
        return Err(Error::Dimension {
            kernel: "input_gradient_importance",
            left: ds.x.shape().to_vec(),
            right: vec![params.input_width()],
        });
    }
    let (n, p, k) = (ds.len(), ds.width(), params.num_classes());
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in ds.y.iter().enumerate() {
        if y >= k {
            return Err(Error::Data(format!("label {y} of sample {i} is outside [0, {k})")));
        }
        onehot[i * k + y] = 1.0;
    }
    let mut graph = Graph::new();
    let nodes = params.register(&mut graph, false);
    let x = graph.param(ds.x.clone());
    let z = model::extract_features(&mut graph, &nodes, x)?;
    let logits = model::classify(&mut graph, &nodes, z)?;
    let select = graph.constant(Tensor::matrix(n, k, onehot)?);
    let picked = graph.mul(logits, select)?;
    // Rows are independent, so the gradient of the summed true-class logits
    // with respect to row i is that row's own input gradient.
    let total = graph.sum(picked)?;
    let grad = graph.backward(total)?.take(x);
    let mut importance = vec![0.0; p];
    for row in grad.data().chunks(p) {
        for (acc, g) in importance.iter_mut().zip(row) {
            *acc += g.abs();
        }
    }
    for v in &mut importance {
        *v /= n as f64;
    }
    Ok(importance)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two vectors of equal length >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("a ranked vector is constant".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of the `k` most important features that are causal, where `k`
/// is the number of ones in `mask`. Ties go to the lower index.
pub fn causal_precision(importance: &[f64], mask: &[u8]) -> Result<f64> {
    if importance.len() != mask.len() {
        return Err(Error::Contract(format!(
            "importance has {} entries, mask {}",
            importance.len(),
            mask.len()
        )));
    }
    let k = mask.iter().filter(|&&m| m == 1).count();
    if k == 0 {
        return Err(Error::Contract("causal mask has no causal features".into()));
    }
    let mut order: Vec<usize> = (0..importance.len()).collect();
    // Stable sort keeps lower indices first among equal importances.
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]));
    let hits = order[..k].iter().filter(|&&i| mask[i] == 1).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub wce: f64,
    pub g: f64,
    pub pen2: f64,
    pub pen3: f64,
}

impl From<LossParts> for LossComponents {
    fn from(p: LossParts) -> Self {
        Self {
            wce: p.wce,
            g: p.g,
            pen2: p.pen2,
            pen3: p.pen3,
        }
    }
}

/// Serialized evaluation summary. Fields that do not apply to a run (for
/// example target accuracy of a source-only training run, or mask-based
/// scores for a dataset without a mask) are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source_accuracy: Option<f64>,
    pub target_accuracy: Option<f64>,
    pub final_loss_components: Option<LossComponents>,
    pub importance: Vec<f64>,
    pub spearman_vs_mask: Option<f64>,
    pub causal_precision: Option<f64>,
    pub seed: u64,
    /// Epoch-mean total loss.
    pub loss_history: Vec<f64>,
    pub mean_weight: Option<f64>,
    pub config: BTreeMap<String, String>,
}

/// Importance plus the mask-based scores for `ds`. Mask scores are `None`
/// when the dataset has no mask or the importance vector is constant.
pub fn mask_scores(params: &ModelParams, ds: &Dataset) -> Result<(Vec<f64>, Option<f64>, Option<f64>)> {
    let importance = input_gradient_importance(params, ds)?;
    let Some(mask) = &ds.causal_mask else {
        return Ok((importance, None, None));
    };
    let mask_f: Vec<f64> = mask.iter().map(|&m| f64::from(m)).collect();
    let rho = match spearman(&importance, &mask_f) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let precision = causal_precision(&importance, mask)?;
    Ok((importance, rho, Some(precision)))
}
