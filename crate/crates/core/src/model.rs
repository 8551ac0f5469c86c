//! Fully connected feature extractor and linear classifier.
//!
//! The extractor maps `p` inputs to a `d`-dimensional representation with
//! relu between layers; the final extractor layer is linear so the
//! representation keeps its sign (the binarizer splits at zero). The
//! classifier is a single linear layer producing `K` logits.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub repr_width: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 32],
            repr_width: 8,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Layer widths from input to representation.
    pub fn extractor_widths(&self, input_width: usize) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(input_width);
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.repr_width);
        widths
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`
    pub weight: Tensor,
    /// `fan_out`
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("shape matches"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
}

/// Graph handles for one registration of [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    extractor: Vec<(NodeId, NodeId)>,
    classifier: (NodeId, NodeId),
}

impl ParamNodes {
    /// Handles in [`ModelParams::tensors`] order.
    pub fn all(&self) -> Vec<NodeId> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.classifier))
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl ModelParams {
    /// He-style Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases.
    /// `widths` runs from input width to representation width.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], num_classes: usize, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) || num_classes < 2 {
            return Err(Error::Config(format!(
                "invalid model widths {widths:?} with {num_classes} classes"
            )));
        }
        let extractor = widths.windows(2).map(|p| Linear::init(p[0], p[1], rng)).collect();
        let classifier = Linear::init(widths[widths.len() - 1], num_classes, rng);
        Ok(Self { extractor, classifier })
    }

    pub fn input_width(&self) -> usize {
        self.extractor[0].fan_in()
    }

    pub fn repr_width(&self) -> usize {
        self.classifier.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    /// Named parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.extractor.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &layer.weight));
            out.push((format!("extractor.{i}.bias"), &layer.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.extractor {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Adds every tensor to `graph`. Biases enter as `1 x fan_out` rows.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> ParamNodes {
        let mut add = |layer: &Linear| {
            let bias = Tensor::matrix(1, layer.fan_out(), layer.bias.data().to_vec()).expect("bias row");
            if trainable {
                (graph.param(layer.weight.clone()), graph.param(bias))
            } else {
                (graph.constant(layer.weight.clone()), graph.constant(bias))
            }
        };
        let extractor = self.extractor.iter().map(&mut add).collect();
        let classifier = add(&self.classifier);
        ParamNodes { extractor, classifier }
    }
}

fn affine(graph: &mut Graph, x: NodeId, (w, b): (NodeId, NodeId)) -> Result<NodeId> {
    let n = graph.value(x).rows();
    let xw = graph.matmul(x, w)?;
    let ones = graph.constant(Tensor::ones(vec![n, 1]));
    let bias = graph.matmul(ones, b)?;
    graph.add(xw, bias)
}

/// `Z = h(X)`: `n x p` inputs to `n x d` representations.
pub fn extract_features(graph: &mut Graph, params: &ParamNodes, x: NodeId) -> Result<NodeId> {
    let expected = graph.value(params.extractor[0].0).rows();
    let xs = graph.value(x).shape().to_vec();
    if xs.len() != 2 || xs[1] != expected {
        return Err(Error::Dimension {
            kernel: "extract_features",
            left: xs,
            right: vec![expected],
        });
    }
    let last = params.extractor.len() - 1;
    let mut h = x;
    for (i, &layer) in params.extractor.iter().enumerate() {
        h = affine(graph, h, layer)?;
        if i < last {
            h = graph.relu(h)?;
        }
    }
    Ok(h)
}

/// `n x d` representations to `n x K` logits.
pub fn classify(graph: &mut Graph, params: &ParamNodes, z: NodeId) -> Result<NodeId> {
    let expected = graph.value(params.classifier.0).rows();
    let zs = graph.value(z).shape().to_vec();
    if zs.len() != 2 || zs[1] != expected {
        return Err(Error::Dimension {
            kernel: "classify",
            left: zs,
            right: vec![expected],
        });
    }
    affine(graph, z, params.classifier)
}

/// `(1/n) sum_i w_i * CE(softmax(logits_i), y_i)`; `w` is `n x 1`.
pub fn weighted_ce(graph: &mut Graph, logits: NodeId, labels: &[usize], w: NodeId) -> Result<NodeId> {
    let n = graph.value(logits).rows();
    let ce = graph.softmax_cross_entropy(logits, labels)?;
    let weighted = graph.mul(ce, w)?;
    let total = graph.sum(weighted)?;
    graph.scale(total, 1.0 / n as f64)
}

/// Unweighted empirical risk `(1/n) sum_i CE(softmax(logits_i), y_i)`.
pub fn empirical_risk(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let n = graph.value(logits).rows();
    let ce = graph.softmax_cross_entropy(logits, labels)?;
    let total = graph.sum(ce)?;
    graph.scale(total, 1.0 / n as f64)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.cols();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Logits for `x` without recording gradients.
pub fn forward_logits(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut graph = Graph::new();
    let nodes = params.register(&mut graph, false);
    let xn = graph.constant(x.clone());
    let z = extract_features(&mut graph, &nodes, xn)?;
    let logits = classify(&mut graph, &nodes, z)?;
    Ok(graph.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn zero_params(widths: &[usize], k: usize) -> ModelParams {
        let mut p = ModelParams::init(widths, k, &mut rng()).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let p = ModelParams::init(&[4, 6, 3], 2, &mut rng()).unwrap();
        let mut g = Graph::new();
        let nodes = p.register(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![5, 4]));
        let z = extract_features(&mut g, &nodes, x).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_non_negative_input() {
        let mut p = zero_params(&[3, 3], 2);
        for i in 0..3 {
            p.extractor[0].weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::matrix(2, 3, vec![0.5, 1.0, 2.0, 0.0, 3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let nodes = p.register(&mut g, false);
        let xn = g.constant(x.clone());
        let z = extract_features(&mut g, &nodes, xn).unwrap();
        assert_eq!(g.value(z), &x);
    }

    #[test]
    fn shapes_chain() {
        let p = ModelParams::init(&[4, 6, 3], 2, &mut rng()).unwrap();
        let shapes: Vec<Vec<usize>> = p.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![4, 6], vec![6], vec![6, 3], vec![3], vec![3, 2], vec![2]]);

        let x = Tensor::matrix(8, 4, (0..32).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let nodes = p.register(&mut g, true);
        let xn = g.constant(x);
        let z = extract_features(&mut g, &nodes, xn).unwrap();
        assert_eq!(g.value(z).shape(), &[8, 3]);
        assert!(g.value(z).is_finite());
        let logits = classify(&mut g, &nodes, z).unwrap();
        assert_eq!(g.value(logits).shape(), &[8, 2]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = ModelParams::init(&[4, 6, 3], 2, &mut rng()).unwrap();
        let mut g = Graph::new();
        let nodes = p.register(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![2, 5]));
        assert!(matches!(
            extract_features(&mut g, &nodes, x),
            Err(Error::Dimension { kernel: "extract_features", .. })
        ));
        let z = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(classify(&mut g, &nodes, z), Err(Error::Dimension { kernel: "classify", .. })));
    }

    #[test]
    fn zero_classifier_gives_uniform_softmax() {
        let p = zero_params(&[2, 3], 4);
        let logits = forward_logits(&p, &Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        assert_eq!(logits.data(), &[0.0; 4]);
        let mut g = Graph::new();
        let l = g.constant(logits);
        let ce = empirical_risk(&mut g, l, &[1]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn argmax_and_ties() {
        let logits = Tensor::matrix(3, 3, vec![2.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 9.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 0, 2]);
    }

    #[test]
    fn weighted_ce_examples() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let w = g.constant(Tensor::column(vec![1.0]));
        let l = weighted_ce(&mut g, logits, &[0], w).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 2, vec![1.0, -3.0, 0.5, 2.0]).unwrap());
        let w = g.constant(Tensor::column(vec![0.0, 0.0]));
        let l = weighted_ce(&mut g, logits, &[0, 0], w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_weights_equal_empirical_risk_bitwise() {
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).cos() * 3.0).collect();
        let labels = [0, 1, 2, 1];
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(4, 3, data).unwrap());
        let w = g.constant(Tensor::column(vec![1.0; 4]));
        let a = weighted_ce(&mut g, logits, &labels, w).unwrap();
        let b = empirical_risk(&mut g, logits, &labels).unwrap();
        assert_eq!(g.value(a).item().to_bits(), g.value(b).item().to_bits());
    }

    #[test]
    fn out_of_range_label_names_sample() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let w = g.constant(Tensor::column(vec![1.0, 1.0]));
        let err = weighted_ce(&mut g, logits, &[0, 5], w).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("sample 1")), "{err}");
    }

    #[test]
    fn logit_shift_invariance() {
        let base = vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.5];
        let shifted: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + if i < 3 { 7.5 } else { -3.25 }).collect();
        let eval = |data: Vec<f64>| {
            let mut g = Graph::new();
            let l = g.constant(Tensor::matrix(2, 3, data).unwrap());
            let ce = empirical_risk(&mut g, l, &[2, 1]).unwrap();
            g.value(ce).item()
        };
        assert!((eval(base) - eval(shifted)).abs() <= 1e-10);
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::matrix(2, 3, vec![0.2, -0.4, 1.1, 2.0, 0.0, -1.0]).unwrap();
        let labels = [2, 0];
        let w = [0.5, 2.0];
        let mut g = Graph::new();
        let l = g.param(logits.clone());
        let wn = g.constant(Tensor::column(w.to_vec()));
        let loss = weighted_ce(&mut g, l, &labels, wn).unwrap();
        let grad = g.backward(loss).unwrap().get(l);
        for i in 0..2 {
            let row = &logits.data()[i * 3..i * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (j, r) in row.iter().enumerate() {
                let p = r.exp() / z;
                let t = if j == labels[i] { 1.0 } else { 0.0 };
                let expected = (p - t) * w[i] / 2.0;
                assert!((grad.data()[i * 3 + j] - expected).abs() < 1e-12);
            }
        }
    }
}
