//! Finite-difference verification of every differentiable component.
//!
//! Each component is checked on a number of seeded random instances by
//! comparing the reverse-mode gradient of a random projection `sum(R o f(x))`
//! against central differences. The binarizer has no useful derivative, so
//! anything downstream of it is compared against differences of a smooth
//! surrogate `b0 + m o (z - z0)`, where `m` is the straight-through window at
//! the base point: it has the same value and the same derivative the
//! straight-through rule assigns there.
//!
//! The regularizer oracle is the loop implementation
//! [`balance::balance_loss_reference`], not the graph route under test.

use crate::autodiff::{finite_diff, max_relative_error, Graph, NodeId, Tensor};
use crate::balance;
use crate::binarize::{self, BinarizeMode};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::objective::{self, ObjectiveConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Component whose analytic gradient is deliberately perturbed.
    pub inject_fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            tolerance: 1e-4,
            floor: 1e-6,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.components.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            out.push_str(&format!(
                "{:<28} max_rel_error = {:.3e}  {}\n",
                c.name,
                c.max_rel_error,
                if c.passed { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Names in report order.
pub const COMPONENTS: [&str; 18] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "sum",
    "square",
    "scale",
    "column_select",
    "column_concat",
    "softmax_cross_entropy",
    "transpose",
    "binarize_ste",
    "balance_wrt_weights",
    "balance_wrt_representation",
    "total_loss_theta",
    "total_loss_omega",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Entries with magnitude in `[lo, hi]` and random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Random-projection loss `sum(R o out)`.
fn project(graph: &mut Graph, out: NodeId, r: &Tensor) -> Result<NodeId> {
    let rn = graph.constant(r.clone());
    let prod = graph.mul(out, rn)?;
    graph.sum(prod)
}

type Builder = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>;

/// Gradient of `sum(R o build(inputs))` by both routes, concatenated over
/// inputs. `numeric_build` may differ from `build` (surrogates).
fn kernel_gradients(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    build: &Builder,
    numeric_build: &Builder,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).shape().to_vec()
    };
    let r = uniform(rng, &out_shape, -1.0, 1.0);

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let loss = project(&mut g, out, &r)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| grads.get(id).into_data()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..inputs.len() {
        let est = finite_diff(
            |probe| {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let out = numeric_build(&mut g, &ids)?;
                let loss = project(&mut g, out, &r)?;
                Ok(g.value(loss).item())
            },
            &inputs[k],
            STEP,
        )?;
        numeric.extend(est.into_data());
    }
    Ok((analytic, numeric))
}

fn binary(f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>) -> Box<Builder> {
    Box::new(move |g, x| f(g, x[0], x[1]))
}

fn unary(f: fn(&mut Graph, NodeId) -> Result<NodeId>) -> Box<Builder> {
    Box::new(move |g, x| f(g, x[0]))
}

/// One instance of a plain kernel check.
fn kernel_instance(name: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let (inputs, build): (Vec<Tensor>, Box<Builder>) = match name {
        "matmul" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)],
            binary(Graph::matmul),
        ),
        "add" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            binary(Graph::add),
        ),
        "sub" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[1], -1.0, 1.0)],
            binary(Graph::sub),
        ),
        "mul" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            binary(Graph::mul),
        ),
        "div" => (
            vec![uniform(rng, &[3, 4], -1.0, 1.0), away_from_zero(rng, &[3, 4], 0.5, 2.0)],
            binary(Graph::div),
        ),
        "relu" => (vec![away_from_zero(rng, &[3, 4], 1e-3, 2.0)], unary(Graph::relu)),
        "sum" => (vec![uniform(rng, &[3, 4], -1.0, 1.0)], unary(Graph::sum)),
        "square" => (vec![uniform(rng, &[3, 4], -2.0, 2.0)], unary(Graph::square)),
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            (vec![uniform(rng, &[3, 4], -1.0, 1.0)], Box::new(move |g: &mut Graph, x: &[NodeId]| g.scale(x[0], c)))
        }
        "column_select" => {
            let col = rng.random_range(0..4);
            (
                vec![uniform(rng, &[3, 4], -1.0, 1.0)],
                Box::new(move |g: &mut Graph, x: &[NodeId]| g.column_select(x[0], col)),
            )
        }
        "column_concat" => (
            vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[3, 3], -1.0, 1.0)],
            Box::new(|g: &mut Graph, x: &[NodeId]| g.column_concat(x)),
        ),
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            (
                vec![uniform(rng, &[4, 3], -3.0, 3.0)],
                Box::new(move |g: &mut Graph, x: &[NodeId]| g.softmax_cross_entropy(x[0], &labels)),
            )
        }
        "transpose" => (vec![uniform(rng, &[3, 4], -1.0, 1.0)], unary(Graph::transpose)),
        "binarize_ste" => {
            let z0 = uniform(rng, &[3, 4], -2.0, 2.0);
            let mode = BinarizeMode::default();
            let b0 = binarize::binarize_deterministic(&z0)?;
            let window = window(&z0, &mode);
            let analytic: Box<Builder> = Box::new(move |g: &mut Graph, x: &[NodeId]| {
                g.binarize(x[0], &mode, &mut ChaCha8Rng::seed_from_u64(0))
            });
            let (z_base, b_base) = (z0.clone(), b0);
            let surrogate: Box<Builder> =
                Box::new(move |g: &mut Graph, x: &[NodeId]| linearized(g, x[0], &z_base, &b_base, &window));
            return kernel_gradients(rng, &[z0], analytic.as_ref(), surrogate.as_ref());
        }
        other => return Err(Error::Contract(format!("unknown gradcheck component `{other}`"))),
    };
    kernel_gradients(rng, &inputs, build.as_ref(), build.as_ref())
}

/// Straight-through window: 1 where `|z| <= ste_clip`.
fn window(z: &Tensor, mode: &BinarizeMode) -> Tensor {
    let ones = Tensor::filled(z.shape().to_vec(), 1.0);
    binarize::ste_backward(&ones, z, mode).expect("same shape")
}

/// `b0 + m o (z - z0)` on the graph.
fn linearized(g: &mut Graph, z: NodeId, z0: &Tensor, b0: &Tensor, m: &Tensor) -> Result<NodeId> {
    let z0n = g.constant(z0.clone());
    let b0n = g.constant(b0.clone());
    let mn = g.constant(m.clone());
    let dz = g.sub(z, z0n)?;
    let dz = g.mul(dz, mn)?;
    g.add(b0n, dz)
}

/// Plain version of [`linearized`] for the loop oracle.
fn linearized_plain(z: &Tensor, z0: &Tensor, b0: &Tensor, m: &Tensor) -> Tensor {
    let data = z
        .data()
        .iter()
        .zip(z0.data())
        .zip(b0.data().iter().zip(m.data()))
        .map(|((z, z0), (b0, m))| b0 + m * (z - z0))
        .collect();
    Tensor::new(z.shape().to_vec(), data).expect("shape")
}

/// Representation whose every column has at least two treated and two
/// control rows, so no group rests on the eps guard.
fn balanced_representation(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    loop {
        let z = uniform(rng, &[n, d], -2.0, 2.0);
        if well_split(&z) {
            return z;
        }
    }
}

fn well_split(z: &Tensor) -> bool {
    (0..z.cols()).all(|j| {
        let treated = (0..z.rows()).filter(|&r| z.at(r, j) >= 0.0).count();
        treated >= 2 && z.rows() - treated >= 2
    })
}

fn balance_instance(wrt_representation: bool, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (8, 3);
    let z0 = balanced_representation(rng, n, d);
    let w0 = uniform(rng, &[n, 1], 0.2, 2.0);
    let eps = balance::DEFAULT_EPS;
    let mode = BinarizeMode::default();
    let b0 = binarize::binarize_deterministic(&z0)?;

    let mut g = Graph::new();
    let (zn, wn) = if wrt_representation {
        (g.param(z0.clone()), g.constant(w0.clone()))
    } else {
        (g.constant(z0.clone()), g.param(w0.clone()))
    };
    let bn = g.binarize(zn, &mode, &mut ChaCha8Rng::seed_from_u64(0))?;
    let loss = balance::balance_loss(&mut g, zn, bn, wn, eps)?;
    let grads = g.backward(loss)?;

    if wrt_representation {
        let m = window(&z0, &mode);
        let numeric = finite_diff(
            |z| balance::balance_loss_reference(z, &linearized_plain(z, &z0, &b0, &m), w0.data(), eps),
            &z0,
            STEP,
        )?;
        Ok((grads.get(zn).into_data(), numeric.into_data()))
    } else {
        let numeric = finite_diff(|w| balance::balance_loss_reference(&z0, &b0, w.data(), eps), &w0, STEP)?;
        Ok((grads.get(wn).into_data(), numeric.into_data()))
    }
}

fn flatten(params: &ModelParams) -> Tensor {
    Tensor::vector(params.tensors().iter().flat_map(|(_, t)| t.data().to_vec()).collect())
}

fn unflatten(template: &ModelParams, flat: &Tensor) -> ModelParams {
    let mut out = template.clone();
    let mut offset = 0;
    for t in out.tensors_mut() {
        let len = t.len();
        t.data_mut().copy_from_slice(&flat.data()[offset..offset + len]);
        offset += len;
    }
    out
}

fn total_loss_instance(wrt_theta: bool, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, p, k) = (8, 2, 2);
    let cfg = ObjectiveConfig {
        lambda1: rng.random_range(0.1..1.0),
        lambda2: rng.random_range(0.01..0.5),
        lambda3: rng.random_range(0.1..1.0),
        representation_grad: true,
        ..ObjectiveConfig::default()
    };
    let x = uniform(rng, &[n, p], -1.5, 1.5);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let omega0 = uniform(rng, &[n, 1], 0.5, 1.5);
    // Draw parameters until every representation column splits the batch.
    let (params, z0) = loop {
        let params = ModelParams::init(&[p, 5, 3], k, rng)?;
        let mut g = Graph::new();
        let nodes = params.register(&mut g, false);
        let xn = g.constant(x.clone());
        let z = crate::model::extract_features(&mut g, &nodes, xn)?;
        let z = g.value(z).clone();
        if well_split(&z) {
            break (params, z);
        }
    };
    let b0 = binarize::binarize_deterministic(&z0)?;
    let m = window(&z0, &cfg.binarize);

    let mut g = Graph::new();
    let nodes = params.register(&mut g, wrt_theta);
    let om = if wrt_theta {
        g.constant(omega0.clone())
    } else {
        g.param(omega0.clone())
    };
    let xn = g.constant(x.clone());
    let loss = objective::total_loss(&mut g, &nodes, om, xn, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let grads = g.backward(loss.total)?;

    let eval = |params: &ModelParams, omega: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let nodes = params.register(&mut g, false);
        let om = g.constant(omega.clone());
        let xn = g.constant(x.clone());
        let loss = objective::total_loss_with(&mut g, &nodes, om, xn, &labels, &cfg, |g, z| {
            linearized(g, z, &z0, &b0, &m)
        })?;
        Ok(g.value(loss.total).item())
    };

    if wrt_theta {
        let analytic: Vec<f64> = nodes.all().into_iter().flat_map(|id| grads.get(id).into_data()).collect();
        let numeric = finite_diff(|flat| eval(&unflatten(&params, flat), &omega0), &flatten(&params), STEP)?;
        Ok((analytic, numeric.into_data()))
    } else {
        let numeric = finite_diff(|om| eval(&params, om), &omega0, STEP)?;
        Ok((grads.get(om).into_data(), numeric.into_data()))
    }
}

fn instance(name: &str, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    match name {
        "balance_wrt_weights" => balance_instance(false, rng),
        "balance_wrt_representation" => balance_instance(true, rng),
        "total_loss_theta" => total_loss_instance(true, rng),
        "total_loss_omega" => total_loss_instance(false, rng),
        kernel => kernel_instance(kernel, rng),
    }
}

/// Runs the full suite.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.instances == 0 {
        return Err(Error::Config("gradcheck.instances must be positive".into()));
    }
    if let Some(fault) = &opts.inject_fault {
        if !COMPONENTS.contains(&fault.as_str()) {
            return Err(Error::Config(format!("gradcheck.inject_fault names unknown component `{fault}`")));
        }
    }
    let mut components = Vec::with_capacity(COMPONENTS.len());
    for (ci, &name) in COMPONENTS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..opts.instances {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
            rng.set_stream(ci as u64);
            let (mut analytic, numeric) = instance(name, &mut rng)?;
            if opts.inject_fault.as_deref() == Some(name) {
                analytic[0] += 1e-2 * analytic[0].abs().max(1.0);
            }
            worst = worst.max(max_relative_error(&analytic, &numeric, opts.floor));
        }
        components.push(ComponentResult {
            name,
            max_rel_error: worst,
            passed: worst <= opts.tolerance,
        });
    }
    Ok(GradcheckReport { components })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_a_few_instances() {
        let report = run(&GradcheckOptions {
            instances: 3,
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.components.len() >= 14);
    }

    #[test]
    fn injected_fault_is_named() {
        let report = run(&GradcheckOptions {
            instances: 1,
            inject_fault: Some("div".into()),
            ..GradcheckOptions::default()
        })
        .unwrap();
        assert_eq!(report.failures(), vec!["div"]);
    }

    #[test]
    fn unknown_fault_is_config_error() {
        let opts = GradcheckOptions {
            inject_fault: Some("nope".into()),
            ..GradcheckOptions::default()
        };
        assert!(matches!(run(&opts), Err(Error::Config(_))));
    }

    #[test]
    fn flatten_round_trip() {
        let params = ModelParams::init(&[2, 3, 2], 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(unflatten(&params, &flatten(&params)), params);
    }
}
