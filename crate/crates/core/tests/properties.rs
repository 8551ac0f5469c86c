//! Cross-module properties checked against independent oracles.

use causal_reweight::autodiff::{finite_diff, max_relative_error, Graph, Tensor};
use causal_reweight::metrics::input_gradient_importance;
use causal_reweight::model::{self, ModelConfig, ModelParams};
use causal_reweight::objective::{self, ObjectiveConfig};
use causal_reweight::optimizer::{init_state, omega_step, theta_step, TrainConfig};
use causal_reweight::synthgen::{generate, Dataset, Domain, Matrix, ScmConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_problem(seed: u64) -> Dataset {
    generate(&ScmConfig::default(), Domain::Source, 8, seed).unwrap()
}

fn tiny_cfg(seed: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr_theta: lr,
        lr_omega: lr,
        seed,
        model: ModelConfig {
            hidden_widths: vec![8, 6],
            repr_width: 4,
            num_classes: 2,
        },
        ..TrainConfig::default()
    }
}

fn full_batch_loss(params: &ModelParams, omega: &[f64], ds: &Dataset, cfg: &ObjectiveConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    objective::evaluate(params, omega, &ds.x, &ds.y, cfg, &mut rng).unwrap().total
}

#[test]
fn small_alternating_steps_do_not_increase_the_loss() {
    let idx: Vec<usize> = (0..8).collect();
    let mut increases = Vec::new();
    for trial in 0..50 {
        let ds = tiny_problem(trial);
        let cfg = tiny_cfg(trial, 1e-3);
        let (mut state, mut rng) = init_state(&cfg, ds.width(), ds.len()).unwrap();
        // Start from non-uniform weights so every term is active.
        for (i, w) in state.omega.iter_mut().enumerate() {
            *w = 0.8 + 0.05 * i as f64;
        }
        let before = full_batch_loss(&state.params, &state.omega, &ds, &cfg.objective);
        theta_step(&mut state, &ds.x, &ds.y, &idx, &cfg, &mut rng).unwrap();
        omega_step(&mut state, &ds.x, &ds.y, &idx, &cfg, &mut rng).unwrap();
        let after = full_batch_loss(&state.params, &state.omega, &ds, &cfg.objective);
        if after - before > 1e-6 {
            increases.push((trial, after - before));
        }
    }
    assert!(increases.is_empty(), "{} of 50 trials increased the loss: {increases:?}", increases.len());
}

#[test]
fn each_block_step_leaves_the_other_block_bitwise_unchanged() {
    let ds = generate(&ScmConfig::default(), Domain::Source, 40, 5).unwrap();
    let cfg = TrainConfig {
        batch_size: 16,
        ..tiny_cfg(5, 0.05)
    };
    let (mut state, mut rng) = init_state(&cfg, ds.width(), ds.len()).unwrap();
    let idx: Vec<usize> = (10..26).collect();
    let (x, y) = ds.gather(&idx);
    for _ in 0..3 {
        let omega = state.omega.clone();
        let params = state.params.clone();
        theta_step(&mut state, &x, &y, &idx, &cfg, &mut rng).unwrap();
        assert_eq!(state.omega, omega);
        assert_ne!(state.params, params);

        let params = state.params.clone();
        let omega = state.omega.clone();
        omega_step(&mut state, &x, &y, &idx, &cfg, &mut rng).unwrap();
        assert_eq!(state.params, params);
        assert_ne!(state.omega, omega);
        // Weights outside the batch never move.
        assert!(state.omega[..10].iter().chain(&state.omega[26..]).all(|&w| w == 1.0));
    }
}

fn two_layer_net(seed: u64) -> (ModelParams, Tensor, Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&[3, 5, 4], 3, &mut rng).unwrap();
    let x: Vec<f64> = (0..8 * 3).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..3)).collect();
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..2.0)).collect();
    (params, Tensor::matrix(8, 3, x).unwrap(), y, w)
}

fn weighted_ce_value(params: &ModelParams, x: &Tensor, y: &[usize], w: &[f64]) -> f64 {
    let logits = model::forward_logits(params, x).unwrap();
    let k = logits.cols();
    let mut total = 0.0;
    for i in 0..y.len() {
        let row: Vec<f64> = (0..k).map(|j| logits.at(i, j)).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += w[i] * (lse - row[y[i]]);
    }
    total / y.len() as f64
}

#[test]
fn weighted_ce_gradients_match_finite_differences() {
    for seed in 0..5 {
        let (params, x, y, w) = two_layer_net(seed);
        let mut graph = Graph::new();
        let nodes = params.register(&mut graph, true);
        let xn = graph.constant(x.clone());
        let wn = graph.constant(Tensor::column(w.clone()));
        let z = model::extract_features(&mut graph, &nodes, xn).unwrap();
        let logits = model::classify(&mut graph, &nodes, z).unwrap();
        let loss = model::weighted_ce(&mut graph, logits, &y, wn).unwrap();
        let value = graph.value(loss).item();
        assert!((value - weighted_ce_value(&params, &x, &y, &w)).abs() < 1e-12);
        let mut grads = graph.backward(loss).unwrap();

        for (k, id) in nodes.all().into_iter().enumerate() {
            let analytic = grads.take(id);
            let base = params.tensors()[k].1.clone();
            let numeric = finite_diff(
                |t: &Tensor| {
                    let mut p = params.clone();
                    *p.tensors_mut()[k] = Tensor::new(base.shape().to_vec(), t.data().to_vec())?;
                    Ok(weighted_ce_value(&p, &x, &y, &w))
                },
                &base,
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(analytic.data(), numeric.data(), 1e-6);
            assert!(err <= 1e-4, "seed {seed} tensor {k}: {err:e}");
        }
    }
}

#[test]
fn importance_matches_input_perturbation() {
    for seed in 0..5 {
        let (params, x, y, _) = two_layer_net(seed);
        let ds = Dataset::new(x.clone(), y.clone(), Domain::Source, None).unwrap();
        let importance = input_gradient_importance(&params, &ds).unwrap();
        let h = 1e-6;
        let mut numeric = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let logit = |delta: f64| {
                    let mut data = x.data().to_vec();
                    data[i * x.cols() + j] += delta;
                    let xp = Tensor::matrix(x.rows(), x.cols(), data).unwrap();
                    model::forward_logits(&params, &xp).unwrap().at(i, y[i])
                };
                numeric[j] += ((logit(h) - logit(-h)) / (2.0 * h)).abs() / x.rows() as f64;
            }
        }
        let err = max_relative_error(&importance, &numeric, 1e-6);
        assert!(err <= 1e-4, "seed {seed}: {err:e} {importance:?} vs {numeric:?}");
    }
}

/// Logistic regression with intercept by Newton's method. Returns the
/// coefficients and their standard errors from the inverse Fisher information.
fn logistic_fit(features: &[Vec<f64>], y: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let p = features[0].len() + 1;
    let row = |i: usize| -> Vec<f64> { std::iter::once(1.0).chain(features[i].iter().copied()).collect() };
    let mut beta = vec![0.0; p];
    let mut cov = vec![vec![0.0; p]; p];
    for _ in 0..50 {
        let mut grad = vec![0.0; p];
        let mut info = vec![vec![0.0; p]; p];
        for (i, &yi) in y.iter().enumerate() {
            let r = row(i);
            let eta: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            for a in 0..p {
                grad[a] += (yi as f64 - mu) * r[a];
                for b in 0..p {
                    info[a][b] += mu * (1.0 - mu) * r[a] * r[b];
                }
            }
        }
        cov = invert(info);
        let step: Vec<f64> = (0..p).map(|a| (0..p).map(|b| cov[a][b] * grad[b]).sum()).collect();
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if step.iter().all(|s| s.abs() < 1e-12) {
            break;
        }
    }
    let se = (0..p).map(|a| cov[a][a].sqrt()).collect();
    (beta, se)
}

fn invert(mut a: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for c in 0..n {
        let pivot = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, pivot);
        inv.swap(c, pivot);
        let d = a[c][c];
        for j in 0..n {
            a[c][j] /= d;
            inv[c][j] /= d;
        }
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                for j in 0..n {
                    a[r][j] -= f * a[c][j];
                    inv[r][j] -= f * inv[c][j];
                }
            }
        }
    }
    inv
}

#[test]
fn outcome_mechanism_given_causal_features_is_shared_across_domains() {
    let mut cfg = ScmConfig::default();
    cfg.confounder_to_spurious_source = Matrix::zeros(cfg.n_spurious, cfg.n_confounders);
    cfg.confounder_to_spurious_target = Matrix::zeros(cfg.n_spurious, cfg.n_confounders);
    let fit = |domain| {
        let ds = generate(&cfg, domain, 5000, 11).unwrap();
        let c: Vec<Vec<f64>> = (0..ds.len()).map(|i| (0..cfg.n_causal).map(|j| ds.x.at(i, j)).collect()).collect();
        logistic_fit(&c, &ds.y)
    };
    let (bs, ses) = fit(Domain::Source);
    let (bt, set) = fit(Domain::Target);
    for k in 0..bs.len() {
        let bound = 3.0 * (ses[k].powi(2) + set[k].powi(2)).sqrt();
        assert!((bs[k] - bt[k]).abs() <= bound, "coefficient {k}: {} vs {} (bound {bound})", bs[k], bt[k]);
    }
    // The fit is informative: causal coefficients are clearly non-zero.
    assert!(bs[1..].iter().zip(&ses[1..]).all(|(b, s)| b.abs() > 5.0 * s));
}
