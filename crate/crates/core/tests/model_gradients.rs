mod common;

use common::*;
use fedsmooth::data::LabeledDataset;
use fedsmooth::linalg::Matrix;
use fedsmooth::lora::{effective_weight, LayerState, LoraAdapter};
use fedsmooth::model::{
    forward, forward_weights, grad_full_weight, grad_lora_factors, loss, loss_and_gradients, predict, train_local,
    Batch, ModelSpec, RoundClock, TrainConfig,
};
use fedsmooth::Error;
use rand::Rng;

const H: f64 = 1e-5;

fn random_batch(spec: &ModelSpec, n: usize, r: &mut impl Rng) -> Batch {
    let x = Matrix::from_fn(n, spec.input_dim, |_, _| r.random_range(-2.0..2.0)).unwrap();
    let labels = (0..n).map(|_| r.random_range(0..spec.num_classes)).collect();
    Batch::new(x, labels, spec.num_classes).unwrap()
}

fn random_layers(spec: &ModelSpec, rank: usize, r: &mut impl Rng) -> Vec<LayerState> {
    spec.layer_shapes()
        .iter()
        .map(|&(m, n)| {
            let adapter = LoraAdapter::new(random_matrix(m, rank, r), random_matrix(rank, n, r), 2.0).unwrap();
            LayerState::new(random_matrix(m, n, r), adapter).unwrap()
        })
        .collect()
}

fn perturbed(m: &Matrix, idx: usize, delta: f64) -> Matrix {
    let mut d = m.data().to_vec();
    d[idx] += delta;
    Matrix::new(m.rows(), m.cols(), d).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn layer_loss(spec: &ModelSpec, layers: &[LayerState], batch: &Batch) -> f64 {
    loss(&forward(spec, layers, batch).unwrap(), &batch.labels)
}

#[test]
fn full_weight_gradients_match_finite_differences() {
    let mut r = rng(11);
    for spec in [ModelSpec::softmax_regression(6, 4), ModelSpec::mlp2(6, 9, 4)] {
        let weights: Vec<Matrix> = spec
            .layer_shapes()
            .iter()
            .map(|&(m, n)| random_matrix(m, n, &mut r))
            .collect();
        let batch = random_batch(&spec, 10, &mut r);
        let (_, grads) = loss_and_gradients(&spec, &weights, &batch).unwrap();
        for l in 0..weights.len() {
            for _ in 0..24 {
                let idx = r.random_range(0..weights[l].data().len());
                let mut plus = weights.clone();
                plus[l] = perturbed(&weights[l], idx, H);
                let mut minus = weights.clone();
                minus[l] = perturbed(&weights[l], idx, -H);
                let numeric = (loss_and_gradients(&spec, &plus, &batch).unwrap().0
                    - loss_and_gradients(&spec, &minus, &batch).unwrap().0)
                    / (2.0 * H);
                assert!(
                    rel_err(numeric, grads[l].data()[idx]) < 1e-4,
                    "{:?} layer {l}",
                    spec.kind
                );
            }
        }
    }
}

#[test]
fn factor_gradients_match_finite_differences() {
    let mut r = rng(12);
    for spec in [ModelSpec::softmax_regression(5, 3), ModelSpec::mlp2(5, 7, 3)] {
        let layers = random_layers(&spec, 2, &mut r);
        let batch = random_batch(&spec, 8, &mut r);
        for l in 0..layers.len() {
            let (gb, ga) = grad_lora_factors(&spec, &layers, &batch, l).unwrap();
            for which in 0..2 {
                let target = if which == 0 {
                    layers[l].adapter.b()
                } else {
                    layers[l].adapter.a()
                };
                for _ in 0..20 {
                    let idx = r.random_range(0..target.data().len());
                    let eval = |delta: f64| {
                        let mut ls = layers.clone();
                        let (b, a) = if which == 0 {
                            (perturbed(target, idx, delta), layers[l].adapter.a().clone())
                        } else {
                            (layers[l].adapter.b().clone(), perturbed(target, idx, delta))
                        };
                        ls[l].adapter = LoraAdapter::new(b, a, 2.0).unwrap();
                        layer_loss(&spec, &ls, &batch)
                    };
                    let numeric = (eval(H) - eval(-H)) / (2.0 * H);
                    let analytic = if which == 0 { gb.data()[idx] } else { ga.data()[idx] };
                    assert!(rel_err(numeric, analytic) < 1e-4);
                }
            }
        }
    }
}

#[test]
fn factor_gradients_follow_chain_rule() {
    let mut r = rng(13);
    let spec = ModelSpec::mlp2(4, 6, 3);
    let layers = random_layers(&spec, 2, &mut r);
    let batch = random_batch(&spec, 5, &mut r);
    for l in 0..2 {
        let g = grad_full_weight(&spec, &layers, &batch, l).unwrap();
        let (gb, ga) = grad_lora_factors(&spec, &layers, &batch, l).unwrap();
        let s = layers[l].adapter.scale();
        let expect_b = g.matmul(&layers[l].adapter.a().transpose()).unwrap().scaled(s).unwrap();
        let expect_a = layers[l].adapter.b().transpose().matmul(&g).unwrap().scaled(s).unwrap();
        assert!(max_abs_diff(gb.data(), expect_b.data()) < 1e-14);
        assert!(max_abs_diff(ga.data(), expect_a.data()) < 1e-14);
    }
}

#[test]
fn softmax_gradient_has_closed_form() {
    let mut r = rng(14);
    let spec = ModelSpec::softmax_regression(4, 3);
    let w = random_matrix(3, 4, &mut r);
    let batch = random_batch(&spec, 6, &mut r);
    let (_, grads) = loss_and_gradients(&spec, std::slice::from_ref(&w), &batch).unwrap();
    let probs = forward_weights(&spec, std::slice::from_ref(&w), &batch.features).unwrap();
    let n = batch.len() as f64;
    let expected = Matrix::from_fn(3, 4, |c, j| {
        (0..batch.len())
            .map(|i| {
                let y = if batch.labels[i] == c { 1.0 } else { 0.0 };
                (probs[(i, c)] - y) * batch.features[(i, j)] / n
            })
            .sum()
    })
    .unwrap();
    assert!(max_abs_diff(grads[0].data(), expected.data()) < 1e-14);
}

#[test]
fn probabilities_are_rows_of_a_simplex() {
    let mut r = rng(15);
    let spec = ModelSpec::mlp2(5, 8, 4);
    let layers = random_layers(&spec, 1, &mut r);
    let batch = random_batch(&spec, 7, &mut r);
    let p = forward(&spec, &layers, &batch).unwrap();
    for i in 0..p.rows() {
        let row = p.row(i);
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_give_uniform_loss() {
    let spec = ModelSpec::softmax_regression(3, 5);
    let w = Matrix::zeros(5, 3).unwrap();
    let batch = Batch::new(
        Matrix::from_fn(4, 3, |i, j| (i * j) as f64).unwrap(),
        vec![0, 1, 2, 4],
        5,
    )
    .unwrap();
    let (l, _) = loss_and_gradients(&spec, &[w], &batch).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn effective_weight_matches_manual_sum() {
    let mut r = rng(16);
    let b = random_matrix(4, 2, &mut r);
    let a = random_matrix(2, 3, &mut r);
    let w = random_matrix(4, 3, &mut r);
    let layer = LayerState::new(w.clone(), LoraAdapter::new(b.clone(), a.clone(), 3.0).unwrap()).unwrap();
    let s = 3.0 / 2f64.sqrt();
    let ba = naive_matmul(&b, &a);
    let expected: Vec<f64> = w.data().iter().zip(&ba).map(|(x, y)| x + s * y).collect();
    assert!(max_abs_diff(effective_weight(&layer).unwrap().data(), &expected) < 1e-14);
}

#[test]
fn predictions_break_ties_low() {
    let spec = ModelSpec::softmax_regression(2, 3);
    let w = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]).unwrap();
    let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
    assert_eq!(predict(&spec, &[w], &x).unwrap(), vec![0, 2]);
}

#[test]
fn invalid_inputs_are_reported() {
    let spec = ModelSpec::softmax_regression(2, 3);
    assert!(matches!(
        Batch::new(Matrix::zeros(1, 2).unwrap(), vec![3], 3),
        Err(Error::Label { label: 3, classes: 3 })
    ));
    let layers = vec![LayerState::new(
        Matrix::zeros(3, 2).unwrap(),
        LoraAdapter::new(Matrix::zeros(3, 1).unwrap(), Matrix::zeros(1, 2).unwrap(), 1.0).unwrap(),
    )
    .unwrap()];
    let batch = Batch::new(Matrix::zeros(1, 2).unwrap(), vec![0], 3).unwrap();
    assert!(matches!(
        grad_full_weight(&spec, &layers, &batch, 1),
        Err(Error::LayerIndex { index: 1, layers: 1 })
    ));
}

#[test]
fn training_touches_only_factors_and_records_each_step() {
    let mut r = rng(17);
    let spec = ModelSpec::softmax_regression(4, 3);
    let backbone = random_matrix(3, 4, &mut r);
    let ds = LabeledDataset::new(random_matrix(30, 4, &mut r), (0..30).map(|i| i % 3).collect(), 3).unwrap();
    let adapter = LoraAdapter::new(random_matrix(3, 2, &mut r), random_matrix(2, 4, &mut r), 4.0).unwrap();
    let cfg = TrainConfig {
        steps_per_round: 7,
        ..TrainConfig::default()
    };
    let out = train_local(
        &spec,
        std::slice::from_ref(&backbone),
        vec![adapter.clone()],
        &ds,
        &cfg,
        RoundClock::new(0, 1),
        &mut r,
    )
    .unwrap();
    assert_eq!(out.losses.len(), 7);
    assert_ne!(out.adapters[0], adapter);

    let frozen = TrainConfig { lr_initial: 0.0, ..cfg };
    let out = train_local(
        &spec,
        &[backbone],
        vec![adapter.clone()],
        &ds,
        &frozen,
        RoundClock::new(0, 1),
        &mut r,
    )
    .unwrap();
    assert_eq!(out.adapters[0], adapter);
}
