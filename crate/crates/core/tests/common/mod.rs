#![allow(dead_code)]

use fedsmooth::config::{DataSource, RunConfig};
use fedsmooth::linalg::Matrix;
use fedsmooth::model::ModelSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[(i, p)] * b[(p, j)];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn to_nalgebra(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Singular values from the eigenvalues of `M^T M` (or `M M^T`), descending.
pub fn oracle_singular_values(m: &Matrix) -> Vec<f64> {
    let a = to_nalgebra(m);
    let gram = if m.rows() >= m.cols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// A matrix with prescribed singular values and random orthogonal factors.
pub fn with_spectrum(rows: usize, cols: usize, sigma: &[f64], rng: &mut impl Rng) -> Matrix {
    let q = |n: usize, rng: &mut dyn rand::RngCore| {
        let g = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        g.qr().q()
    };
    let u = q(rows, rng);
    let v = q(cols, rng);
    let mut s = nalgebra::DMatrix::zeros(rows, cols);
    for (i, &x) in sigma.iter().enumerate() {
        s[(i, i)] = x;
    }
    let m = u * s * v.transpose();
    Matrix::from_fn(rows, cols, |i, j| m[(i, j)]).unwrap()
}

pub fn small_config(model: ModelSpec, clients: usize, rounds: usize) -> RunConfig {
    let mut cfg = RunConfig::new(model, clients, rounds);
    cfg.data = DataSource::Synthetic {
        samples: 40 * clients,
        class_separation: 3.0,
    };
    cfg.train.steps_per_round = 5;
    cfg.train.batch_size = 8;
    cfg.train.lr_initial = 0.1;
    cfg
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
}
