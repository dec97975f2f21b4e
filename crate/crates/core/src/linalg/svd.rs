//! Singular value decompositions and the rank-r factorization built on them.
//!
//! [`svd_exact`] is a one-sided Jacobi SVD, accurate to working precision for
//! the small matrices this crate deals with. [`svd_randomized`] is the usual
//! Gaussian sketch + subspace iteration scheme, finished with an exact SVD of
//! the projected matrix. [`svd_approx`] turns either into a `(B, A)` pair with
//! `B = U_r sqrt(S_r)` and `A = sqrt(S_r) V_r^T`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::qr::thin_q;
use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
/// Default power iterations and oversampling multiplier (oversample = factor * rank).
/// Paper-independent defaults for the randomized solver.
pub const DEFAULT_POWER_ITERS: usize = 8;
pub const DEFAULT_OVERSAMPLE_FACTOR: usize = 4;

/// Thin SVD `M = U diag(sigma) V^T` with `k` retained triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let mut us = self.u.clone();
        let k = self.k();
        for (idx, val) in us.data_mut().iter_mut().enumerate() {
            *val *= self.sigma[idx % k];
        }
        us.matmul(&self.v.transpose())
    }
}

/// Low-rank factor pair with `b.cols() == a.rows()`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub b: Matrix,
    pub a: Matrix,
}

impl FactorPair {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "FactorPair::new",
                lhs: b.shape(),
                rhs: a.shape(),
            });
        }
        Ok(FactorPair { b, a })
    }

    pub fn zeros(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        Ok(FactorPair {
            b: Matrix::zeros(rows, rank)?,
            a: Matrix::zeros(rank, cols)?,
        })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Shape of the product `B A`.
    pub fn product_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn product(&self) -> Result<Matrix> {
        self.b.matmul(&self.a)
    }
}

/// Settings for the randomized solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomizedConfig {
    /// Extra sketch columns; `None` means `4 * rank`.
    #[serde(default)]
    pub oversample: Option<usize>,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_power_iters() -> usize {
    DEFAULT_POWER_ITERS
}

impl Default for RandomizedConfig {
    fn default() -> Self {
        RandomizedConfig {
            oversample: None,
            power_iters: DEFAULT_POWER_ITERS,
            seed: 0,
        }
    }
}

impl RandomizedConfig {
    pub fn oversample_for(&self, rank: usize) -> usize {
        self.oversample.unwrap_or(DEFAULT_OVERSAMPLE_FACTOR * rank)
    }
}

/// Which SVD backs [`svd_approx`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SvdMode {
    #[default]
    Exact,
    Randomized(RandomizedConfig),
}

/// Full thin SVD via one-sided Jacobi, `k = min(rows, cols)`.
pub fn svd_exact(m: &Matrix) -> Result<SvdResult> {
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

fn jacobi_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let frob = m.frobenius_norm();
    // Columns below this squared norm are numerically null and excluded from rotations.
    let null_sq = (f64::EPSILON * frob).powi(2) * rows as f64;

    let mut converged = n < 2;
    let mut last_off = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (up, uq) = (&u[p], &u[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in up.iter().zip(uq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if alpha <= null_sq || beta <= null_sq || gamma == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                off = off.max(rel);
                if rel <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        last_off = off;
        converged = off <= OFF_DIAGONAL_TOL;
    }
    if !converged {
        return Err(Error::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: last_off,
        });
    }

    let norms: Vec<f64> = u.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let null_norm = null_sq.sqrt();
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_data = vec![0.0; n * n];
    for (out_j, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > null_norm && s > 0.0 {
            u_cols.push(Some(u[j].iter().map(|x| x / s).collect()));
        } else {
            u_cols.push(None);
        }
        for i in 0..n {
            v_data[i * n + out_j] = v[j][i];
        }
    }
    let u_cols = complete_basis(rows, u_cols);
    let mut u_data = vec![0.0; rows * n];
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u_data[i * n + j] = x;
        }
    }
    Ok(SvdResult {
        u: Matrix::from_raw(rows, n, u_data),
        sigma,
        v: Matrix::from_raw(n, n, v_data),
    })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
fn complete_basis(dim: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => loop {
                assert!(candidate < dim, "basis completion ran out of candidates");
                let mut e = vec![0.0; dim];
                e[candidate] = 1.0;
                candidate += 1;
                // Two passes of Gram-Schmidt.
                for _ in 0..2 {
                    for b in &basis {
                        let d: f64 = b.iter().zip(&e).map(|(x, y)| x * y).sum();
                        e.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                    }
                }
                let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    e.iter_mut().for_each(|x| *x /= norm);
                    basis.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

/// Result of [`svd_randomized`] plus whether the sketch size had to be clamped.
#[derive(Debug, Clone)]
pub struct RandomizedSvd {
    pub svd: SvdResult,
    pub clamped: bool,
}

/// Truncated SVD by Gaussian sketching with `power_iters` rounds of
/// re-orthonormalized subspace iteration.
///
/// The sketch width `target_rank + oversample` is clamped to `min(rows, cols)`.
pub fn svd_randomized<R: Rng + ?Sized>(
    m: &Matrix,
    target_rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<RandomizedSvd> {
    let (rows, cols) = m.shape();
    let min_dim = rows.min(cols);
    if target_rank == 0 {
        return Err(Error::Rank {
            rank: 0,
            rows,
            cols,
            max: min_dim,
        });
    }
    let target = target_rank.min(min_dim);
    let width = (target + oversample).min(min_dim);
    let clamped = target_rank + oversample > min_dim;

    let omega = Matrix::from_raw(
        cols,
        width,
        (0..cols * width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    let mt = m.transpose();
    let mut q = thin_q(&m.matmul(&omega)?);
    for _ in 0..power_iters {
        let z = thin_q(&mt.matmul(&q)?);
        q = thin_q(&m.matmul(&z)?);
    }
    let projected = q.transpose().matmul(m)?;
    let small = svd_exact(&projected)?;
    let u = q.matmul(&small.u)?;
    let svd = SvdResult {
        u: u.columns(0, target)?,
        sigma: small.sigma[..target].to_vec(),
        v: small.v.columns(0, target)?,
    };
    Ok(RandomizedSvd { svd, clamped })
}

/// Best rank-`r` factorization `(B, A)` with `B = U_r sqrt(S_r)` and
/// `A = sqrt(S_r) V_r^T`.
pub fn svd_approx(m: &Matrix, r: usize, mode: &SvdMode) -> Result<FactorPair> {
    let (rows, cols) = m.shape();
    let max = rows.min(cols);
    if r == 0 || r > max {
        return Err(Error::Rank {
            rank: r,
            rows,
            cols,
            max,
        });
    }
    let svd = match mode {
        SvdMode::Exact => svd_exact(m)?,
        SvdMode::Randomized(cfg) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            svd_randomized(m, r, cfg.oversample_for(r), cfg.power_iters, &mut rng)?.svd
        }
    };
    factors_from_svd(&svd, r)
}

pub(crate) fn factors_from_svd(svd: &SvdResult, r: usize) -> Result<FactorPair> {
    let roots: Vec<f64> = svd.sigma[..r].iter().map(|s| s.max(0.0).sqrt()).collect();
    let u = svd.u.columns(0, r)?;
    let v = svd.v.columns(0, r)?;
    let b = Matrix::from_fn(u.rows(), r, |i, j| u[(i, j)] * roots[j])?;
    let a = Matrix::from_fn(r, v.rows(), |i, j| roots[i] * v[(j, i)])?;
    FactorPair::new(b, a)
}
