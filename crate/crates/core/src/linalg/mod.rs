//! Dense linear algebra for desk-scale matrices.

mod matrix;
mod qr;
mod svd;

pub use matrix::{frobenius_norm, matmul, Matrix};
pub use svd::{
    svd_approx, svd_exact, svd_randomized, FactorPair, RandomizedConfig, RandomizedSvd, SvdMode, SvdResult,
    DEFAULT_OVERSAMPLE_FACTOR, DEFAULT_POWER_ITERS,
};
