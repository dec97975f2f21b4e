//! Best rank-r factorization of a small matrix, exact and randomized.
//!
//! ```text
//! cargo run --example svd_approx
//! ```

use fedsmooth::linalg::{svd_approx, svd_exact, Matrix, RandomizedConfig, SvdMode};

fn main() -> fedsmooth::Result<()> {
    let m = Matrix::from_fn(6, 5, |i, j| ((i * 5 + j) as f64).sin() + if i == j { 3.0 } else { 0.0 })?;
    let svd = svd_exact(&m)?;
    println!("singular values: {:.6?}", svd.sigma);

    for r in 1..=3 {
        let exact = svd_approx(&m, r, &SvdMode::Exact)?;
        let randomized = svd_approx(&m, r, &SvdMode::Randomized(RandomizedConfig::default()))?;
        let tail: f64 = svd.sigma[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
        println!(
            "r={r}: exact error {:.6}, randomized error {:.6}, tail bound {:.6}",
            m.sub(&exact.product()?)?.frobenius_norm(),
            m.sub(&randomized.product()?)?.frobenius_norm(),
            tail
        );
    }
    Ok(())
}
