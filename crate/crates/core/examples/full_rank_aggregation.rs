//! Averaging factor products versus averaging factors on a sign-flipped pair.

use fedsmooth::linalg::{FactorPair, Matrix};
use fedsmooth::server::{aggregate_factor_average, aggregate_full_rank, ClientUpload};

fn main() -> fedsmooth::Result<()> {
    let b = Matrix::from_rows(&[[1.0, 0.5], [0.0, 2.0], [-1.0, 1.0]])?;
    let a = Matrix::from_rows(&[[0.3, -0.2, 1.0, 0.0], [1.0, 1.0, 0.0, -0.5]])?;
    let pair = FactorPair::new(b.clone(), a.clone())?;
    let flipped = FactorPair::new(b.scaled(-1.0)?, a.scaled(-1.0)?)?;
    let uploads = [
        ClientUpload {
            client_id: 0,
            size: 50,
            factors: vec![pair.clone()],
        },
        ClientUpload {
            client_id: 1,
            size: 50,
            factors: vec![flipped],
        },
    ];

    let full = aggregate_full_rank(&uploads)?;
    let averaged = aggregate_factor_average(&uploads)?;
    println!(
        "both clients hold the same update, norm {:.4}",
        pair.product()?.frobenius_norm()
    );
    println!("full-rank aggregate norm {:.4}", full[0].frobenius_norm());
    println!(
        "factor-average aggregate norm {:.4}",
        averaged[0].product()?.frobenius_norm()
    );
    Ok(())
}
