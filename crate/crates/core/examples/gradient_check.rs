//! Analytic gradients against central finite differences for both models.

use fedsmooth::linalg::Matrix;
use fedsmooth::model::{loss_and_gradients, Batch, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fedsmooth::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for spec in [ModelSpec::softmax_regression(5, 3), ModelSpec::mlp2(5, 7, 3)] {
        let weights: Vec<Matrix> = spec
            .layer_shapes()
            .iter()
            .map(|&(m, n)| Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)))
            .collect::<Result<_, _>>()?;
        let features = Matrix::from_fn(6, 5, |_, _| rng.random_range(-2.0..2.0))?;
        let batch = Batch::new(features, (0..6).map(|i| i % 3).collect(), 3)?;
        let (_, grads) = loss_and_gradients(&spec, &weights, &batch)?;

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (l, w) in weights.iter().enumerate() {
            for idx in 0..w.data().len() {
                let bump = |delta: f64| -> fedsmooth::Result<f64> {
                    let mut data = w.data().to_vec();
                    data[idx] += delta;
                    let mut ws = weights.clone();
                    ws[l] = Matrix::new(w.rows(), w.cols(), data)?;
                    Ok(loss_and_gradients(&spec, &ws, &batch)?.0)
                };
                let numeric = (bump(h)? - bump(-h)?) / (2.0 * h);
                let analytic = grads[l].data()[idx];
                worst = worst.max((numeric - analytic).abs() / analytic.abs().max(1e-8).max(numeric.abs()));
            }
        }
        println!("{:?}: worst relative error {worst:.2e}", spec.kind);
    }
    Ok(())
}
