//! A frozen layer with a rank-2 adapter, trained for a few SGD steps on the
//! factors while the backbone stays fixed.

use fedsmooth::linalg::Matrix;
use fedsmooth::lora::{init_kaiming_zero, LayerState, LoraAdapter};
use fedsmooth::model::{grad_lora_factors, loss_and_gradients, Batch, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedsmooth::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = ModelSpec::softmax_regression(4, 3);
    let backbone = Matrix::from_fn(3, 4, |i, j| 0.1 * (i as f64 - j as f64))?;
    let adapter = init_kaiming_zero(3, 4, 2, 4.0, &mut rng)?;
    println!("scale s = alpha / sqrt(r) = {:.6}", adapter.scale());

    let mut layer = LayerState::new(backbone.clone(), adapter)?;
    assert_eq!(layer.effective_weight()?, backbone);

    let features = Matrix::from_rows(&[[1.0, 0.0, 0.5, -1.0], [0.0, 1.0, -0.5, 0.3], [0.2, 0.2, 1.0, 1.0]])?;
    let batch = Batch::new(features, vec![0, 1, 2], 3)?;
    for step in 0..5 {
        let (loss, _) = loss_and_gradients(&spec, &[layer.effective_weight()?], &batch)?;
        let (gb, ga) = grad_lora_factors(&spec, std::slice::from_ref(&layer), &batch, 0)?;
        println!("step {step}: loss {loss:.6}");
        let b = layer.adapter.b().add_scaled(-0.5, &gb)?;
        let a = layer.adapter.a().add_scaled(-0.5, &ga)?;
        layer = LayerState::new(backbone.clone(), LoraAdapter::new(b, a, 4.0)?)?;
    }
    println!("backbone untouched: {}", layer.backbone == backbone);
    println!("adapter update norm {:.6}", layer.adapter.delta()?.frobenius_norm());
    Ok(())
}
