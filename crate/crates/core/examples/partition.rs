//! IID versus Dirichlet(0.1) label skew on synthetic data.

use fedsmooth::data::{generate_synthetic, PartitionSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fedsmooth::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ds = generate_synthetic(1000, 16, 8, 3.0, &mut rng)?;
    for spec in [PartitionSpec::iid(), PartitionSpec::dirichlet(0.1)] {
        let shards = spec.apply(&ds, 5, &mut rng)?;
        println!("{:?}", spec.kind);
        for (i, s) in shards.iter().enumerate() {
            println!(
                "  client {i}: {:4} samples, entropy {:.3}, classes {:?}",
                s.len(),
                s.label_entropy(),
                s.class_counts()
            );
        }
    }
    Ok(())
}
