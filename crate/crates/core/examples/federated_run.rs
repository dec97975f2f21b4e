//! A full federated run from a config file, printing accuracy per round.
//!
//! ```text
//! cargo run --release --example federated_run -- crates/core/configs/smoke.json
//! ```

use fedsmooth::config::RunConfig;
use fedsmooth::orchestrator::{boundary_jump, Federation, RunOptions};

fn main() -> fedsmooth::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json").to_string());
    let cfg = RunConfig::load(&path)?;
    let mut fed = Federation::new(
        &cfg,
        RunOptions {
            jobs: 4,
            ..Default::default()
        },
    )?;
    println!(
        "{} clients, partition hash {:016x}",
        cfg.num_clients, fed.partition_hash
    );

    let metrics = fed.run()?;
    for m in &metrics {
        let jump = m
            .mean_boundary_jump()
            .map(|j| format!("{j:.4}"))
            .unwrap_or_else(|| "-".into());
        println!("round {:2}: accuracy {:.4}  boundary jump {jump}", m.round, m.eval_acc);
    }
    if let Ok(j) = boundary_jump(&metrics) {
        println!("mean boundary jump over the run: {j:.4}");
    }
    Ok(())
}
