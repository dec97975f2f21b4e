//! Records every client transition of a small run and checks that the start
//! state of each round differs from the previous end state by exactly the
//! round-matching drift plus the two projection errors.

use fedsmooth::config::RunConfig;
use fedsmooth::orchestrator::{Federation, RunOptions};

fn main() -> fedsmooth::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/verify.json").to_string());
    let mut cfg = RunConfig::load(&path)?;
    cfg.verification = true;
    let mut fed = Federation::new(&cfg, RunOptions::default())?;
    fed.run()?;
    let report = fed.verify()?;
    println!("round client layer   |S-E|        residual     slack");
    for r in &report.rows {
        println!(
            "{:5} {:6} {:5}   {:.4e}   {:.2e}   {:.4e}",
            r.round, r.client_id, r.layer, r.lhs_norm, r.residual, r.bound_slack
        );
    }
    println!("max residual {:.2e}", report.max_residual());
    Ok(())
}
