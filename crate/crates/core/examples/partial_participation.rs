//! Three of five clients per round; shows who missed which broadcasts.

use fedsmooth::config::RunConfig;
use fedsmooth::orchestrator::{Federation, RunOptions};

fn main() -> fedsmooth::Result<()> {
    let cfg = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/partial.json"))?;
    let mut fed = Federation::new(&cfg, RunOptions::default())?;
    for _ in 0..cfg.rounds {
        let m = fed.run_round()?;
        let pending: Vec<usize> = fed.clients.iter().map(|c| c.pending_server_updates.len()).collect();
        println!(
            "round {:2}: participants {:?}, pending per client {:?}, accuracy {:.3}",
            m.round, m.participants, pending, m.eval_acc
        );
    }
    let report = fed.verify()?;
    println!(
        "{} transitions checked, max residual {:.2e}",
        report.rows.len(),
        report.max_residual()
    );
    Ok(())
}
