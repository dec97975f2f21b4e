//! Every method on the smoke config with one shared seed.

use fedsmooth::client::Method;
use fedsmooth::config::RunConfig;
use fedsmooth::orchestrator::{boundary_jump, Federation, RunOptions};

fn main() -> fedsmooth::Result<()> {
    let base = RunConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/smoke.json"))?;
    println!("{:<22} {:>8} {:>8}", "method", "accuracy", "jump");
    for method in Method::ALL {
        let mut fed = Federation::new(&base.with_method(method), RunOptions::default())?;
        let metrics = fed.run()?;
        let acc = metrics.last().map_or(0.0, |m| m.eval_acc);
        println!("{:<22} {:>8.4} {:>8.4}", method.name(), acc, boundary_jump(&metrics)?);
    }
    Ok(())
}
