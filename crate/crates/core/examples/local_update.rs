//! One client over two rounds: the pipeline steps, the initialization and
//! projection losses, and the loss curve.

use fedsmooth::client::{local_update, ClientState};
use fedsmooth::config::RunConfig;
use fedsmooth::model::ModelSpec;
use fedsmooth::orchestrator::{build_datasets, initial_backbones};
use fedsmooth::server::ServerState;

fn main() -> fedsmooth::Result<()> {
    let mut cfg = RunConfig::new(ModelSpec::mlp2(8, 12, 4), 1, 2);
    cfg.data = fedsmooth::config::DataSource::Synthetic {
        samples: 200,
        class_separation: 3.0,
    };
    cfg.train.steps_per_round = 10;
    cfg.train.lr_initial = 0.1;
    let ccfg = cfg.client_config();

    let data = build_datasets(&cfg)?;
    let backbones = initial_backbones(&cfg.model, cfg.seed)?;
    let server = ServerState::new(backbones.clone(), cfg.rank, cfg.alpha, cfg.rounds, cfg.seed)?;
    let mut client = ClientState::new(0, backbones, data.shards[0].clone())?;

    for t in 0..2 {
        let out = local_update(&mut client, &server.factors, t, &ccfg)?;
        let ctx = out.context.expect("smoothed clients record their context");
        println!("round {t}");
        println!("  steps: {:?}", ctx.trace);
        println!("  zeta {:.3}", ctx.zeta);
        for (l, (ga, rm)) in ctx.w_ga_hat.iter().zip(&ctx.w_rm).enumerate() {
            println!(
                "  layer {l}: |W_ga_hat| {:.3e}  |W_rm| {:.3e}  eps_init {:.3e}  eps_end {:.3e}",
                ga.frobenius_norm(),
                rm.frobenius_norm(),
                ctx.eps_init_norm[l],
                ctx.eps_end_norm[l]
            );
        }
        println!("  loss {:.4} -> {:.4}", out.losses[0], out.losses[out.losses.len() - 1]);
    }
    Ok(())
}
