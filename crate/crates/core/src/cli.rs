//! The `fedsmooth` command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 the discrepancy identity or its bound was violated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::client::Method;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{build_datasets, run_experiment, verifiable, RunOptions, VERIFY_MAX_DIM};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_MATH: i32 = 3;

/// Slack allowed below the triangle bound.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Methods compared by `ablate`, in output order.
pub const ABLATION_METHODS: [Method; 6] = [
    Method::FedSmooth,
    Method::FedSmoothNoRm,
    Method::FedSmoothNoGa,
    Method::FedavgLora,
    Method::FrloraFresh,
    Method::FedSmoothFactorAvg,
];

#[derive(Debug, Parser)]
#[command(name = "fedsmooth", version, about = "Federated LoRA fine-tuning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write metrics.csv, checkpoint.bin, config.resolved.json.
    Run(RunArgs),
    /// Run the method and its ablations/baselines with shared seeds.
    Ablate(RunArgs),
    /// Run with full tracing and check the inter-round discrepancy identity.
    Verify(VerifyArgs),
    /// Print per-client sample counts and label entropy.
    PartitionStats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum concurrent client updates.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    pub verify_tolerance: f64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, hide = true)]
    pub corrupt_trace: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub config: PathBuf,
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Runs a parsed command, printing to stdout and stderr; returns the exit code.
pub fn execute(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(a) => cmd_run(&a.config, &a.out, a.jobs),
        Command::Ablate(a) => cmd_ablate(&a.config, &a.out, a.jobs),
        Command::Verify(a) => cmd_verify(a),
        Command::PartitionStats(a) => cmd_partition_stats(&a.config),
    };
    match result {
        Ok((code, text)) => {
            print!("{text}");
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn options(jobs: usize) -> RunOptions {
    RunOptions {
        jobs,
        corrupt_trace: false,
    }
}

pub fn cmd_run(config: &Path, out: &Path, jobs: usize) -> Result<(i32, String)> {
    let cfg = RunConfig::load(config)?;
    let outcome = run_experiment(&cfg, out, options(jobs))?;
    let mut text = format!(
        "method {}: {} rounds, final accuracy {:.4}\n",
        cfg.method, cfg.rounds, outcome.final_accuracy
    );
    if let Some(j) = outcome.boundary_jump {
        writeln!(text, "mean boundary jump {j:.6}").unwrap();
    }
    writeln!(text, "wrote {}", out.display()).unwrap();
    Ok((EXIT_OK, text))
}

pub fn cmd_ablate(config: &Path, out: &Path, jobs: usize) -> Result<(i32, String)> {
    let cfg = RunConfig::load(config)?;
    let mut summary = String::from("method,final_accuracy,boundary_jump,partition_hash\n");
    let mut text = String::new();
    for method in ABLATION_METHODS {
        let run_cfg = RunConfig {
            method,
            verification: false,
            ..cfg.clone()
        };
        let outcome = run_experiment(&run_cfg, out.join(method.name()), options(jobs))?;
        let jump = outcome.boundary_jump.map(|j| format!("{j:.16e}")).unwrap_or_default();
        writeln!(
            summary,
            "{},{:.16e},{},{:016x}",
            method, outcome.final_accuracy, jump, outcome.partition_hash
        )
        .unwrap();
        writeln!(
            text,
            "{:<22} accuracy {:.4}  jump {}",
            method.name(),
            outcome.final_accuracy,
            jump
        )
        .unwrap();
    }
    let path = out.join("ablation_summary.csv");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
    writeln!(text, "wrote {}", path.display()).unwrap();
    Ok((EXIT_OK, text))
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(i32, String)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if !verifiable(cfg.method) {
        return Err(Error::Config(format!(
            "method {} has no round-matching term to verify",
            cfg.method
        )));
    }
    if let Some(&(m, n)) = cfg
        .model
        .layer_shapes()
        .iter()
        .find(|&&(m, n)| m > VERIFY_MAX_DIM || n > VERIFY_MAX_DIM)
    {
        return Err(Error::Config(format!(
            "verification needs layer dimensions <= {VERIFY_MAX_DIM}, found {m}x{n}"
        )));
    }
    if !(args.verify_tolerance > 0.0) {
        return Err(Error::Config("--verify-tolerance must be > 0".into()));
    }
    cfg.verification = true;
    let outcome = run_experiment(
        &cfg,
        &args.out,
        RunOptions {
            jobs: args.jobs,
            corrupt_trace: args.corrupt_trace,
        },
    )?;
    let report = outcome.report.unwrap_or_default();
    let mut text = format!("checked {} (round, client, layer) entries\n", report.rows.len());
    writeln!(text, "max residual {:.3e}", report.max_residual()).unwrap();
    writeln!(text, "max ||S - E||_F {:.3e}", report.max_lhs()).unwrap();
    if !report.rows.is_empty() {
        writeln!(text, "min bound slack {:.3e}", report.min_slack()).unwrap();
    }
    if report.holds(args.verify_tolerance, BOUND_TOLERANCE) {
        text.push_str("identity holds\n");
        Ok((EXIT_OK, text))
    } else {
        text.push_str("identity VIOLATED\n");
        Ok((EXIT_MATH, text))
    }
}

pub fn cmd_partition_stats(config: &Path) -> Result<(i32, String)> {
    let cfg = RunConfig::load(config)?;
    let data = build_datasets(&cfg)?;
    let mut text = String::from("client_id,samples,label_entropy\n");
    let mut total = 0;
    let mut entropy_sum = 0.0;
    for (i, shard) in data.shards.iter().enumerate() {
        let h = shard.label_entropy();
        total += shard.len();
        entropy_sum += h;
        writeln!(text, "{i},{},{h:.6}", shard.len()).unwrap();
    }
    writeln!(text, "all,{total},{:.6}", entropy_sum / data.shards.len() as f64).unwrap();
    Ok((EXIT_OK, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn verify_defaults() {
        let cli = Cli::parse_from(["fedsmooth", "verify", "--config", "c.json", "--out", "o"]);
        match cli.command {
            Command::Verify(a) => {
                assert_eq!(a.verify_tolerance, 1e-8);
                assert_eq!(a.jobs, 1);
                assert!(!a.corrupt_trace);
            }
            other => panic!("parsed {other:?}"),
        }
    }
}
