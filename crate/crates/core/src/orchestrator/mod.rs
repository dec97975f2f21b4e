//! Round loop, evaluation, and run artifacts.

mod checkpoint;
mod metrics;
mod verify;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint, Checkpoint};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint};
pub use metrics::{
    boundary_jump, combined_norm, metrics_csv, write_metrics, ClientRoundRecord, RoundMetrics, METRICS_HEADER,
};
pub use verify::{
    corrupt as corrupt_trace, verify_proposition, verify_transition, DiscrepancyReport, DiscrepancyRow,
    RoundTransition, REPORT_HEADER,
};

use crate::client::{
    frlora_base_factors, run_client, ClientConfig, ClientOutput, ClientRoundContext, ClientState, FrloraInit, Method,
};
use crate::config::{DataSource, RunConfig};
use crate::data::{generate_synthetic, load_csv, partition_fingerprint, split_train_val, standardize, LabeledDataset};
use crate::error::{Error, Result};
use crate::linalg::{FactorPair, Matrix};
use crate::lora::kaiming_uniform;
use crate::model::{predict, ModelSpec};
use crate::seed::{self, Purpose};
use crate::server::{
    aggregate_factor_average, aggregate_full_rank, merge_backbone, project_rank_r, replace_factors, ClientUpload,
    ServerState,
};

/// Largest layer dimension for which full matrices are kept for verification.
pub const VERIFY_MAX_DIM: usize = 64;

/// Client shards plus the global test set.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub shards: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

impl Datasets {
    pub fn partition_hash(&self) -> u64 {
        partition_fingerprint(&self.shards)
    }
}

/// Builds the data a run uses; depends only on the data, partition and seed fields.
pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let spec = &cfg.model;
    let (pool, test) = match &cfg.data {
        DataSource::Synthetic {
            samples,
            class_separation,
        } => {
            let n_test = (*samples as f64 * cfg.test_fraction).round() as usize;
            let mut rng = seed::stream(cfg.seed, Purpose::Data, &[0]);
            let all = generate_synthetic(
                samples + n_test,
                spec.input_dim,
                spec.num_classes,
                *class_separation,
                &mut rng,
            )?;
            let train_idx: Vec<usize> = (0..*samples).collect();
            let test_idx: Vec<usize> = (*samples..samples + n_test).collect();
            (all.subset(&train_idx)?, all.subset(&test_idx)?)
        }
        DataSource::Csv { path } => {
            let raw = load_csv(path)?;
            if raw.feature_dim() != spec.input_dim {
                return Err(Error::Config(format!(
                    "{} has {} features but the model expects {}",
                    path.display(),
                    raw.feature_dim(),
                    spec.input_dim
                )));
            }
            if raw.class_count > spec.num_classes {
                return Err(Error::Config(format!(
                    "{} has labels up to {} but the model has {} classes",
                    path.display(),
                    raw.class_count - 1,
                    spec.num_classes
                )));
            }
            let ds = standardize(&LabeledDataset::new(raw.features, raw.labels, spec.num_classes)?)?;
            let mut rng = seed::stream(cfg.seed, Purpose::Data, &[1]);
            split_train_val(&ds, 1.0 - cfg.test_fraction, &mut rng)?
        }
    };
    let mut rng = seed::stream(cfg.seed, Purpose::Partition, &[]);
    let shards = cfg.partition.apply(&pool, cfg.num_clients, &mut rng)?;
    Ok(Datasets { shards, test })
}

/// Kaiming-uniform starting weights, one stream per layer.
pub fn initial_backbones(spec: &ModelSpec, seed_base: u64) -> Result<Vec<Matrix>> {
    spec.layer_shapes()
        .iter()
        .enumerate()
        .map(|(l, &(out, inp))| {
            let mut rng = seed::stream(seed_base, Purpose::Backbone, &[l as u64]);
            kaiming_uniform(out, inp, &mut rng)
        })
        .collect()
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn evaluate(backbones: &[Matrix], spec: &ModelSpec, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = predict(spec, backbones, &test.features)?;
    let correct = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / test.len() as f64)
}

/// `ceil(fraction * K)` distinct clients, sorted; everyone when that is `K`.
pub fn select_participants(num_clients: usize, count: usize, seed_base: u64, round: usize) -> Vec<usize> {
    if count >= num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = seed::stream(seed_base, Purpose::ClientSampling, &[round as u64]);
    let mut v = sample(&mut rng, num_clients, count).into_vec();
    v.sort_unstable();
    v
}

/// Runtime knobs that do not change results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Concurrent client updates; 0 or 1 means sequential.
    pub jobs: usize,
    /// Perturb the recorded trace before verification (negative control).
    pub corrupt_trace: bool,
}

/// A simulated federation: one server, `K` clients, a test set.
#[derive(Debug)]
pub struct Federation {
    pub cfg: RunConfig,
    pub client_cfg: ClientConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub test: LabeledDataset,
    pub partition_hash: u64,
    pub options: RunOptions,
    last_loss: Vec<Option<f64>>,
    last_context: Vec<Option<ClientRoundContext>>,
    /// Consecutive-participation pairs kept for verification.
    pub trace: Vec<RoundTransition>,
    keep_trace: bool,
}

impl Federation {
    pub fn new(cfg: &RunConfig, options: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let data = build_datasets(cfg)?;
        let backbones = initial_backbones(&cfg.model, cfg.seed)?;
        let server = ServerState::new(backbones.clone(), cfg.rank, cfg.alpha, cfg.rounds, cfg.seed)?;
        let partition_hash = data.partition_hash();
        let clients = data
            .shards
            .into_iter()
            .enumerate()
            .map(|(id, ds)| ClientState::new(id, backbones.clone(), ds))
            .collect::<Result<Vec<_>>>()?;
        let small = cfg
            .model
            .layer_shapes()
            .iter()
            .all(|&(m, n)| m <= VERIFY_MAX_DIM && n <= VERIFY_MAX_DIM);
        let k = clients.len();
        Ok(Federation {
            client_cfg: cfg.client_config(),
            cfg: cfg.clone(),
            server,
            clients,
            test: data.test,
            partition_hash,
            options,
            last_loss: vec![None; k],
            last_context: vec![None; k],
            trace: Vec::new(),
            keep_trace: cfg.verification && small && verifiable(cfg.method),
        })
    }

    pub fn method(&self) -> Method {
        self.cfg.method
    }

    /// Whether transitions are being recorded.
    pub fn records_trace(&self) -> bool {
        self.keep_trace
    }

    pub fn evaluate(&self) -> Result<f64> {
        let weights = self.server.global_weights(!self.cfg.method.merges_backbone())?;
        evaluate(&weights, &self.cfg.model, &self.test)
    }

    /// One round with the configured participation.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        if self.cfg.participants_per_round() == self.clients.len() {
            self.run_round_full()
        } else {
            self.run_round_partial()
        }
    }

    /// Every client participates.
    pub fn run_round_full(&mut self) -> Result<RoundMetrics> {
        let all: Vec<usize> = (0..self.clients.len()).collect();
        self.execute_round(all)
    }

    /// Sampled participation with pending-update bookkeeping for everyone else.
    pub fn run_round_partial(&mut self) -> Result<RoundMetrics> {
        let t = self.server.round;
        let chosen = select_participants(self.clients.len(), self.cfg.participants_per_round(), self.cfg.seed, t);
        if t > 0 {
            let active: BTreeSet<usize> = chosen.iter().copied().collect();
            for c in self.clients.iter_mut().filter(|c| !active.contains(&c.id)) {
                c.record_missed_round(&self.server.factors);
            }
        }
        self.execute_round(chosen)
    }

    fn execute_round(&mut self, participants: Vec<usize>) -> Result<RoundMetrics> {
        let t = self.server.round;
        if t >= self.cfg.rounds {
            return Err(Error::Config(format!("all {} rounds already ran", self.cfg.rounds)));
        }
        let started = Instant::now();
        let outputs = self.dispatch(&participants, t)?;

        let uploads: Vec<ClientUpload> = outputs
            .iter()
            .map(|o| ClientUpload {
                client_id: o.client_id,
                size: self.clients[o.client_id].size(),
                factors: o.upload.clone(),
            })
            .collect();
        let eps_server = self.aggregate(&uploads, t)?;
        let eval_acc = self.evaluate()?;

        let mut records = Vec::with_capacity(outputs.len());
        let mut zeta = None;
        for out in outputs {
            let id = out.client_id;
            let jump = match (self.last_loss[id], out.losses.first()) {
                (Some(prev), Some(first)) => Some((first - prev).abs()),
                _ => None,
            };
            if let Some(last) = out.losses.last() {
                self.last_loss[id] = Some(*last);
            }
            let (eps_init, eps_end) = match &out.context {
                Some(ctx) => {
                    zeta = Some(ctx.zeta);
                    (ctx.eps_init_norm.clone(), ctx.eps_end_norm.clone())
                }
                None => (Vec::new(), Vec::new()),
            };
            if self.keep_trace {
                if let Some(ctx) = out.context {
                    if let Some(prev) = self.last_context[id].take() {
                        self.trace.push(RoundTransition {
                            previous: prev,
                            current: ctx.clone(),
                        });
                    }
                    self.last_context[id] = Some(ctx);
                }
            }
            records.push(ClientRoundRecord {
                client_id: id,
                losses: out.losses,
                eps_init,
                eps_end,
                boundary_jump: jump,
            });
        }
        Ok(RoundMetrics {
            round: t,
            participants,
            clients: records,
            eval_acc,
            eps_server,
            zeta,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the participants' local updates, possibly on several threads, and
    /// returns the outputs ordered by client id.
    fn dispatch(&mut self, participants: &[usize], t: usize) -> Result<Vec<ClientOutput>> {
        let method = self.cfg.method;
        let ccfg = &self.client_cfg;
        let server_factors: &[FactorPair] = &self.server.factors;
        let wanted: BTreeSet<usize> = participants.iter().copied().collect();
        let mut active: Vec<&mut ClientState> = self.clients.iter_mut().filter(|c| wanted.contains(&c.id)).collect();
        let jobs = self.options.jobs.max(1).min(active.len().max(1));
        let mut results: Vec<Result<ClientOutput>> = if jobs <= 1 {
            active
                .iter_mut()
                .map(|c| run_client(method, c, server_factors, t, ccfg))
                .collect()
        } else {
            let per_thread = active.len().div_ceil(jobs);
            std::thread::scope(|scope| {
                let handles: Vec<_> = active
                    .chunks_mut(per_thread)
                    .map(|chunk| {
                        scope.spawn(move || {
                            chunk
                                .iter_mut()
                                .map(|c| run_client(method, c, server_factors, t, ccfg))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("client thread panicked"))
                    .collect()
            })
        };
        let mut outputs = Vec::with_capacity(results.len());
        for r in results.drain(..) {
            outputs.push(r?);
        }
        outputs.sort_by_key(|o| o.client_id);
        Ok(outputs)
    }

    /// Server update for the configured method; returns per-layer `eps_server`.
    fn aggregate(&mut self, uploads: &[ClientUpload], t: usize) -> Result<Vec<f64>> {
        let r = self.cfg.rank;
        let mode = self.cfg.svd_mode;
        match self.cfg.method {
            Method::FedavgLora | Method::FedSmoothFactorAvg => {
                let averaged = aggregate_factor_average(uploads)?;
                let full = aggregate_full_rank(uploads)?;
                let eps = full
                    .iter()
                    .zip(&averaged)
                    .map(|(d, f)| Ok(d.sub(&f.product()?)?.frobenius_norm()))
                    .collect::<Result<Vec<f64>>>()?;
                if self.cfg.method == Method::FedavgLora {
                    replace_factors(&mut self.server, averaged)?;
                } else {
                    merge_backbone(&mut self.server, averaged)?;
                }
                Ok(eps)
            }
            Method::FrloraWeightSvd => {
                let base = frlora_base_factors(&self.server.backbones, t, &self.client_cfg, FrloraInit::WeightSvd)?;
                let delta = aggregate_full_rank(uploads)?
                    .iter()
                    .zip(&base)
                    .map(|(d, b)| d.sub(&b.product()?))
                    .collect::<Result<Vec<_>>>()?;
                let proj = project_rank_r(&delta, r, &mode)?;
                merge_backbone(&mut self.server, proj.factors)?;
                Ok(proj.eps_server)
            }
            _ => {
                let delta = aggregate_full_rank(uploads)?;
                let proj = project_rank_r(&delta, r, &mode)?;
                merge_backbone(&mut self.server, proj.factors)?;
                Ok(proj.eps_server)
            }
        }
    }

    /// Runs every remaining round.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while self.server.round < self.cfg.rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }

    /// Discrepancy report over the recorded transitions.
    pub fn verify(&mut self) -> Result<DiscrepancyReport> {
        if !self.keep_trace {
            return Err(Error::Verification(format!(
                "no trace recorded: verification needs `verification: true`, a method with round matching, \
                 and every layer dimension <= {VERIFY_MAX_DIM}"
            )));
        }
        if self.options.corrupt_trace {
            corrupt_trace(&mut self.trace);
        }
        verify_proposition(&self.trace, self.server.scale)
    }
}

/// The discrepancy identity needs the round-matching term.
pub fn verifiable(method: Method) -> bool {
    method.is_smooth() && !method.ablation().no_round_matching
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub final_accuracy: f64,
    pub boundary_jump: Option<f64>,
    pub partition_hash: u64,
    pub report: Option<DiscrepancyReport>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Runs all rounds and writes `metrics.csv`, `checkpoint.bin`,
/// `config.resolved.json` and, in verification mode, `discrepancy.csv`.
pub fn run_experiment(cfg: &RunConfig, out_dir: impl AsRef<Path>, options: RunOptions) -> Result<ExperimentOutcome> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut fed = Federation::new(cfg, options)?;
    let metrics = fed.run()?;

    let resolved_path = out_dir.join("config.resolved.json");
    std::fs::write(&resolved_path, cfg.resolved().to_json_pretty() + "\n").map_err(|e| Error::io(&resolved_path, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics(&metrics, &metrics_path)?;
    let checkpoint_path = out_dir.join("checkpoint.bin");
    save_checkpoint(&Checkpoint::from_server(&fed.server), &checkpoint_path)?;

    let report = if fed.records_trace() {
        let report = fed.verify()?;
        report.write(out_dir.join("discrepancy.csv"))?;
        Some(report)
    } else {
        None
    };
    let final_accuracy = match metrics.last() {
        Some(m) => m.eval_acc,
        None => fed.evaluate()?,
    };
    Ok(ExperimentOutcome {
        boundary_jump: boundary_jump(&metrics).ok(),
        final_accuracy,
        partition_hash: fed.partition_hash,
        report,
        metrics,
        metrics_path,
        checkpoint_path,
    })
}
