//! Client-side local update.
//!
//! [`local_update`] runs the smoothed pipeline, in this order:
//!
//! 1. merge the broadcast server factors into the local backbone (skipped in round 0),
//! 2. build the round-matching matrix `B_prev A_prev - sum(B_s A_s)`,
//! 3. sample a calibration batch and take the full-weight gradient at the merged backbone,
//! 4. rebuild it as `sqrt(d_out) / gamma^2 * U[:, r..2r] V[:, ..r]^T`,
//! 5. `W_init = W_ga_hat + zeta * W_rm`, factorized to rank `r`,
//! 6. train those factors against the backbone shifted by `-s * W_ga_hat`,
//! 7. upload the rank-`r` projection of `B~ A~ - W_ga_hat`.
//!
//! The baseline clients ([`local_update_fedavg`], [`local_update_frlora`])
//! live here too so all variants share the same bookkeeping.

use std::f64::consts::PI;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{svd_approx, svd_exact, FactorPair, Matrix, SvdMode};
use crate::lora::{kaiming_uniform, rslora_scale, LoraAdapter};
use crate::model::{loss_and_gradients, train_local, Batch, ModelSpec, RoundClock, TrainConfig};
use crate::seed::{self, Purpose};

/// Federated protocol variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "fedsmooth")]
    FedSmooth,
    FedavgLora,
    FrloraFresh,
    FrloraWeightSvd,
    #[serde(rename = "fedsmooth_no_rm")]
    FedSmoothNoRm,
    #[serde(rename = "fedsmooth_no_ga")]
    FedSmoothNoGa,
    #[serde(rename = "fedsmooth_factor_avg")]
    FedSmoothFactorAvg,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FedSmooth,
        Method::FedavgLora,
        Method::FrloraFresh,
        Method::FrloraWeightSvd,
        Method::FedSmoothNoRm,
        Method::FedSmoothNoGa,
        Method::FedSmoothFactorAvg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedSmooth => "fedsmooth",
            Method::FedavgLora => "fedavg_lora",
            Method::FrloraFresh => "frlora_fresh",
            Method::FrloraWeightSvd => "frlora_weight_svd",
            Method::FedSmoothNoRm => "fedsmooth_no_rm",
            Method::FedSmoothNoGa => "fedsmooth_no_ga",
            Method::FedSmoothFactorAvg => "fedsmooth_factor_avg",
        }
    }

    /// Runs the smoothed client pipeline (possibly ablated).
    pub fn is_smooth(self) -> bool {
        matches!(
            self,
            Method::FedSmooth | Method::FedSmoothNoRm | Method::FedSmoothNoGa | Method::FedSmoothFactorAvg
        )
    }

    /// Server factors are merged into the backbone every round.
    pub fn merges_backbone(self) -> bool {
        self != Method::FedavgLora
    }

    pub fn ablation(self) -> Ablation {
        Ablation {
            no_round_matching: self == Method::FedSmoothNoRm,
            no_gradient_aligned: self == Method::FedSmoothNoGa,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Switches that zero out one initialization component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_round_matching: bool,
    pub no_gradient_aligned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZetaMode {
    Constant,
    Decay,
}

/// Round-matching weight: 1 in constant mode; cosine from 1 down to 0.6 in decay mode.
pub fn zeta_value(t: usize, t_total: usize, mode: ZetaMode) -> f64 {
    match mode {
        ZetaMode::Constant => 1.0,
        ZetaMode::Decay if t_total <= 1 => 1.0,
        ZetaMode::Decay => 0.6 + 0.4 * (1.0 + (PI * t as f64 / (t_total - 1) as f64).cos()) / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrloraInit {
    Fresh,
    WeightSvd,
}

/// Everything a client needs to run one round, shared by all clients.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub spec: ModelSpec,
    pub rank: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub zeta_mode: ZetaMode,
    pub total_rounds: usize,
    pub calib_batch_size: usize,
    pub train: TrainConfig,
    pub svd_mode: SvdMode,
    pub seed: u64,
    pub ablation: Ablation,
}

impl ClientConfig {
    pub fn scale(&self) -> f64 {
        rslora_scale(self.alpha, self.rank)
    }

    fn clock(&self, t: usize) -> RoundClock {
        RoundClock::new(t, self.total_rounds)
    }
}

/// Per-client state carried across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Local backbone `W_c`, one matrix per layer.
    pub backbones: Vec<Matrix>,
    /// Factors uploaded at the last active round.
    pub prev_factors: Option<Vec<FactorPair>>,
    pub last_active_round: Option<usize>,
    /// Server broadcasts received since the last active round, oldest first.
    pub pending_server_updates: Vec<Vec<FactorPair>>,
    pub dataset: LabeledDataset,
}

impl ClientState {
    pub fn new(id: usize, backbones: Vec<Matrix>, dataset: LabeledDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(ClientState {
            id,
            backbones,
            prev_factors: None,
            last_active_round: None,
            pending_server_updates: Vec::new(),
            dataset,
        })
    }

    /// `n_c`.
    pub fn size(&self) -> usize {
        self.dataset.len()
    }

    /// Stores a broadcast the client did not act on.
    pub fn record_missed_round(&mut self, server_factors: &[FactorPair]) {
        self.pending_server_updates.push(server_factors.to_vec());
    }
}

fn check_layers<T>(what: &'static str, got: &[T], expected: usize) -> Result<()> {
    if got.len() != expected {
        return Err(Error::Shape {
            op: what,
            lhs: (got.len(), 0),
            rhs: (expected, 0),
        });
    }
    Ok(())
}

/// `W_c += s B_s A_s` for every layer.
pub fn merge_server_update(state: &mut ClientState, server_factors: &[FactorPair], scale: f64) -> Result<()> {
    check_layers("merge_server_update", server_factors, state.backbones.len())?;
    for (w, f) in state.backbones.iter_mut().zip(server_factors) {
        w.add_scaled_assign(scale, &f.product()?)?;
    }
    Ok(())
}

fn zeros_like(backbones: &[Matrix]) -> Result<Vec<Matrix>> {
    backbones.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect()
}

/// `B_prev A_prev - B_s A_s`; zero when the client has never uploaded.
pub fn build_round_matching(state: &ClientState, server_factors: &[FactorPair]) -> Result<Vec<Matrix>> {
    let Some(prev) = &state.prev_factors else {
        return zeros_like(&state.backbones);
    };
    check_layers("build_round_matching", server_factors, prev.len())?;
    prev.iter()
        .zip(server_factors)
        .map(|(p, s)| p.product()?.sub(&s.product()?))
        .collect()
}

/// `B_prev A_prev - sum_tau B_s^tau A_s^tau` over broadcasts received since the last active round.
pub fn build_round_matching_partial(state: &ClientState, pending: &[Vec<FactorPair>]) -> Result<Vec<Matrix>> {
    let prev = state.prev_factors.as_ref().ok_or_else(|| {
        Error::Data(format!(
            "client {} has no retained factors for partial round matching",
            state.id
        ))
    })?;
    let sums = sum_products(pending, prev.len())?;
    prev.iter()
        .enumerate()
        .map(|(l, p)| {
            let own = p.product()?;
            match &sums {
                Some(s) => own.sub(&s[l]),
                None => Ok(own),
            }
        })
        .collect()
}

/// Layer-wise `sum_tau B^tau A^tau`, accumulated oldest first. `None` for an empty list.
fn sum_products(pending: &[Vec<FactorPair>], layers: usize) -> Result<Option<Vec<Matrix>>> {
    let mut iter = pending.iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    check_layers("pending server update", first, layers)?;
    let mut sums: Vec<Matrix> = first.iter().map(FactorPair::product).collect::<Result<_>>()?;
    for entry in iter {
        check_layers("pending server update", entry, layers)?;
        for (s, f) in sums.iter_mut().zip(entry) {
            *s = s.add(&f.product()?)?;
        }
    }
    Ok(Some(sums))
}

/// Full-weight gradients at the bare backbones (no adapter attached).
pub fn build_gradient_aligned(spec: &ModelSpec, backbones: &[Matrix], calib_batch: &Batch) -> Result<Vec<Matrix>> {
    if calib_batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(loss_and_gradients(spec, backbones, calib_batch)?.1)
}

/// `sqrt(d_out) / gamma^2 * U[:, r..2r] V[:, ..r]^T` from the SVD of `w_ga`.
pub fn reconstruct_gradient_aligned(w_ga: &Matrix, r: usize, gamma: f64) -> Result<Matrix> {
    let (rows, cols) = w_ga.shape();
    let max = rows.min(cols) / 2;
    if r == 0 || r > max {
        return Err(Error::GradientAlignedRank {
            rank: r,
            rows,
            cols,
            max,
        });
    }
    let svd = svd_exact(w_ga)?;
    let u2 = svd.u.columns(r, 2 * r)?;
    let v1 = svd.v.columns(0, r)?;
    let coef = (rows as f64).sqrt() / (gamma * gamma);
    u2.matmul(&v1.transpose())?.scaled(coef)
}

/// Rank used for the gradient-aligned term of a layer: `min(r, min(m, n) / 2)`.
pub fn gradient_aligned_rank(rows: usize, cols: usize, r: usize) -> usize {
    r.min(rows.min(cols) / 2)
}

/// Step of the local pipeline, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineStep {
    MergeServerUpdate,
    RoundMatching,
    CalibrationBatch,
    GradientEstimate,
    GradientAlignedReconstruction,
    Zeta,
    InitMatrix,
    InitFactors,
    Train,
    UploadProjection,
}

/// Intermediates of one smoothed local update, one entry per layer.
#[derive(Debug, Clone)]
pub struct ClientRoundContext {
    pub round: usize,
    pub client_id: usize,
    /// Merged backbone `W_c^t`.
    pub backbone: Vec<Matrix>,
    /// `sum B_s A_s` over the broadcasts merged this round; `None` in round 0.
    pub server_sum: Option<Vec<Matrix>>,
    pub w_rm: Vec<Matrix>,
    pub w_ga: Vec<Matrix>,
    pub w_ga_hat: Vec<Matrix>,
    pub zeta: f64,
    pub w_init: Vec<Matrix>,
    pub init_factors: Vec<FactorPair>,
    /// Factors at the end of local training, before the upload projection.
    pub trained_factors: Vec<FactorPair>,
    pub upload: Vec<FactorPair>,
    /// `B_init A_init - W_init`.
    pub eps_init: Vec<Matrix>,
    /// `B_c A_c - (B~ A~ - W_ga_hat)`.
    pub eps_end: Vec<Matrix>,
    pub eps_init_norm: Vec<f64>,
    pub eps_end_norm: Vec<f64>,
    pub trace: Vec<PipelineStep>,
}

/// What a client sends back, plus diagnostics.
#[derive(Debug, Clone)]
pub struct ClientOutput {
    pub client_id: usize,
    pub upload: Vec<FactorPair>,
    pub losses: Vec<f64>,
    /// Present for the smoothed variants.
    pub context: Option<ClientRoundContext>,
}

fn calibration_batch(state: &ClientState, t: usize, cfg: &ClientConfig) -> Result<Batch> {
    let n = state.size();
    let mut rng = seed::stream(cfg.seed, Purpose::Calibration, &[state.id as u64, t as u64]);
    let idx: Vec<usize> = if n >= cfg.calib_batch_size {
        let mut v = sample(&mut rng, n, cfg.calib_batch_size).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    state.dataset.batch(&idx)
}

/// Merges every pending broadcast and returns their summed products.
fn catch_up(
    state: &mut ClientState,
    server_factors: &[FactorPair],
    t: usize,
    scale: f64,
) -> Result<Option<Vec<Matrix>>> {
    if t == 0 {
        state.pending_server_updates.clear();
        return Ok(None);
    }
    state.pending_server_updates.push(server_factors.to_vec());
    let pending = std::mem::take(&mut state.pending_server_updates);
    for entry in &pending {
        merge_server_update(state, entry, scale)?;
    }
    let sums = sum_products(&pending, state.backbones.len())?;
    state.pending_server_updates = pending;
    Ok(sums)
}

/// Gives numerically dead rank directions (zero column of `B` and zero row
/// of `A`) a Kaiming row in `A`. The product `B A` is unchanged bit for bit.
fn revive_dead_directions(factors: &mut FactorPair, rng: &mut impl rand::Rng) -> Result<()> {
    let r = factors.rank();
    let n = factors.a.cols();
    let dead: Vec<usize> = (0..r)
        .filter(|&j| factors.b.column(j).iter().all(|&v| v == 0.0) && factors.a.row(j).iter().all(|&v| v == 0.0))
        .collect();
    if dead.is_empty() {
        return Ok(());
    }
    let fresh = kaiming_uniform(dead.len(), n, rng)?;
    let mut a = factors.a.data().to_vec();
    for (k, &j) in dead.iter().enumerate() {
        a[j * n..(j + 1) * n].copy_from_slice(fresh.row(k));
    }
    factors.a = Matrix::new(r, n, a)?;
    Ok(())
}

/// One round of the smoothed client pipeline.
pub fn local_update(
    state: &mut ClientState,
    server_factors: &[FactorPair],
    t: usize,
    cfg: &ClientConfig,
) -> Result<ClientOutput> {
    let layers = state.backbones.len();
    check_layers("local_update", server_factors, layers)?;
    let s = cfg.scale();
    let mut trace = Vec::with_capacity(10);

    // Merge, then round matching.
    let server_sum = catch_up(state, server_factors, t, s)?;
    if t > 0 {
        trace.push(PipelineStep::MergeServerUpdate);
    }
    let w_rm = if cfg.ablation.no_round_matching || t == 0 || state.prev_factors.is_none() {
        zeros_like(&state.backbones)?
    } else {
        build_round_matching_partial(state, &state.pending_server_updates)?
    };
    state.pending_server_updates.clear();
    trace.push(PipelineStep::RoundMatching);

    // Gradient-aligned term.
    let calib = calibration_batch(state, t, cfg)?;
    trace.push(PipelineStep::CalibrationBatch);
    let w_ga = if cfg.ablation.no_gradient_aligned {
        zeros_like(&state.backbones)?
    } else {
        build_gradient_aligned(&cfg.spec, &state.backbones, &calib)?
    };
    trace.push(PipelineStep::GradientEstimate);
    let w_ga_hat: Vec<Matrix> = w_ga
        .iter()
        .map(|g| {
            let r_ga = gradient_aligned_rank(g.rows(), g.cols(), cfg.rank);
            if cfg.ablation.no_gradient_aligned || r_ga == 0 {
                Matrix::zeros(g.rows(), g.cols())
            } else {
                reconstruct_gradient_aligned(g, r_ga, cfg.gamma)
            }
        })
        .collect::<Result<_>>()?;
    trace.push(PipelineStep::GradientAlignedReconstruction);

    let zeta = zeta_value(t, cfg.total_rounds, cfg.zeta_mode);
    trace.push(PipelineStep::Zeta);
    let w_init: Vec<Matrix> = w_ga_hat
        .iter()
        .zip(&w_rm)
        .map(|(g, rm)| g.add_scaled(zeta, rm))
        .collect::<Result<_>>()?;
    trace.push(PipelineStep::InitMatrix);

    let mut init_rng = seed::stream(cfg.seed, Purpose::AdapterInit, &[state.id as u64 + 1, t as u64]);
    let mut init_factors = Vec::with_capacity(layers);
    for w in &w_init {
        let mut f = svd_approx(w, cfg.rank, &cfg.svd_mode)?;
        revive_dead_directions(&mut f, &mut init_rng)?;
        init_factors.push(f);
    }
    trace.push(PipelineStep::InitFactors);

    // Train against the shifted backbone.
    let shifted: Vec<Matrix> = state
        .backbones
        .iter()
        .zip(&w_ga_hat)
        .map(|(w, g)| w.add_scaled(-s, g))
        .collect::<Result<_>>()?;
    let adapters: Vec<LoraAdapter> = init_factors
        .iter()
        .cloned()
        .map(|f| LoraAdapter::from_factors(f, cfg.alpha))
        .collect::<Result<_>>()?;
    let mut train_rng = seed::stream(cfg.seed, Purpose::Training, &[state.id as u64, t as u64]);
    let outcome = train_local(
        &cfg.spec,
        &shifted,
        adapters,
        &state.dataset,
        &cfg.train,
        cfg.clock(t),
        &mut train_rng,
    )?;
    trace.push(PipelineStep::Train);
    let trained_factors: Vec<FactorPair> = outcome.adapters.into_iter().map(LoraAdapter::into_factors).collect();

    // Upload projection.
    let mut upload = Vec::with_capacity(layers);
    let mut eps_end = Vec::with_capacity(layers);
    for (tf, g) in trained_factors.iter().zip(&w_ga_hat) {
        let target = tf.product()?.sub(g)?;
        let f = svd_approx(&target, cfg.rank, &cfg.svd_mode)?;
        eps_end.push(f.product()?.sub(&target)?);
        upload.push(f);
    }
    trace.push(PipelineStep::UploadProjection);

    let eps_init: Vec<Matrix> = init_factors
        .iter()
        .zip(&w_init)
        .map(|(f, w)| f.product()?.sub(w))
        .collect::<Result<_>>()?;

    state.prev_factors = Some(upload.clone());
    state.last_active_round = Some(t);

    let context = ClientRoundContext {
        round: t,
        client_id: state.id,
        backbone: state.backbones.clone(),
        server_sum,
        w_rm,
        w_ga,
        w_ga_hat,
        zeta,
        w_init,
        init_factors,
        trained_factors,
        upload: upload.clone(),
        eps_init_norm: eps_init.iter().map(Matrix::frobenius_norm).collect(),
        eps_end_norm: eps_end.iter().map(Matrix::frobenius_norm).collect(),
        eps_init,
        eps_end,
        trace,
    };
    Ok(ClientOutput {
        client_id: state.id,
        upload,
        losses: outcome.losses,
        context: Some(context),
    })
}

/// Baseline: start from the broadcast factors on a frozen backbone and
/// upload the trained factors as they are.
pub fn local_update_fedavg(
    state: &mut ClientState,
    server_factors: &[FactorPair],
    t: usize,
    cfg: &ClientConfig,
) -> Result<ClientOutput> {
    check_layers("local_update_fedavg", server_factors, state.backbones.len())?;
    state.pending_server_updates.clear();
    let adapters: Vec<LoraAdapter> = server_factors
        .iter()
        .cloned()
        .map(|f| LoraAdapter::from_factors(f, cfg.alpha))
        .collect::<Result<_>>()?;
    let mut rng = seed::stream(cfg.seed, Purpose::Training, &[state.id as u64, t as u64]);
    let outcome = train_local(
        &cfg.spec,
        &state.backbones,
        adapters,
        &state.dataset,
        &cfg.train,
        cfg.clock(t),
        &mut rng,
    )?;
    let upload: Vec<FactorPair> = outcome.adapters.into_iter().map(LoraAdapter::into_factors).collect();
    state.prev_factors = Some(upload.clone());
    state.last_active_round = Some(t);
    Ok(ClientOutput {
        client_id: state.id,
        upload,
        losses: outcome.losses,
        context: None,
    })
}

/// Shared fresh adapter `A` for a round: identical across clients, and in
/// round 0 identical to the server's initial `A`.
pub fn round_kaiming_a(seed_base: u64, t: usize, layer: usize, rank: usize, fan_in: usize) -> Result<Matrix> {
    let mut rng = seed::stream(seed_base, Purpose::AdapterInit, &[0, t as u64, layer as u64]);
    kaiming_uniform(rank, fan_in, &mut rng)
}

/// Client-agnostic starting factors for the merge-and-reset baseline.
pub fn frlora_base_factors(
    backbones: &[Matrix],
    t: usize,
    cfg: &ClientConfig,
    mode: FrloraInit,
) -> Result<Vec<FactorPair>> {
    backbones
        .iter()
        .enumerate()
        .map(|(l, w)| match mode {
            FrloraInit::Fresh => FactorPair::new(
                Matrix::zeros(w.rows(), cfg.rank)?,
                round_kaiming_a(cfg.seed, t, l, cfg.rank, w.cols())?,
            ),
            FrloraInit::WeightSvd => svd_approx(w, cfg.rank, &cfg.svd_mode),
        })
        .collect()
}

/// Baseline: merge the broadcast into the backbone, restart adapters from a
/// client-agnostic init (fresh Kaiming, or the rank-`r` SVD of the merged
/// weight with that part moved out of the backbone), train, upload raw factors.
pub fn local_update_frlora(
    state: &mut ClientState,
    server_factors: &[FactorPair],
    t: usize,
    cfg: &ClientConfig,
    mode: FrloraInit,
) -> Result<ClientOutput> {
    check_layers("local_update_frlora", server_factors, state.backbones.len())?;
    let s = cfg.scale();
    catch_up(state, server_factors, t, s)?;
    state.pending_server_updates.clear();

    let base = frlora_base_factors(&state.backbones, t, cfg, mode)?;
    let shifted: Vec<Matrix> = match mode {
        FrloraInit::Fresh => state.backbones.clone(),
        FrloraInit::WeightSvd => state
            .backbones
            .iter()
            .zip(&base)
            .map(|(w, f)| w.add_scaled(-s, &f.product()?))
            .collect::<Result<_>>()?,
    };
    let adapters: Vec<LoraAdapter> = base
        .into_iter()
        .map(|f| LoraAdapter::from_factors(f, cfg.alpha))
        .collect::<Result<_>>()?;
    let mut rng = seed::stream(cfg.seed, Purpose::Training, &[state.id as u64, t as u64]);
    let outcome = train_local(
        &cfg.spec,
        &shifted,
        adapters,
        &state.dataset,
        &cfg.train,
        cfg.clock(t),
        &mut rng,
    )?;
    let upload: Vec<FactorPair> = outcome.adapters.into_iter().map(LoraAdapter::into_factors).collect();
    state.prev_factors = Some(upload.clone());
    state.last_active_round = Some(t);
    Ok(ClientOutput {
        client_id: state.id,
        upload,
        losses: outcome.losses,
        context: None,
    })
}

/// Dispatches to the client routine for `method`.
pub fn run_client(
    method: Method,
    state: &mut ClientState,
    server_factors: &[FactorPair],
    t: usize,
    cfg: &ClientConfig,
) -> Result<ClientOutput> {
    match method {
        Method::FedavgLora => local_update_fedavg(state, server_factors, t, cfg),
        Method::FrloraFresh => local_update_frlora(state, server_factors, t, cfg, FrloraInit::Fresh),
        Method::FrloraWeightSvd => local_update_frlora(state, server_factors, t, cfg, FrloraInit::WeightSvd),
        _ => local_update(state, server_factors, t, cfg),
    }
}
