//! In-process federated training with per-client sample-level DP.
//!
//! Each global round broadcasts the model and the shared noise scale, runs
//! one local DP step per active client, averages the uploaded parameters
//! with weights `|D^k| / |D|`, validates the new global model, and feeds the
//! validation loss to the noise scheduler. Clients whose accumulated privacy
//! loss would exceed the budget stop uploading for good.
//!
//! The only value crossing the client/server boundary is [`Upload`], which
//! carries parameters and nothing else.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{
    self, AccountantError, DpGuarantee, PrivacyLedger, RdpOrderGrid, RoundCost, DEFAULT_DELTA,
};
use crate::datasets::{Dataset, Partition};
use crate::dpcore::{self, ClipConfig, ClipState, DpError, GaussianSampler};
use crate::scheduler::{SchedulerError, SigmaState};
use crate::smallmodel::{
    evaluate, per_sample_gradients, Example, Model, ModelError, OptimizerConfig, OptimizerState,
    ParamVector,
};

pub type ClientId = usize;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("no client uploaded this round")]
    NoUploads,
    #[error("client {0} is exhausted")]
    ClientExhausted(ClientId),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

pub type Result<T, E = FederationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClipMode {
    Adaptive(ClipConfig),
    Constant { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseMode {
    Adaptive { sigma0: f64, beta: f64 },
    /// `sigma = 0` disables noise; only valid with an infinite budget.
    Constant { sigma: f64 },
}

impl NoiseMode {
    pub fn initial_sigma(&self) -> f64 {
        match *self {
            NoiseMode::Adaptive { sigma0, .. } => sigma0,
            NoiseMode::Constant { sigma } => sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            delta: DEFAULT_DELTA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub lot_size: usize,
    pub clip: ClipMode,
    pub noise: NoiseMode,
    pub budget: Budget,
    pub rounds: u64,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub grid: RdpOrderGrid,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FederationError::Config(m.to_string()));
        if self.lot_size == 0 {
            return bad("lot_size must be at least 1");
        }
        match self.clip {
            ClipMode::Adaptive(c) => {
                ClipConfig::new(c.clip_factor, c.floor)?;
            }
            ClipMode::Constant { threshold } => {
                if !(threshold > 0.0 && threshold.is_finite()) {
                    return bad("constant clip threshold must be positive");
                }
            }
        }
        match self.noise {
            NoiseMode::Adaptive { sigma0, beta } => {
                SigmaState::new(sigma0, beta)?;
            }
            NoiseMode::Constant { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad("constant sigma must be nonnegative");
                }
                if sigma == 0.0 && self.budget.epsilon != f64::INFINITY {
                    return bad("sigma = 0 is non-private and needs an infinite epsilon budget");
                }
            }
        }
        if !(self.budget.epsilon > 0.0) {
            return bad("epsilon budget must be positive");
        }
        if !(self.budget.delta > 0.0 && self.budget.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(self.optimizer.learning_rate > 0.0 && self.optimizer.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientStatus {
    Active,
    Exhausted,
}

/// Client-to-server payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub client_id: ClientId,
    pub params: ParamVector,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    id: ClientId,
    data: Arc<Dataset>,
    indices: Vec<usize>,
    params: ParamVector,
    optimizer: OptimizerState,
    clip: ClipState,
    ledger: PrivacyLedger,
    /// Rounds run with `sigma = 0`; these have unbounded privacy loss.
    noiseless_rounds: u64,
    rng: GaussianSampler,
    status: ClientStatus,
    prev_norms: Option<Vec<f64>>,
    sigma_prev: f64,
}

impl ClientState {
    /// Builds client `id`; the adaptive initial threshold is drawn from the
    /// client's own stream before anything else.
    pub fn new(
        id: ClientId,
        data: Arc<Dataset>,
        indices: Vec<usize>,
        model: &dyn Model,
        initial: &ParamVector,
        cfg: &FederationConfig,
    ) -> Result<Self> {
        let mut rng = client_stream(cfg.seed, id);
        let sigma0 = cfg.noise.initial_sigma();
        let clip = match cfg.clip {
            ClipMode::Adaptive(c) => {
                dpcore::init_threshold(model, initial, &c, cfg.lot_size, sigma0, &mut rng)?
            }
            ClipMode::Constant { threshold } => ClipState {
                threshold,
                previous_sigma: sigma0,
            },
        };
        Ok(Self {
            id,
            data,
            indices,
            params: initial.clone(),
            optimizer: OptimizerState::new(cfg.optimizer, initial.len()),
            clip,
            ledger: PrivacyLedger::new(cfg.grid.clone()),
            noiseless_rounds: 0,
            rng,
            status: ClientStatus::Active,
            prev_norms: None,
            sigma_prev: sigma0,
        })
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn status(&self) -> ClientStatus {
        self.status
    }

    pub fn ledger(&self) -> &PrivacyLedger {
        &self.ledger
    }

    pub fn clip_state(&self) -> &ClipState {
        &self.clip
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn shard_len(&self) -> usize {
        self.indices.len()
    }

    /// `L / |D^k|`, capped at one.
    pub fn sampling_ratio(&self, lot_size: usize) -> f64 {
        if self.indices.is_empty() {
            1.0
        } else {
            (lot_size as f64 / self.indices.len() as f64).min(1.0)
        }
    }

    /// Current DP guarantee over the completed rounds.
    pub fn guarantee(&self, delta: f64) -> Result<DpGuarantee> {
        if self.noiseless_rounds > 0 {
            return Ok(DpGuarantee {
                epsilon: f64::INFINITY,
                delta,
                best_order: 0,
            });
        }
        Ok(self.ledger.to_dp(delta)?)
    }

    /// Poisson lot: every local example is kept independently with
    /// probability `q`, visited in index order.
    pub fn sample_lot(&mut self, q: f64) -> Vec<&Example> {
        poisson_sample(&self.data, &self.indices, q, &mut self.rng)
    }
}

fn poisson_sample<'a>(
    data: &'a Dataset,
    indices: &[usize],
    q: f64,
    rng: &mut GaussianSampler,
) -> Vec<&'a Example> {
    indices
        .iter()
        .filter(|_| rng.random::<f64>() < q)
        .map(|&i| &data.examples[i])
        .collect()
}

/// Stream `id + 1` of the master seed; stream 0 belongs to the server.
pub fn client_stream(seed: u64, id: ClientId) -> GaussianSampler {
    GaussianSampler::with_stream(seed, id as u64 + 1)
}

pub fn server_stream(seed: u64) -> GaussianSampler {
    GaussianSampler::with_stream(seed, 0)
}

/// Per-client metrics of one completed local round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: ClientId,
    pub q: f64,
    pub eps_dp: f64,
    pub best_order: u32,
    pub sigma: f64,
    pub clip_threshold: f64,
    pub realized_lot: usize,
    /// Mean loss over the lot; NaN for an empty lot.
    pub train_loss: f64,
}

/// One local DP round. Returns `None` and marks the client exhausted when
/// this round would push it over the budget; that round is discarded, so the
/// ledger only ever holds uploaded rounds.
pub fn client_round(
    client: &mut ClientState,
    model: &dyn Model,
    global: &ParamVector,
    sigma_t: f64,
    cfg: &FederationConfig,
) -> Result<Option<(Upload, ClientRoundStats)>> {
    if client.status == ClientStatus::Exhausted {
        return Err(FederationError::ClientExhausted(client.id));
    }
    let lot_size = cfg.lot_size;
    let q = client.sampling_ratio(lot_size);

    // The charge depends only on (q, sigma_t), so the budget gate can be
    // evaluated before the local step without changing any upload.
    let (ledger, noiseless_rounds) = if sigma_t > 0.0 {
        (
            accountant::accumulate(&client.ledger, RoundCost::new(q, sigma_t)?)?,
            client.noiseless_rounds,
        )
    } else {
        (client.ledger.clone(), client.noiseless_rounds + 1)
    };
    let guarantee = if noiseless_rounds > 0 {
        DpGuarantee {
            epsilon: f64::INFINITY,
            delta: cfg.budget.delta,
            best_order: 0,
        }
    } else {
        ledger.to_dp(cfg.budget.delta)?
    };
    if guarantee.epsilon > cfg.budget.epsilon {
        client.status = ClientStatus::Exhausted;
        return Ok(None);
    }

    client.params = global.clone();
    let data = client.data.clone();
    let ClientState {
        indices,
        rng,
        params,
        optimizer,
        clip,
        prev_norms,
        sigma_prev,
        ..
    } = client;
    let lot = poisson_sample(&data, indices, q, rng);
    // Threshold noise is drawn before any gradient noise.
    let threshold = match (cfg.clip, prev_norms.as_deref()) {
        (ClipMode::Constant { threshold }, _) => threshold,
        (ClipMode::Adaptive(_), None) => clip.threshold,
        (ClipMode::Adaptive(c), Some(norms)) => {
            dpcore::next_threshold(norms, clip, &c, *sigma_prev, lot_size, rng)?.threshold
        }
    };

    let (clipped, norms, train_loss) = if lot.is_empty() {
        (Vec::new(), Vec::new(), f64::NAN)
    } else {
        let per = per_sample_gradients(model, params, &lot)?;
        let mut norms = Vec::with_capacity(lot.len());
        let mut clipped = per.gradients;
        for g in &mut clipped {
            norms.push(dpcore::clip_in_place(g, threshold)?);
        }
        let loss = per.losses.iter().sum::<f64>() / per.losses.len() as f64;
        (clipped, norms, loss)
    };
    let noisy = dpcore::noisy_mean(&clipped, params.shape(), threshold, sigma_t, lot_size, rng)?;
    optimizer.step(params, &noisy)?;

    *clip = ClipState {
        threshold,
        previous_sigma: sigma_t,
    };
    *prev_norms = Some(norms);
    *sigma_prev = sigma_t;
    client.ledger = ledger;
    client.noiseless_rounds = noiseless_rounds;

    let stats = ClientRoundStats {
        client_id: client.id,
        q,
        eps_dp: guarantee.epsilon,
        best_order: guarantee.best_order,
        sigma: sigma_t,
        clip_threshold: threshold,
        realized_lot: lot.len(),
        train_loss,
    };
    let upload = Upload {
        client_id: client.id,
        params: client.params.clone(),
    };
    Ok(Some((upload, stats)))
}

/// Weighted average of the uploads, with weights renormalized over the
/// uploading clients. Uploads are summed in client-id order.
pub fn aggregate(uploads: &[Upload], weights: &[f64]) -> Result<ParamVector> {
    let (sorted, norm) = renormalized_weights(uploads, weights)?;
    let mut out = ParamVector::zeros(sorted[0].params.shape().clone());
    for (u, w) in sorted.iter().zip(norm) {
        out.axpy(w, &u.params)?;
    }
    Ok(out)
}

/// Uploads sorted by client id with their renormalized weights.
pub fn renormalized_weights<'a>(
    uploads: &'a [Upload],
    weights: &[f64],
) -> Result<(Vec<&'a Upload>, Vec<f64>)> {
    if uploads.is_empty() {
        return Err(FederationError::NoUploads);
    }
    let mut sorted: Vec<&Upload> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let raw: Vec<f64> = sorted
        .iter()
        .map(|u| {
            weights.get(u.client_id).copied().ok_or_else(|| {
                FederationError::Config(format!("no weight for client {}", u.client_id))
            })
        })
        .collect::<Result<_>>()?;
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(FederationError::Config("uploading clients have zero total weight".into()));
    }
    Ok((sorted, raw.into_iter().map(|w| w / total).collect()))
}

/// Server-held noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseSchedule {
    Adaptive(SigmaState),
    Constant(f64),
}

impl NoiseSchedule {
    pub fn from_mode(mode: NoiseMode) -> Result<Self> {
        Ok(match mode {
            NoiseMode::Adaptive { sigma0, beta } => Self::Adaptive(SigmaState::new(sigma0, beta)?),
            NoiseMode::Constant { sigma } => Self::Constant(sigma),
        })
    }

    pub fn current_sigma(&self) -> f64 {
        match self {
            Self::Adaptive(s) => s.current_sigma(),
            Self::Constant(s) => *s,
        }
    }

    pub fn observe_loss(&mut self, loss: f64) -> Result<()> {
        if let Self::Adaptive(s) = self {
            s.observe_loss(loss)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ParamVector,
    pub noise: NoiseSchedule,
    pub weights: Vec<f64>,
    pub round: u64,
}

/// Metrics of one completed global round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    /// Uploading clients only, in id order.
    pub clients: Vec<ClientRoundStats>,
    pub val_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: ClientId,
    pub rounds: u64,
    pub status: ClientStatus,
    pub guarantee: DpGuarantee,
}

pub struct Federation {
    cfg: FederationConfig,
    model: Arc<dyn Model>,
    clients: Vec<ClientState>,
    server: ServerState,
    validation: Dataset,
    test: Dataset,
    finished: bool,
}

impl Federation {
    pub fn new(
        cfg: FederationConfig,
        model: Arc<dyn Model>,
        train: Arc<Dataset>,
        partition: &Partition,
        validation: Dataset,
        test: Dataset,
    ) -> Result<Self> {
        cfg.validate()?;
        if partition.clients.is_empty() {
            return Err(FederationError::Config("partition has no clients".into()));
        }
        if validation.is_empty() || test.is_empty() {
            return Err(FederationError::Config("validation and test sets must be nonempty".into()));
        }
        let initial = model.init_params(&mut server_stream(cfg.seed));
        let total: usize = partition.clients.iter().map(Vec::len).sum();
        if total == 0 {
            return Err(FederationError::Config("partition holds no examples".into()));
        }
        let weights = partition
            .clients
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect();
        let clients = partition
            .clients
            .iter()
            .enumerate()
            .map(|(id, idx)| ClientState::new(id, train.clone(), idx.clone(), model.as_ref(), &initial, &cfg))
            .collect::<Result<_>>()?;
        let server = ServerState {
            global: initial,
            noise: NoiseSchedule::from_mode(cfg.noise)?,
            weights,
            round: 0,
        };
        Ok(Self {
            cfg,
            model,
            clients,
            server,
            validation,
            test,
            finished: false,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn global(&self) -> &ParamVector {
        &self.server.global
    }

    pub fn is_finished(&self) -> bool {
        self.finished || self.server.round >= self.cfg.rounds
    }

    /// Runs one global round; `None` once the round limit is reached or no
    /// client can upload any more.
    pub fn step(&mut self) -> Result<Option<RoundRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let sigma_t = self.server.noise.current_sigma();
        let global = &self.server.global;
        let model = self.model.as_ref();
        let cfg = &self.cfg;
        let results: Vec<Option<(Upload, ClientRoundStats)>> = self
            .clients
            .par_iter_mut()
            .filter(|c| c.status == ClientStatus::Active)
            .map(|c| client_round(c, model, global, sigma_t, cfg))
            .collect::<Result<_>>()?;
        let (uploads, stats): (Vec<Upload>, Vec<ClientRoundStats>) = results.into_iter().flatten().unzip();
        if uploads.is_empty() {
            self.finished = true;
            return Ok(None);
        }
        self.server.global = aggregate(&uploads, &self.server.weights)?;
        let val = evaluate(model, &self.server.global, &self.validation.examples)?;
        let test = evaluate(model, &self.server.global, &self.test.examples)?;
        self.server.noise.observe_loss(val.loss)?;
        let record = RoundRecord {
            round: self.server.round,
            clients: stats,
            val_loss: val.loss,
            test_acc: test.accuracy,
        };
        self.server.round += 1;
        Ok(Some(record))
    }

    /// Runs to completion, handing each record to `on_record` as it is made.
    pub fn run_with<F>(&mut self, mut on_record: F) -> Result<Vec<RoundRecord>>
    where
        F: FnMut(&RoundRecord) -> Result<()>,
    {
        let mut records = Vec::new();
        while let Some(r) = self.step()? {
            on_record(&r)?;
            if r.round % 100 == 0 {
                log::info!(
                    "round {} sigma {:.4} val_loss {:.4} test_acc {:.4} uploads {}",
                    r.round,
                    r.clients.first().map_or(f64::NAN, |c| c.sigma),
                    r.val_loss,
                    r.test_acc,
                    r.clients.len()
                );
            }
            records.push(r);
        }
        Ok(records)
    }

    pub fn summaries(&self) -> Result<Vec<ClientSummary>> {
        self.clients
            .iter()
            .map(|c| {
                Ok(ClientSummary {
                    client_id: c.id,
                    rounds: c.ledger.rounds() + c.noiseless_rounds,
                    status: c.status,
                    guarantee: c.guarantee(self.cfg.budget.delta)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
    pub clients: Vec<ClientSummary>,
}

/// Builds a federation and runs it to completion.
pub fn run(
    cfg: FederationConfig,
    model: Arc<dyn Model>,
    train: Arc<Dataset>,
    partition: &Partition,
    validation: Dataset,
    test: Dataset,
) -> Result<RunOutput> {
    let mut fed = Federation::new(cfg, model, train, partition, validation, test)?;
    let records = fed.run_with(|_| Ok(()))?;
    Ok(RunOutput {
        records,
        final_params: fed.global().clone(),
        clients: fed.summaries()?,
    })
}

/// Replays the `(q, sigma)` history through a fresh ledger and returns the
/// resulting epsilon.
pub fn replay_epsilon(history: &[(f64, f64)], grid: &RdpOrderGrid, delta: f64) -> Result<f64> {
    let mut ledger = PrivacyLedger::new(grid.clone());
    for &(q, sigma) in history {
        if sigma == 0.0 {
            return Ok(f64::INFINITY);
        }
        ledger.record(RoundCost::new(q, sigma)?)?;
    }
    Ok(ledger.to_dp(delta)?.epsilon)
}
