//! Round orchestration: partial participation, seeded local training,
//! history upload, weighted aggregation and probability refresh. Also hosts
//! the backprop FedAvg and FedZO comparators.
//!
//! All server↔client state goes through the [`crate::wire`] codecs, so the
//! clients see exactly the narrowed f32 values that were counted as traffic.
//! Randomness is keyed by `(master_seed, round, client)`, which makes a run a
//! pure function of its config and data, independent of thread scheduling.

use std::time::Instant;

use log::warn;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate_loss, exact_gradient, init_params, predict, DataInstance, Label, ModelSpec, ParamVector};
use crate::rng::{derive_seed, stream, tag};
use crate::seed_state::{
    init_pool, reconstruct_in_place, update_probabilities, GradAccumulator, GradHistory, SeedPool, SeedProbabilities,
    SeedSampler,
};
use crate::wire::{decode_downlink, decode_uplink, downlink_len, encode_downlink, encode_uplink, DownlinkMsg, UplinkMsg};
use crate::zoo::{scalar_gradient_one_point, scalar_gradient_two_point, step_update, ZooConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FLConfig {
    pub num_clients: usize,
    /// Fraction of clients active per round, in (0, 1].
    pub participation_ratio: f64,
    /// Local steps per client per round.
    pub tau: usize,
    pub rounds: usize,
    /// Candidate seed count.
    pub k: usize,
    pub zoo: ZooConfig,
    /// Sample seeds from the importance distribution instead of uniformly.
    pub pro_mode: bool,
    pub master_seed: u64,
    /// Reset the per-seed |ĝ| statistics every round instead of keeping them
    /// cumulative.
    pub reset_statistics_each_round: bool,
}

impl FLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("need at least one client".into()));
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "participation ratio {} outside (0, 1]",
                self.participation_ratio
            )));
        }
        if self.tau == 0 || self.rounds == 0 || self.k == 0 {
            return Err(Error::Config("tau, rounds and K must be positive".into()));
        }
        self.zoo.validate()
    }

    pub fn active_count(&self) -> usize {
        active_count(self.num_clients, self.participation_ratio)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub dataset: Vec<DataInstance>,
    pub aggregate_weight: f64,
}

impl ClientState {
    pub fn new(id: usize, dataset: Vec<DataInstance>) -> Self {
        Self { id, dataset, aggregate_weight: 0.0 }
    }
}

/// Builds client states from per-client datasets (ids are positions).
pub fn clients_from_datasets(datasets: Vec<Vec<DataInstance>>) -> Vec<ClientState> {
    datasets.into_iter().enumerate().map(|(id, d)| ClientState::new(id, d)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub active_clients: Vec<usize>,
    /// Clients whose history was aggregated, with their weights.
    pub contributing: Vec<(usize, f64)>,
    pub global_test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub per_client_steps: usize,
    /// Per-client downlink bytes as encoded.
    pub bytes_down: usize,
    /// Per-client uplink bytes as encoded.
    pub bytes_up: usize,
    /// Perturbation passes a client spent rebuilding the global model.
    pub sync_steps: usize,
    pub wall_ms: u64,
}

/// `max(1, round(N · ratio))`.
pub fn active_count(num_clients: usize, ratio: f64) -> usize {
    ((num_clients as f64 * ratio).round() as usize).clamp(1, num_clients)
}

/// Uniform sample of `active_count(N, ratio)` client ids without replacement,
/// in ascending order.
pub fn select_active_clients<R: Rng + ?Sized>(num_clients: usize, ratio: f64, rng: &mut R) -> Vec<usize> {
    let m = active_count(num_clients, ratio);
    let mut ids = sample_indices(rng, num_clients, m).into_vec();
    ids.sort_unstable();
    ids
}

fn round_selection(cfg: &FLConfig, round: usize) -> Vec<usize> {
    select_active_clients(cfg.num_clients, cfg.participation_ratio, &mut stream(cfg.master_seed, &[tag::ROUND, round as u64]))
}

fn client_rng(cfg: &FLConfig, round: usize, client: usize) -> rand_chacha::ChaCha8Rng {
    stream(cfg.master_seed, &[tag::CLIENT, round as u64, client as u64])
}

/// `c_i = |D_i| / Σ |D_k|`.
pub fn aggregate_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("every active client needs a nonempty dataset".into()));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
}

/// Sets `aggregate_weight` on each active client proportionally to its data.
pub fn compute_aggregate_weights(active: &mut [ClientState]) -> Result<()> {
    let weights = aggregate_weights(&active.iter().map(|c| c.dataset.len()).collect::<Vec<_>>())?;
    active.iter_mut().zip(weights).for_each(|(c, w)| c.aggregate_weight = w);
    Ok(())
}

/// Mean test loss and, for class labels, argmax accuracy.
pub fn evaluate(spec: &ModelSpec, w: &ParamVector, test: &[DataInstance]) -> Result<(f64, Option<f64>)> {
    if test.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut classified = 0usize;
    for x in test {
        loss += evaluate_loss(spec, w, x)?;
        if let Label::Class(c) = x.label {
            let y = predict(spec, w, &x.features)?;
            let arg = y.iter().enumerate().fold(0, |best, (i, v)| if *v > y[best] { i } else { best });
            classified += 1;
            correct += usize::from(arg == c);
        }
    }
    let acc = (classified > 0).then(|| correct as f64 / classified as f64);
    Ok((loss / test.len() as f64, acc))
}

/// What a client knows at the start of a round, rebuilt from the downlink.
#[derive(Debug, Clone)]
pub struct RoundSnapshot {
    pub pool: SeedPool,
    pub slots: Vec<f64>,
    pub probabilities: Option<SeedProbabilities>,
}

impl RoundSnapshot {
    pub fn from_downlink(msg: &DownlinkMsg) -> Result<Self> {
        let pool = init_pool(u64::from(msg.master_seed), msg.k())?;
        let probabilities = msg
            .probabilities
            .as_ref()
            .map(|p| SeedProbabilities::from_weights(&p.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
            .transpose()?;
        Ok(Self { pool, slots: msg.slots_f64(), probabilities })
    }

    /// The global model this snapshot encodes.
    pub fn model(&self, w0: &ParamVector, eta: f64) -> Result<(ParamVector, usize)> {
        let mut w = w0.clone();
        let passes = reconstruct_in_place(&mut w, &self.pool, &self.slots, eta)?;
        Ok((w, passes))
    }
}

/// One client's round: rebuild the global model, then `tau` steps of
/// sample instance → sample seed → two-point estimate → seeded update.
/// Returns the history and the reconstruction pass count.
pub fn client_local_training<R: Rng + ?Sized>(
    spec: &ModelSpec,
    dataset: &[DataInstance],
    w0: &ParamVector,
    snapshot: &RoundSnapshot,
    cfg: &FLConfig,
    rng: &mut R,
) -> Result<(GradHistory, usize)> {
    if dataset.is_empty() {
        return Err(Error::Config("client has no data".into()));
    }
    let (mut w, passes) = snapshot.model(w0, cfg.zoo.eta)?;
    let sampler = match (&snapshot.probabilities, cfg.pro_mode) {
        (Some(p), true) => SeedSampler::new(p)?,
        _ => SeedSampler::uniform(snapshot.pool.len()),
    };
    let mut history = GradHistory::with_capacity(cfg.tau);
    for _ in 0..cfg.tau {
        let x = &dataset[rng.random_range(0..dataset.len())];
        let (seed, _) = sampler.sample(&snapshot.pool, rng);
        let g = scalar_gradient_two_point(spec, &w, x, u64::from(seed), cfg.zoo.epsilon)?;
        step_update(&mut w, u64::from(seed), g, cfg.zoo.eta)?;
        history.push(seed, g);
    }
    Ok((history, passes))
}

fn is_client_failure(e: &Error) -> bool {
    matches!(e, Error::NonFiniteLoss { .. } | Error::Encode(_))
}

/// A client's encoded uplink and the dataset size that weights it.
type EncodedUpload = (Vec<u8>, usize);

/// Server state for one run.
#[derive(Debug, Clone)]
pub struct Server {
    spec: ModelSpec,
    w0: ParamVector,
    pool_seed: u32,
    pool: SeedPool,
    acc: GradAccumulator,
    probabilities: SeedProbabilities,
    cfg: FLConfig,
}

impl Server {
    pub fn new(spec: ModelSpec, w0: ParamVector, cfg: FLConfig) -> Result<Self> {
        cfg.validate()?;
        if w0.len() != spec.param_count()? {
            return Err(Error::Contract("initial parameters do not match the model".into()));
        }
        let pool_seed = (derive_seed(cfg.master_seed, &[tag::POOL]) >> 32) as u32;
        let pool = init_pool(u64::from(pool_seed), cfg.k)?;
        Ok(Self {
            acc: GradAccumulator::new(cfg.k),
            probabilities: SeedProbabilities::uniform(cfg.k),
            spec,
            w0,
            pool_seed,
            pool,
            cfg,
        })
    }

    pub fn config(&self) -> &FLConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &SeedPool {
        &self.pool
    }

    pub fn accumulator(&self) -> &GradAccumulator {
        &self.acc
    }

    pub fn probabilities(&self) -> &SeedProbabilities {
        &self.probabilities
    }

    pub fn initial_params(&self) -> &ParamVector {
        &self.w0
    }

    /// The message every active client receives this round.
    pub fn downlink(&self) -> Result<DownlinkMsg> {
        DownlinkMsg::from_state(self.pool_seed, &self.acc, self.cfg.pro_mode.then_some(&self.probabilities))
    }

    /// The global model as any client would rebuild it from the next downlink.
    pub fn global_model(&self) -> Result<ParamVector> {
        Ok(RoundSnapshot::from_downlink(&self.downlink()?)?.model(&self.w0, self.cfg.zoo.eta)?.0)
    }

    pub fn run_round(&mut self, clients: &[ClientState], test: &[DataInstance], round: usize) -> Result<RoundReport> {
        if round == 0 {
            return Err(Error::Contract("rounds are numbered from 1".into()));
        }
        let started = Instant::now();
        let active = round_selection(&self.cfg, round);

        let down_bytes = encode_downlink(&self.downlink()?)?;
        let snapshot = RoundSnapshot::from_downlink(&decode_downlink(&down_bytes, self.cfg.k, self.cfg.pro_mode)?)?;
        if snapshot.pool != self.pool {
            return Err(Error::Protocol("client-side pool differs from the server's".into()));
        }

        let (spec, w0, cfg) = (&self.spec, &self.w0, &self.cfg);
        let outcomes: Vec<(usize, Result<EncodedUpload>)> = active
            .par_iter()
            .map(|&id| {
                let client = clients.get(id).ok_or_else(|| Error::Config(format!("no client with id {id}")));
                let run = client.and_then(|c| {
                    let (history, passes) =
                        client_local_training(spec, &c.dataset, w0, &snapshot, cfg, &mut client_rng(cfg, round, id))?;
                    Ok((encode_uplink(&UplinkMsg::from_history(&history)?)?, passes))
                });
                (id, run)
            })
            .collect();

        let mut uploads = Vec::new();
        let mut sync_steps = 0;
        for (id, outcome) in outcomes {
            match outcome {
                Ok((bytes, passes)) => {
                    sync_steps = sync_steps.max(passes);
                    uploads.push((id, bytes));
                }
                Err(e) if is_client_failure(&e) => warn!("round {round}: client {id} dropped: {e}"),
                Err(e) => return Err(e),
            }
        }
        if uploads.is_empty() {
            return Err(Error::RoundFailed { round });
        }

        let weights = aggregate_weights(&uploads.iter().map(|(id, _)| clients[*id].dataset.len()).collect::<Vec<_>>())?;
        if self.cfg.reset_statistics_each_round {
            self.acc.reset_statistics();
        }
        let bytes_up = uploads[0].1.len();
        for ((_, bytes), &c) in uploads.iter().zip(&weights) {
            let history = decode_uplink(bytes)?.to_history();
            if history.len() != self.cfg.tau {
                return Err(Error::Protocol(format!("history of {} entries, expected {}", history.len(), self.cfg.tau)));
            }
            self.acc.accumulate(&history, c, &self.pool)?;
        }
        if self.cfg.pro_mode {
            self.probabilities = update_probabilities(&self.acc);
        }

        let (loss, accuracy) = evaluate(&self.spec, &self.global_model()?, test)?;
        Ok(RoundReport {
            round,
            active_clients: active,
            contributing: uploads.iter().map(|(id, _)| *id).zip(weights).collect(),
            global_test_loss: loss,
            test_accuracy: accuracy,
            per_client_steps: self.cfg.tau,
            bytes_down: down_bytes.len(),
            bytes_up,
            sync_steps,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Report for a round in which every active client failed: nothing was
/// aggregated and nothing was uploaded.
fn skipped_round(
    spec: &ModelSpec,
    w: &ParamVector,
    test: &[DataInstance],
    cfg: &FLConfig,
    round: usize,
    started: Instant,
) -> Result<RoundReport> {
    let (loss, accuracy) = evaluate(spec, w, test)?;
    Ok(RoundReport {
        round,
        active_clients: round_selection(cfg, round),
        contributing: Vec::new(),
        global_test_loss: loss,
        test_accuracy: accuracy,
        per_client_steps: cfg.tau,
        bytes_down: 0,
        bytes_up: 0,
        sync_steps: 0,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// A complete run: the initial evaluation plus one report per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub initial_test_loss: f64,
    pub initial_test_accuracy: Option<f64>,
    pub reports: Vec<RoundReport>,
    /// Final accumulator slots (FedKSeed modes only).
    pub final_slots: Option<Vec<f64>>,
    pub final_probabilities: Option<Vec<f64>>,
}

impl RunResult {
    pub fn final_test_loss(&self) -> f64 {
        self.reports.last().map_or(self.initial_test_loss, |r| r.global_test_loss)
    }
}

/// Initial parameters shared by every mode of a run.
pub fn initial_params(spec: &ModelSpec, master_seed: u64) -> Result<ParamVector> {
    init_params(spec, &mut stream(master_seed, &[tag::INIT]))
}

/// FedKSeed (or FedKSeed-Pro with `cfg.pro_mode`) for `cfg.rounds` rounds.
///
/// A round whose clients all fail is logged and reported with no
/// contributors; the run goes on from the unchanged global model.
pub fn run_fedkseed(spec: &ModelSpec, clients: &[ClientState], test: &[DataInstance], cfg: &FLConfig) -> Result<RunResult> {
    check_clients(clients, cfg)?;
    let w0 = initial_params(spec, cfg.master_seed)?;
    let (initial_test_loss, initial_test_accuracy) = evaluate(spec, &w0, test)?;
    let mut server = Server::new(spec.clone(), w0, cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        match server.run_round(clients, test, round) {
            Ok(report) => reports.push(report),
            Err(e @ Error::RoundFailed { .. }) => {
                warn!("{e}; global model left unchanged");
                let w = server.global_model()?;
                let mut report = skipped_round(spec, &w, test, cfg, round, started)?;
                report.bytes_down = downlink_len(cfg.k, cfg.pro_mode);
                report.sync_steps = server.accumulator().nonzero_slots();
                reports.push(report);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(RunResult {
        initial_test_loss,
        initial_test_accuracy,
        reports,
        final_slots: Some(server.accumulator().slots().to_vec()),
        final_probabilities: Some(server.probabilities().as_slice().to_vec()),
    })
}

fn check_clients(clients: &[ClientState], cfg: &FLConfig) -> Result<()> {
    cfg.validate()?;
    if clients.len() != cfg.num_clients {
        return Err(Error::Config(format!("{} clients supplied, config says {}", clients.len(), cfg.num_clients)));
    }
    if let Some(c) = clients.iter().enumerate().find(|(i, c)| c.id != *i) {
        return Err(Error::Config(format!("client at position {} has id {}", c.0, c.1.id)));
    }
    Ok(())
}

/// Weighted parameter average.
fn average(models: &[(ParamVector, f64)]) -> ParamVector {
    let mut out = vec![0.0; models[0].0.len()];
    for (w, c) in models {
        out.iter_mut().zip(w.as_slice()).for_each(|(o, v)| *o += c * v);
    }
    ParamVector::from_vec(out).unwrap_or_else(|_| models[0].0.clone())
}

/// Shared driver for the full-model-upload baselines. `local` trains one
/// client from the global model.
fn run_model_averaging<F>(
    spec: &ModelSpec,
    clients: &[ClientState],
    test: &[DataInstance],
    cfg: &FLConfig,
    local: F,
) -> Result<RunResult>
where
    F: Fn(&ParamVector, &[DataInstance], &mut rand_chacha::ChaCha8Rng) -> Result<ParamVector> + Sync,
{
    check_clients(clients, cfg)?;
    let mut w = initial_params(spec, cfg.master_seed)?;
    let (initial_test_loss, initial_test_accuracy) = evaluate(spec, &w, test)?;
    let model_bytes = 4 * w.len();
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let active = round_selection(cfg, round);
        let outcomes: Vec<(usize, Result<ParamVector>)> = active
            .par_iter()
            .map(|&id| (id, local(&w, &clients[id].dataset, &mut client_rng(cfg, round, id))))
            .collect();
        let mut trained = Vec::new();
        for (id, outcome) in outcomes {
            match outcome {
                Ok(wi) if wi.is_finite() => trained.push((id, wi)),
                Ok(_) => warn!("round {round}: client {id} dropped: non-finite parameters"),
                Err(e) if is_client_failure(&e) => warn!("round {round}: client {id} dropped: {e}"),
                Err(e) => return Err(e),
            }
        }
        if trained.is_empty() {
            warn!("{}; global model left unchanged", Error::RoundFailed { round });
            let mut report = skipped_round(spec, &w, test, cfg, round, started)?;
            report.bytes_down = model_bytes;
            reports.push(report);
            continue;
        }
        let weights = aggregate_weights(&trained.iter().map(|(id, _)| clients[*id].dataset.len()).collect::<Vec<_>>())?;
        let contributing: Vec<(usize, f64)> = trained.iter().map(|(id, _)| *id).zip(weights.iter().copied()).collect();
        w = average(&trained.into_iter().map(|(_, wi)| wi).zip(weights).collect::<Vec<_>>());
        let (loss, accuracy) = evaluate(spec, &w, test)?;
        reports.push(RoundReport {
            round,
            active_clients: active,
            contributing,
            global_test_loss: loss,
            test_accuracy: accuracy,
            per_client_steps: cfg.tau,
            bytes_down: model_bytes,
            bytes_up: model_bytes,
            sync_steps: 0,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(RunResult { initial_test_loss, initial_test_accuracy, reports, final_slots: None, final_probabilities: None })
}

/// FedAvg with exact gradients: `tau` SGD steps per client at `learning_rate`,
/// then a data-size-weighted parameter average.
pub fn run_baseline_fedavg_bp(
    spec: &ModelSpec,
    clients: &[ClientState],
    test: &[DataInstance],
    cfg: &FLConfig,
    learning_rate: f64,
) -> Result<RunResult> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config("backprop learning rate must be positive".into()));
    }
    run_model_averaging(spec, clients, test, cfg, |w, data, rng| {
        let mut w = w.clone();
        for _ in 0..cfg.tau {
            let x = &data[rng.random_range(0..data.len())];
            let g = exact_gradient(spec, &w, x)?;
            w.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(wi, gi)| *wi -= learning_rate * gi);
        }
        Ok(w)
    })
}

/// Estimator used by the FedZO comparator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    OnePoint,
    TwoPoint,
}

/// FedZO: zeroth-order local steps with a fresh 32-bit seed per step (no
/// finite pool) and full-model upload, aggregated by weighted averaging.
pub fn run_baseline_fedzo(
    spec: &ModelSpec,
    clients: &[ClientState],
    test: &[DataInstance],
    cfg: &FLConfig,
    estimator: Estimator,
) -> Result<RunResult> {
    run_model_averaging(spec, clients, test, cfg, |w, data, rng| {
        let mut w = w.clone();
        for _ in 0..cfg.tau {
            let x = &data[rng.random_range(0..data.len())];
            let seed = u64::from(rng.random::<u32>());
            let g = match estimator {
                Estimator::OnePoint => scalar_gradient_one_point(spec, &w, x, seed, cfg.zoo.epsilon)?,
                Estimator::TwoPoint => scalar_gradient_two_point(spec, &w, x, seed, cfg.zoo.epsilon)?,
            };
            step_update(&mut w, seed, g, cfg.zoo.eta)?;
        }
        Ok(w)
    })
}
