//! Experiment runner: flat `key=value` configs, repetition and K-sweep
//! drivers, per-round CSV metrics and a JSON summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    clients_from_datasets, run_baseline_fedavg_bp, run_baseline_fedzo, run_fedkseed, Estimator, FLConfig, RunResult,
};
use crate::model::{DataInstance, ModelKind, ModelSpec};
use crate::partition::{
    apply_client_shift, dirichlet_partition, generate_synthetic, group_by_client, labels_of, PartitionSpec, SynthSpec,
};
use crate::rng::{derive_seed, tag};
use crate::zoo::ZooConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Fedkseed,
    FedkseedPro,
    FedavgBp,
    Fedzo,
    CostModel,
    KSweep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fedkseed => "fedkseed",
            Mode::FedkseedPro => "fedkseed-pro",
            Mode::FedavgBp => "fedavg-bp",
            Mode::Fedzo => "fedzo",
            Mode::CostModel => "cost-model",
            Mode::KSweep => "k-sweep",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fedkseed" => Mode::Fedkseed,
            "fedkseed-pro" => Mode::FedkseedPro,
            "fedavg-bp" => Mode::FedavgBp,
            "fedzo" => Mode::Fedzo,
            "cost-model" => Mode::CostModel,
            "k-sweep" => Mode::KSweep,
            other => return Err(Error::Config(format!("unknown mode `{other}`"))),
        })
    }
}

/// Everything one invocation needs. Defaults describe the desk-scale
/// logistic task used throughout the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub model: ModelKind,
    pub hidden_dims: Vec<usize>,
    pub input_dim: usize,
    pub n_classes: usize,
    pub n_instances: usize,
    pub class_separation: f64,
    pub noise_std: f64,
    pub num_clients: usize,
    pub alpha: f64,
    /// Per-client feature offset scale; 0 disables the feature-skew mode.
    pub feature_shift: f64,
    pub participation_ratio: f64,
    pub tau: usize,
    pub rounds: usize,
    pub k: usize,
    pub k_values: Vec<usize>,
    /// Use Pro-mode sampling inside `k-sweep`.
    pub sweep_pro: bool,
    pub epsilon: f64,
    pub eta: f64,
    pub bp_learning_rate: f64,
    pub fedzo_estimator: Estimator,
    pub reset_statistics_each_round: bool,
    pub master_seed: u64,
    pub repetitions: usize,
    pub output_dir: PathBuf,
    /// Cost-model query: active clients per round.
    pub cost_m: usize,
    /// Cost-model query: `K` for the finite pool; 0 means infinite seeds only.
    pub cost_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Fedkseed,
            model: ModelKind::LogisticRegression,
            hidden_dims: Vec::new(),
            input_dim: 249,
            n_classes: 4,
            n_instances: 6000,
            class_separation: 3.0,
            noise_std: 0.1,
            num_clients: 50,
            alpha: 0.5,
            feature_shift: 0.0,
            participation_ratio: 0.05,
            tau: 50,
            rounds: 40,
            k: 512,
            k_values: vec![8, 64, 512, 4096],
            sweep_pro: false,
            epsilon: 1e-3,
            eta: 2e-3,
            bp_learning_rate: 0.05,
            fedzo_estimator: Estimator::OnePoint,
            reset_statistics_each_round: false,
            master_seed: 42,
            repetitions: 1,
            output_dir: PathBuf::from("out"),
            cost_m: 50,
            cost_k: 4096,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "model" => self.model = v.parse()?,
            "hidden" | "hidden_dims" => self.hidden_dims = parse_list(key, v)?,
            "input_dim" => self.input_dim = parse(key, v)?,
            "classes" | "n_classes" => self.n_classes = parse(key, v)?,
            "instances" | "n_instances" => self.n_instances = parse(key, v)?,
            "separation" | "class_separation" => self.class_separation = parse(key, v)?,
            "noise" | "noise_std" => self.noise_std = parse(key, v)?,
            "clients" | "num_clients" | "N" => self.num_clients = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "feature_shift" => self.feature_shift = parse(key, v)?,
            "participation" | "participation_ratio" => self.participation_ratio = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "rounds" | "T" => self.rounds = parse(key, v)?,
            "K" | "k" => self.k = parse(key, v)?,
            "k_values" | "K_values" => self.k_values = parse_list(key, v)?,
            "sweep_pro" => self.sweep_pro = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "bp_lr" | "bp_learning_rate" => self.bp_learning_rate = parse(key, v)?,
            "fedzo_estimator" => {
                self.fedzo_estimator = match v {
                    "one-point" => Estimator::OnePoint,
                    "two-point" => Estimator::TwoPoint,
                    _ => return Err(Error::Config(format!("unknown estimator `{v}`"))),
                }
            }
            "reset_statistics" | "reset_statistics_each_round" => self.reset_statistics_each_round = parse(key, v)?,
            "seed" | "master_seed" => self.master_seed = parse(key, v)?,
            "reps" | "repetitions" => self.repetitions = parse(key, v)?,
            "out" | "output_dir" => self.output_dir = PathBuf::from(v),
            "cost_m" => self.cost_m = parse(key, v)?,
            "cost_k" => self.cost_k = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat config: one `key = value` per line, `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.model,
            input_dim: self.input_dim,
            hidden_dims: if self.model == ModelKind::Mlp { self.hidden_dims.clone() } else { Vec::new() },
            output_dim: self.n_classes,
        }
    }

    pub fn fl_config(&self, k: usize, pro_mode: bool, master_seed: u64) -> FLConfig {
        FLConfig {
            num_clients: self.num_clients,
            participation_ratio: self.participation_ratio,
            tau: self.tau,
            rounds: self.rounds,
            k,
            zoo: ZooConfig { epsilon: self.epsilon, eta: self.eta },
            pro_mode,
            master_seed,
            reset_statistics_each_round: self.reset_statistics_each_round,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.mode == Mode::CostModel {
            return Ok(());
        }
        self.model_spec().validate()?;
        if self.model == ModelKind::LinearRegression {
            return Err(Error::Config("experiments run classification tasks; pick logistic-regression or mlp".into()));
        }
        if self.mode == Mode::KSweep && (self.k_values.is_empty() || self.k_values.contains(&0)) {
            return Err(Error::Config("k-sweep needs a nonempty list of positive K values".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.bp_learning_rate.is_finite() && self.bp_learning_rate > 0.0) {
            return Err(Error::Config("bp_lr must be positive".into()));
        }
        if self.feature_shift < 0.0 || !self.feature_shift.is_finite() {
            return Err(Error::Config("feature_shift must be >= 0".into()));
        }
        self.fl_config(self.k, false, self.master_seed).validate()
    }

    /// Seed shared by every run of repetition `rep`, whatever its K or mode.
    pub fn repetition_seed(&self, rep: usize) -> u64 {
        derive_seed(self.master_seed, &[tag::REPETITION, rep as u64])
    }
}

/// Client datasets and test split for one repetition.
pub struct Federation {
    pub clients: Vec<crate::federation::ClientState>,
    pub test: Vec<DataInstance>,
    pub heterogeneity: f64,
}

pub fn build_federation(cfg: &ExperimentConfig, seed: u64) -> Result<Federation> {
    let data = generate_synthetic(&SynthSpec {
        n_instances: cfg.n_instances,
        n_classes: cfg.n_classes,
        input_dim: cfg.input_dim,
        class_separation: cfg.class_separation,
        noise_std: cfg.noise_std,
        seed,
    })?;
    let labels = labels_of(&data.train)?;
    let assignment =
        dirichlet_partition(&labels, &PartitionSpec { num_clients: cfg.num_clients, alpha: cfg.alpha, seed })?;
    let heterogeneity = crate::partition::heterogeneity_index(&assignment, &labels)?;
    let mut datasets = group_by_client(&data.train, &assignment, cfg.num_clients);
    if cfg.feature_shift > 0.0 {
        apply_client_shift(&mut datasets, cfg.feature_shift, seed);
    }
    Ok(Federation { clients: clients_from_datasets(datasets), test: data.test, heterogeneity })
}

/// One algorithm on one repetition's federation.
pub fn run_algorithm(cfg: &ExperimentConfig, mode: Mode, k: usize, fed: &Federation, seed: u64) -> Result<RunResult> {
    let spec = cfg.model_spec();
    match mode {
        Mode::Fedkseed => run_fedkseed(&spec, &fed.clients, &fed.test, &cfg.fl_config(k, false, seed)),
        Mode::FedkseedPro => run_fedkseed(&spec, &fed.clients, &fed.test, &cfg.fl_config(k, true, seed)),
        Mode::KSweep => run_fedkseed(&spec, &fed.clients, &fed.test, &cfg.fl_config(k, cfg.sweep_pro, seed)),
        Mode::FedavgBp => {
            run_baseline_fedavg_bp(&spec, &fed.clients, &fed.test, &cfg.fl_config(k, false, seed), cfg.bp_learning_rate)
        }
        Mode::Fedzo => run_baseline_fedzo(&spec, &fed.clients, &fed.test, &cfg.fl_config(k, false, seed), cfg.fedzo_estimator),
        Mode::CostModel => Err(Error::Config("the cost model has no training run".into())),
    }
}

pub const CSV_HEADER: &str = "round,mode,K,alpha,test_loss,test_accuracy,bytes_down,bytes_up,sync_steps,wall_ms";

/// Per-round metrics as CSV text (header included).
pub fn metrics_csv(mode: Mode, k: Option<usize>, alpha: f64, run: &RunResult) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &run.reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.round,
            mode.as_str(),
            k.map_or(String::new(), |k| k.to_string()),
            alpha,
            r.global_test_loss,
            r.test_accuracy.map_or(String::new(), |a| a.to_string()),
            r.bytes_down,
            r.bytes_up,
            r.sync_steps,
            r.wall_ms
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub k: Option<usize>,
    pub repetition: usize,
    pub seed: u64,
    pub heterogeneity: f64,
    pub initial_test_loss: f64,
    pub final_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub csv: String,
    /// Final accumulator slots followed by seed probabilities: the whole
    /// protocol state beyond the initial model.
    pub final_slots: Option<Vec<f64>>,
    pub final_probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub k: Option<usize>,
    pub runs: usize,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    pub mean_initial_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub mode: Mode,
    pub config: ExperimentConfig,
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupSummary>,
}

impl ExperimentSummary {
    pub fn group(&self, k: Option<usize>) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.k == k)
    }

    /// Final losses for one K, ordered by repetition.
    pub fn final_losses(&self, k: Option<usize>) -> Vec<f64> {
        let mut runs: Vec<&RunSummary> = self.runs.iter().filter(|r| r.k == k).collect();
        runs.sort_by_key(|r| r.repetition);
        runs.iter().map(|r| r.final_test_loss).collect()
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Runs every repetition (and every K for `k-sweep`), writing one CSV per
/// run plus `summary.json` into `output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    if cfg.mode == Mode::CostModel {
        return run_cost_model(cfg);
    }
    let ks: Vec<Option<usize>> = match cfg.mode {
        Mode::KSweep => cfg.k_values.iter().map(|&k| Some(k)).collect(),
        Mode::Fedkseed | Mode::FedkseedPro => vec![Some(cfg.k)],
        _ => vec![None],
    };
    let jobs: Vec<(usize, Option<usize>)> =
        (0..cfg.repetitions).flat_map(|rep| ks.iter().map(move |&k| (rep, k))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(rep, k)| {
            let seed = cfg.repetition_seed(rep);
            let fed = build_federation(cfg, seed)?;
            let run = run_algorithm(cfg, cfg.mode, k.unwrap_or(cfg.k), &fed, seed)?;
            let name = match k {
                Some(k) => format!("{}_K{k}_rep{rep}.csv", cfg.mode.as_str()),
                None => format!("{}_rep{rep}.csv", cfg.mode.as_str()),
            };
            std::fs::write(cfg.output_dir.join(&name), metrics_csv(cfg.mode, k, cfg.alpha, &run))?;
            Ok(RunSummary {
                k,
                repetition: rep,
                seed,
                heterogeneity: fed.heterogeneity,
                initial_test_loss: run.initial_test_loss,
                final_test_loss: run.final_test_loss(),
                final_test_accuracy: run.reports.last().and_then(|r| r.test_accuracy),
                csv: name,
                final_slots: run.final_slots,
                final_probabilities: run.final_probabilities,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = ks
        .iter()
        .map(|&k| {
            let finals: Vec<f64> = runs.iter().filter(|r| r.k == k).map(|r| r.final_test_loss).collect();
            let initials: Vec<f64> = runs.iter().filter(|r| r.k == k).map(|r| r.initial_test_loss).collect();
            let (mean, std) = mean_std(&finals);
            GroupSummary { k, runs: finals.len(), mean_final_loss: mean, std_final_loss: std, mean_initial_loss: mean_std(&initials).0 }
        })
        .collect();
    let summary = ExperimentSummary { mode: cfg.mode, config: cfg.clone(), runs, groups };
    std::fs::write(cfg.output_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Steps a client must replay to catch up with the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModelQuery {
    pub m: usize,
    pub tau: usize,
    pub rounds: usize,
    /// `None` is the unbounded-seed baseline.
    pub k: Option<usize>,
}

/// `τ · r · m` replayed updates without a seed pool; with K seeds at most
/// `min(K, τ · r · m)` passes, since there are never more nonzero slots than
/// steps taken.
pub fn replay_cost_model(q: &CostModelQuery) -> u64 {
    let replay = (q.tau as u64) * (q.rounds as u64) * (q.m as u64);
    match q.k {
        None => replay,
        Some(k) => replay.min(k as u64),
    }
}

fn run_cost_model(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let mut csv = String::from("round,infinite_seed_steps,fedkseed_steps\n");
    for r in 0..=cfg.rounds {
        let base = CostModelQuery { m: cfg.cost_m, tau: cfg.tau, rounds: r, k: None };
        let pooled = CostModelQuery { k: (cfg.cost_k > 0).then_some(cfg.cost_k), ..base };
        let _ = writeln!(csv, "{r},{},{}", replay_cost_model(&base), replay_cost_model(&pooled));
    }
    std::fs::write(cfg.output_dir.join("cost_model.csv"), csv)?;
    let summary = ExperimentSummary { mode: Mode::CostModel, config: cfg.clone(), runs: Vec::new(), groups: Vec::new() };
    std::fs::write(cfg.output_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
