//! Federated full-parameter tuning with zeroth-order optimization over a
//! finite pool of random seeds.
//!
//! Clients never exchange model parameters. A round's downlink is one pool
//! seed plus a K-slot accumulator of aggregated scalar gradients (and, in Pro
//! mode, K seed probabilities); the uplink is the client's list of
//! `(seed, scalar gradient)` pairs. Every party rebuilds the current model
//! from the initial parameters and the accumulator in at most K perturbation
//! passes.
//!
//! Module map:
//!
//! * [`model`]: flat-parameter reference models (linear, logistic, MLP).
//! * [`perturb`]: counter-based Gaussian perturbations streamed in chunks.
//! * [`zoo`]: two-point and one-point scalar-gradient estimators and the seeded update.
//! * [`seed_state`]: seed pool, accumulator, reconstruction and seed probabilities.
//! * [`wire`]: byte-exact little-endian codecs for downlink and uplink.
//! * [`partition`]: synthetic datasets and Dirichlet label-skew partitioning.
//! * [`federation`]: round orchestration plus the FedAvg and FedZO baselines.
//! * [`experiment`]: config parsing, experiment runner, replay cost model.
//! * [`verify`]: fixture-driven self test.

pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod partition;
pub mod perturb;
pub mod rng;
pub mod seed_state;
pub mod verify;
pub mod wire;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{DataInstance, Label, ModelKind, ModelSpec, ParamVector};
pub use seed_state::{GradAccumulator, GradHistory, SeedPool, SeedProbabilities};
pub use zoo::ZooConfig;
