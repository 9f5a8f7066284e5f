use fedkseed::federation::{
    client_local_training, clients_from_datasets, initial_params, run_baseline_fedavg_bp, run_baseline_fedzo,
    run_fedkseed, ClientState, Estimator, FLConfig, RoundReport, RoundSnapshot, Server,
};
use fedkseed::model::exact_gradient;
use fedkseed::partition::{dirichlet_partition, generate_synthetic, group_by_client, labels_of, PartitionSpec, SynthSpec};
use fedkseed::rng::{stream, tag};
use fedkseed::seed_state::SeedSampler;
use fedkseed::wire::{decode_downlink, encode_downlink};
use fedkseed::zoo::{scalar_gradient_two_point, ZooConfig};
use fedkseed::{DataInstance, Error, Label, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(num_clients: usize, ratio: f64, tau: usize, rounds: usize, k: usize, pro: bool) -> FLConfig {
    FLConfig {
        num_clients,
        participation_ratio: ratio,
        tau,
        rounds,
        k,
        zoo: ZooConfig { epsilon: 1e-3, eta: 2e-3 },
        pro_mode: pro,
        master_seed: 77,
        reset_statistics_each_round: false,
    }
}

/// Small version of the desk-scale logistic task.
fn task(num_clients: usize, seed: u64) -> (ModelSpec, Vec<ClientState>, Vec<DataInstance>) {
    let data = generate_synthetic(&SynthSpec {
        n_instances: 3000,
        n_classes: 4,
        input_dim: 24,
        class_separation: 3.0,
        noise_std: 0.1,
        seed,
    })
    .unwrap();
    let labels = labels_of(&data.train).unwrap();
    let assignment = dirichlet_partition(&labels, &PartitionSpec { num_clients, alpha: 0.5, seed }).unwrap();
    let clients = clients_from_datasets(group_by_client(&data.train, &assignment, num_clients));
    (ModelSpec::logistic_regression(24, 4), clients, data.test)
}

fn strip_wall(reports: &[RoundReport]) -> Vec<RoundReport> {
    reports.iter().cloned().map(|r| RoundReport { wall_ms: 0, ..r }).collect()
}

#[test]
fn single_step_history_is_a_standalone_estimate() {
    let (spec, clients, _) = task(4, 1);
    let cfg = config(4, 1.0, 1, 1, 32, false);
    let mut server = Server::new(spec.clone(), initial_params(&spec, cfg.master_seed).unwrap(), cfg.clone()).unwrap();
    let test = &clients[3].dataset;
    server.run_round(&clients, test, 1).unwrap();
    let snapshot = RoundSnapshot::from_downlink(&server.downlink().unwrap()).unwrap();
    let data = &clients[0].dataset;

    let (history, _) =
        client_local_training(&spec, data, server.initial_params(), &snapshot, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(history.len(), 1);

    // replay the client's two draws by hand
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = &data[rng.random_range(0..data.len())];
    let (seed, _) = SeedSampler::uniform(32).sample(&snapshot.pool, &mut rng);
    let (w, _) = snapshot.model(server.initial_params(), cfg.zoo.eta).unwrap();
    let g = scalar_gradient_two_point(&spec, &w, x, u64::from(seed), cfg.zoo.epsilon).unwrap();
    assert_eq!(history.entries(), &[(seed, g)]);
}

#[test]
fn identical_inputs_give_identical_histories() {
    let (spec, clients, _) = task(2, 2);
    let cfg = config(2, 1.0, 30, 1, 64, false);
    let server = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), cfg.clone()).unwrap();
    let snapshot = RoundSnapshot::from_downlink(&server.downlink().unwrap()).unwrap();
    let run = || {
        client_local_training(&spec, &clients[0].dataset, server.initial_params(), &snapshot, &cfg, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .0
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 30);
    assert_eq!(a, b);
}

#[test]
fn one_client_one_step_touches_one_slot() {
    let (spec, clients, test) = task(1, 3);
    let cfg = config(1, 1.0, 1, 1, 16, false);
    let mut server = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), cfg).unwrap();
    server.run_round(&clients, &test, 1).unwrap();
    assert_eq!(server.accumulator().sample_counts().iter().sum::<u64>(), 1);
    assert!(server.accumulator().nonzero_slots() <= 1);
}

#[test]
fn server_model_equals_client_reconstruction_each_round() {
    let (spec, clients, test) = task(10, 4);
    for pro in [false, true] {
        let cfg = config(10, 0.3, 20, 4, 64, pro);
        let mut server = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), cfg.clone()).unwrap();
        for r in 1..=cfg.rounds {
            server.run_round(&clients, &test, r).unwrap();
            let bytes = encode_downlink(&server.downlink().unwrap()).unwrap();
            let snapshot = RoundSnapshot::from_downlink(&decode_downlink(&bytes, cfg.k, pro).unwrap()).unwrap();
            let (client_w, passes) = snapshot.model(server.initial_params(), cfg.zoo.eta).unwrap();
            assert!(client_w.bit_eq(&server.global_model().unwrap()), "round {r}");
            assert!(passes <= cfg.k);
        }
    }
}

#[test]
fn accumulator_receives_tau_increments_per_contributor() {
    let (spec, clients, test) = task(10, 5);
    let cfg = config(10, 0.3, 25, 5, 128, true);
    let mut server = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), cfg.clone()).unwrap();
    let mut contributions = 0;
    for r in 1..=cfg.rounds {
        let report = server.run_round(&clients, &test, r).unwrap();
        let total: f64 = report.contributing.iter().map(|c| c.1).sum();
        assert!((total - 1.0).abs() <= 1e-12, "round {r}: weights sum to {total}");
        contributions += report.contributing.len();
        assert_eq!(report.bytes_down, 4 + 8 * cfg.k);
        assert_eq!(report.bytes_up, 8 * cfg.tau);
    }
    assert_eq!(server.accumulator().sample_counts().iter().sum::<u64>(), (cfg.tau * contributions) as u64);
}

#[test]
fn plain_mode_never_leaves_uniform_sampling() {
    let (spec, clients, test) = task(10, 6);
    let mut server = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), config(10, 0.3, 20, 3, 32, false)).unwrap();
    for r in 1..=3 {
        server.run_round(&clients, &test, r).unwrap();
        assert!(server.probabilities().is_uniform());
        assert!(server.downlink().unwrap().probabilities.is_none());
    }
    let mut pro = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), config(10, 0.3, 20, 3, 32, true)).unwrap();
    pro.run_round(&clients, &test, 1).unwrap();
    assert!(!pro.probabilities().is_uniform());
}

#[test]
fn runs_are_reproducible() {
    let (spec, clients, test) = task(10, 7);
    let cfg = config(10, 0.3, 20, 4, 64, true);
    let a = run_fedkseed(&spec, &clients, &test, &cfg).unwrap();
    let b = run_fedkseed(&spec, &clients, &test, &cfg).unwrap();
    assert_eq!(strip_wall(&a.reports), strip_wall(&b.reports));
    assert_eq!(a.final_slots, b.final_slots);
}

#[test]
fn short_run_reduces_test_loss() {
    let (spec, clients, test) = task(20, 8);
    let cfg = config(20, 0.15, 50, 10, 256, false);
    let run = run_fedkseed(&spec, &clients, &test, &cfg).unwrap();
    assert!(run.final_test_loss() < run.initial_test_loss, "{} -> {}", run.initial_test_loss, run.final_test_loss());
    assert!(run.reports.iter().all(|r| r.sync_steps <= cfg.k));
}

/// Linear regression on features this large overflows the squared error at
/// every probe, so the client's estimator fails.
fn poisoned(n: usize) -> Vec<DataInstance> {
    vec![DataInstance::new(vec![1e200, 1e200], Label::Real(0.0)); n]
}

fn healthy(n: usize, seed: u64) -> Vec<DataInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let f: Vec<f64> = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let y = 0.5 * f[0] - f[1];
            DataInstance::new(f, Label::Real(y))
        })
        .collect()
}

#[test]
fn failed_clients_are_dropped_and_weights_renormalized() {
    let spec = ModelSpec::linear_regression(2, 1);
    let clients = clients_from_datasets(vec![healthy(10, 1), poisoned(50), healthy(30, 2)]);
    let test = healthy(20, 3);
    let cfg = config(3, 1.0, 5, 2, 8, false);
    let run = run_fedkseed(&spec, &clients, &test, &cfg).unwrap();
    for r in &run.reports {
        assert_eq!(r.active_clients, vec![0, 1, 2]);
        assert_eq!(r.contributing, vec![(0, 0.25), (2, 0.75)]);
    }
    let fedzo = run_baseline_fedzo(&spec, &clients, &test, &cfg, Estimator::TwoPoint).unwrap();
    assert_eq!(fedzo.reports[0].contributing, vec![(0, 0.25), (2, 0.75)]);
}

#[test]
fn a_round_where_everyone_fails_is_skipped() {
    let spec = ModelSpec::linear_regression(2, 1);
    let clients = clients_from_datasets(vec![poisoned(5), poisoned(5)]);
    let test = healthy(20, 3);
    let cfg = config(2, 1.0, 3, 3, 8, false);
    let mut server = Server::new(spec.clone(), initial_params(&spec, 77).unwrap(), cfg.clone()).unwrap();
    assert!(matches!(server.run_round(&clients, &test, 1), Err(Error::RoundFailed { round: 1 })));
    let run = run_fedkseed(&spec, &clients, &test, &cfg).unwrap();
    assert_eq!(run.reports.len(), 3);
    for r in &run.reports {
        assert!(r.contributing.is_empty());
        assert_eq!(r.bytes_up, 0);
        assert_eq!(r.global_test_loss, run.initial_test_loss);
    }
}

#[test]
fn fedavg_with_one_client_is_centralized_sgd() {
    let spec = ModelSpec::linear_regression(2, 1);
    let data = healthy(40, 5);
    let clients = clients_from_datasets(vec![data.clone()]);
    let cfg = config(1, 1.0, 10, 4, 8, false);
    let lr = 0.1;
    let run = run_baseline_fedavg_bp(&spec, &clients, &data, &cfg, lr).unwrap();

    let mut w = initial_params(&spec, cfg.master_seed).unwrap();
    for round in 1..=cfg.rounds {
        let mut rng = stream(cfg.master_seed, &[tag::CLIENT, round as u64, 0]);
        for _ in 0..cfg.tau {
            let x = &data[rng.random_range(0..data.len())];
            let g = exact_gradient(&spec, &w, x).unwrap();
            w.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(wi, gi)| *wi -= lr * gi);
        }
        let loss = fedkseed::federation::evaluate(&spec, &w, &data).unwrap().0;
        assert_eq!(run.reports[round - 1].global_test_loss.to_bits(), loss.to_bits(), "round {round}");
    }
}

#[test]
fn fedavg_of_identical_single_instance_clients_equals_either() {
    let spec = ModelSpec::linear_regression(2, 1);
    let one = healthy(1, 9);
    let cfg = config(2, 1.0, 6, 1, 8, false);
    let pair = run_baseline_fedavg_bp(&spec, &clients_from_datasets(vec![one.clone(), one.clone()]), &one, &cfg, 0.2).unwrap();
    let solo = run_baseline_fedavg_bp(&spec, &clients_from_datasets(vec![one.clone()]), &one, &config(1, 1.0, 6, 1, 8, false), 0.2)
        .unwrap();
    assert_eq!(pair.final_test_loss().to_bits(), solo.final_test_loss().to_bits());
}

#[test]
fn baselines_make_progress() {
    let (spec, clients, test) = task(20, 10);
    let cfg = config(20, 0.15, 50, 10, 256, false);
    let bp = run_baseline_fedavg_bp(&spec, &clients, &test, &cfg, 0.05).unwrap();
    let zo = run_baseline_fedzo(&spec, &clients, &test, &cfg, Estimator::OnePoint).unwrap();
    let ks = run_fedkseed(&spec, &clients, &test, &cfg).unwrap();
    assert!(zo.final_test_loss() < zo.initial_test_loss);
    // exact gradients beat zeroth-order estimates at equal step counts
    assert!(bp.final_test_loss() < ks.final_test_loss());
    assert_eq!(bp.reports[0].bytes_up, 4 * spec.param_count().unwrap());
}
