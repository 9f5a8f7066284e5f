use fedkseed::federation::evaluate;
use fedkseed::model::exact_gradient;
use fedkseed::partition::{dirichlet_partition, generate_synthetic, heterogeneity_index, labels_of, PartitionSpec, SynthSpec};
use fedkseed::{ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synth(n_instances: usize, n_classes: usize, input_dim: usize, separation: f64, seed: u64) -> Vec<usize> {
    let data = generate_synthetic(&SynthSpec {
        n_instances,
        n_classes,
        input_dim,
        class_separation: separation,
        noise_std: 1.0,
        seed,
    })
    .unwrap();
    labels_of(&data.train).unwrap()
}

fn histograms(assignment: &[usize], labels: &[usize], n_clients: usize, n_classes: usize) -> Vec<Vec<usize>> {
    let mut h = vec![vec![0; n_classes]; n_clients];
    for (&c, &y) in assignment.iter().zip(labels) {
        h[c][y] += 1;
    }
    h
}

#[test]
fn one_client_receives_everything() {
    let labels = synth(500, 3, 4, 2.0, 1);
    let a = dirichlet_partition(&labels, &PartitionSpec { num_clients: 1, alpha: 0.1, seed: 1 }).unwrap();
    assert!(a.iter().all(|&c| c == 0));
}

#[test]
fn huge_alpha_gives_proportional_histograms() {
    let (n, classes) = (5, 2);
    for seed in 0..5 {
        let labels = synth(11_000, classes, 4, 2.0, seed);
        let a = dirichlet_partition(&labels, &PartitionSpec { num_clients: n, alpha: 1e6, seed }).unwrap();
        let h = histograms(&a, &labels, n, classes);
        for y in 0..classes {
            let expected = labels.iter().filter(|&&l| l == y).count() as f64 / n as f64;
            for (c, row) in h.iter().enumerate() {
                let got = row[y] as f64;
                assert!((got - expected).abs() <= 0.2 * expected, "seed {seed} client {c} class {y}: {got} vs {expected}");
            }
        }
    }
}

#[test]
fn tiny_alpha_concentrates_labels() {
    let (n, classes) = (20, 2);
    let hits = (0..5)
        .filter(|&seed| {
            let labels = synth(4000, classes, 4, 2.0, seed);
            let a = dirichlet_partition(&labels, &PartitionSpec { num_clients: n, alpha: 0.1, seed }).unwrap();
            histograms(&a, &labels, n, classes).iter().any(|row| {
                let size: usize = row.iter().sum();
                size > 0 && *row.iter().max().unwrap() as f64 > 0.9 * size as f64
            })
        })
        .count();
    assert!(hits >= 4, "only {hits} of 5 draws had a >90% single-class client");
}

#[test]
fn smaller_alpha_is_more_heterogeneous() {
    let wins = (0..5)
        .filter(|&seed| {
            let labels = synth(4000, 4, 8, 2.0, seed);
            let index = |alpha| {
                let a = dirichlet_partition(&labels, &PartitionSpec { num_clients: 20, alpha, seed }).unwrap();
                heterogeneity_index(&a, &labels).unwrap()
            };
            index(0.5) > index(5.0)
        })
        .count();
    assert!(wins >= 4, "α=0.5 more heterogeneous than α=5 in only {wins} of 5 draws");
}

#[test]
fn partitions_are_deterministic_and_cover_every_client() {
    let labels = synth(2000, 2, 3, 2.0, 9);
    assert!(labels.iter().all(|&y| y < 2));
    for alpha in [0.05, 0.5, 50.0] {
        let spec = PartitionSpec { num_clients: 30, alpha, seed: 3 };
        let a = dirichlet_partition(&labels, &spec).unwrap();
        assert_eq!(a, dirichlet_partition(&labels, &spec).unwrap());
        assert_eq!(a.len(), labels.len());
        let mut sizes = vec![0; 30];
        a.iter().for_each(|&c| sizes[c] += 1);
        assert!(sizes.iter().all(|&s| s > 0), "alpha {alpha}: {sizes:?}");
    }
}

#[test]
fn well_separated_synthetic_data_is_learnable() {
    let data = generate_synthetic(&SynthSpec {
        n_instances: 2000,
        n_classes: 2,
        input_dim: 2,
        class_separation: 10.0,
        noise_std: 1.0,
        seed: 4,
    })
    .unwrap();
    let spec = ModelSpec::logistic_regression(2, 2);
    let mut w = ParamVector::zeros(spec.param_count().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..2000 {
        let x = &data.train[rng.random_range(0..data.train.len())];
        let g = exact_gradient(&spec, &w, x).unwrap();
        w.as_mut_slice().iter_mut().zip(g.as_slice()).for_each(|(wi, gi)| *wi -= 0.05 * gi);
    }
    let accuracy = evaluate(&spec, &w, &data.test).unwrap().1.unwrap();
    assert!(accuracy > 0.95, "accuracy {accuracy}");
}
