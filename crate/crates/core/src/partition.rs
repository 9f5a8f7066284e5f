//! Synthetic classification data and non-IID client partitioning.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataInstance, Label};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_instances: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    /// Standard deviation of the isotropic cluster noise.
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Train/test split of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<DataInstance>,
    pub test: Vec<DataInstance>,
}

/// Class means pairwise `class_separation` apart: scaled basis vectors when
/// the dimension allows it, random directions of radius `separation / 2`
/// otherwise.
fn class_means<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Vec<Vec<f64>> {
    let (c, dim) = (spec.n_classes, spec.input_dim);
    if c <= dim {
        // random sign per axis so the classes are not all in the positive orthant
        let scale = spec.class_separation / std::f64::consts::SQRT_2;
        (0..c)
            .map(|k| {
                let mut m = vec![0.0; dim];
                m[k] = if rng.random::<bool>() { scale } else { -scale };
                m
            })
            .collect()
    } else if dim == 1 {
        let step = spec.class_separation;
        (0..c).map(|k| vec![(k as f64 - (c - 1) as f64 / 2.0) * step]).collect()
    } else {
        (0..c)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * spec.class_separation / 2.0).collect()
            })
            .collect()
    }
}

/// Gaussian clusters (standard deviation `noise_std`) around per-class means; labels drawn
/// uniformly. Every tenth instance (index ≡ 9 mod 10) goes to the test split.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n_classes < 2 || spec.input_dim == 0 {
        return Err(Error::Config("synthetic data needs >= 2 classes and a positive dimension".into()));
    }
    if spec.n_instances < 10 * spec.n_classes {
        return Err(Error::Config(format!(
            "{} instances is fewer than 10 per class for {} classes",
            spec.n_instances, spec.n_classes
        )));
    }
    if !(spec.class_separation.is_finite() && spec.class_separation > 0.0) {
        return Err(Error::Config("class separation must be positive".into()));
    }
    if !(spec.noise_std.is_finite() && spec.noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be nonnegative".into()));
    }
    let mut rng = stream(spec.seed, &[tag::SYNTH]);
    let means = class_means(spec, &mut rng);
    let mut data = SynthData { train: Vec::new(), test: Vec::new() };
    for i in 0..spec.n_instances {
        let class = rng.random_range(0..spec.n_classes);
        let features = means[class].iter().map(|m| m + spec.noise_std * rng.sample::<f64, _>(StandardNormal)).collect();
        let x = DataInstance::new(features, Label::Class(class));
        if i % 10 == 9 {
            data.test.push(x);
        } else {
            data.train.push(x);
        }
    }
    Ok(data)
}

/// Gamma(α) draws normalized to a point on the simplex; falls back to a
/// random vertex when every draw underflows.
fn dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut q: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = q.iter().sum();
    if total > 0.0 && total.is_finite() {
        q.iter_mut().for_each(|v| *v /= total);
    } else {
        q = vec![0.0; n];
        q[rng.random_range(0..n)] = 1.0;
    }
    q
}

fn categorical<R: Rng>(q: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in q.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final partial sum
    q.iter().rposition(|&p| p > 0.0).unwrap_or(q.len() - 1)
}

const PARTITION_RETRIES: usize = 10;

/// Label-skew split: per class, draw client shares `q ~ Dir(α·1_N)` and send
/// each of that class's instances to a client drawn from `q`.
///
/// Draws that leave a client empty are retried up to a fixed budget; after
/// that each empty client takes one instance from the currently largest
/// client. Returns the client id of every instance.
pub fn dirichlet_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<usize>> {
    let n = spec.num_clients;
    if n == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
        return Err(Error::Config(format!("Dirichlet alpha must be positive, got {}", spec.alpha)));
    }
    if n > labels.len() {
        return Err(Error::Config(format!("{n} clients but only {} instances", labels.len())));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = stream(spec.seed, &[tag::PARTITION]);
    let mut assignment = vec![0; labels.len()];
    for _ in 0..PARTITION_RETRIES {
        let shares: Vec<Vec<f64>> = (0..n_classes).map(|_| dirichlet(spec.alpha, n, &mut rng)).collect();
        for (slot, &c) in assignment.iter_mut().zip(labels) {
            *slot = categorical(&shares[c], &mut rng);
        }
        if client_sizes(&assignment, n).iter().all(|&s| s > 0) {
            return Ok(assignment);
        }
    }
    patch_empty_clients(&mut assignment, n);
    Ok(assignment)
}

fn client_sizes(assignment: &[usize], n: usize) -> Vec<usize> {
    let mut sizes = vec![0; n];
    assignment.iter().for_each(|&c| sizes[c] += 1);
    sizes
}

fn patch_empty_clients(assignment: &mut [usize], n: usize) {
    let mut sizes = client_sizes(assignment, n);
    for empty in 0..n {
        if sizes[empty] > 0 {
            continue;
        }
        let donor = (0..n).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).expect("n > 0");
        let idx = assignment.iter().rposition(|&c| c == donor).expect("donor is nonempty");
        assignment[idx] = empty;
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
}

/// Mean over nonempty clients of the total-variation distance between the
/// client's label distribution and the global one.
pub fn heterogeneity_index(assignment: &[usize], labels: &[usize]) -> Result<f64> {
    if assignment.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract("assignment and labels must be nonempty and equally long".into()));
    }
    let n_clients = assignment.iter().max().map_or(0, |m| m + 1);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n_classes]; n_clients];
    let mut global = vec![0usize; n_classes];
    for (&c, &y) in assignment.iter().zip(labels) {
        counts[c][y] += 1;
        global[y] += 1;
    }
    let total = labels.len() as f64;
    let tvs: Vec<f64> = counts
        .iter()
        .filter_map(|row| {
            let size: usize = row.iter().sum();
            (size > 0).then(|| {
                0.5 * row
                    .iter()
                    .zip(&global)
                    .map(|(&r, &g)| (r as f64 / size as f64 - g as f64 / total).abs())
                    .sum::<f64>()
            })
        })
        .collect();
    Ok(tvs.iter().sum::<f64>() / tvs.len() as f64)
}

/// Splits `data` into per-client datasets following `assignment`.
pub fn group_by_client(data: &[DataInstance], assignment: &[usize], num_clients: usize) -> Vec<Vec<DataInstance>> {
    let mut out = vec![Vec::new(); num_clients];
    for (x, &c) in data.iter().zip(assignment) {
        out[c].push(x.clone());
    }
    out
}

/// Feature-skew mode: shifts every feature of client `i` by a client-specific
/// Gaussian offset with standard deviation `shift_scale`.
pub fn apply_client_shift(clients: &mut [Vec<DataInstance>], shift_scale: f64, seed: u64) {
    for (i, data) in clients.iter_mut().enumerate() {
        let Some(dim) = data.first().map(|x| x.features.len()) else { continue };
        let mut rng = stream(seed, &[tag::SHIFT, i as u64]);
        let offset: Vec<f64> = (0..dim).map(|_| shift_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        for x in data.iter_mut() {
            x.features.iter_mut().zip(&offset).for_each(|(f, o)| *f += o);
        }
    }
}

pub fn labels_of(data: &[DataInstance]) -> Result<Vec<usize>> {
    data.iter()
        .map(|x| x.class().ok_or_else(|| Error::Contract("partitioning needs class labels".into())))
        .collect()
}

/// CSV with header `feature_0,…,feature_{k-1},label`.
pub fn write_dataset_csv(path: &Path, data: &[DataInstance]) -> Result<()> {
    let dim = data.first().map_or(0, |x| x.features.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|i| format!("feature_{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for x in data {
        let mut row: Vec<String> = x.features.iter().map(|f| f.to_string()).collect();
        row.push(match x.label {
            Label::Class(c) => c.to_string(),
            Label::Real(t) => t.to_string(),
        });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads [`write_dataset_csv`] output. Integer labels become classes when
/// `classification` is set, real targets otherwise.
pub fn read_dataset_csv(path: &Path, classification: bool) -> Result<Vec<DataInstance>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().next_back() != Some("label") {
        return Err(Error::Config(format!("{}: last column must be `label`", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad number `{s}`: {e}")));
        let features = rec.iter().take(rec.len() - 1).map(parse).collect::<Result<Vec<_>>>()?;
        let raw = &rec[rec.len() - 1];
        let label = if classification {
            Label::Class(raw.trim().parse().map_err(|e| Error::Config(format!("bad class `{raw}`: {e}")))?)
        } else {
            Label::Real(parse(raw)?)
        };
        out.push(DataInstance::new(features, label));
    }
    Ok(out)
}

/// CSV `instance_index,client_id`.
pub fn write_partition_csv(path: &Path, assignment: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_index", "client_id"])?;
    for (i, c) in assignment.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
