//! Shared protocol state: the candidate seed pool, the scalar-gradient
//! accumulator, model reconstruction and the Pro-mode seed probabilities.

use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::perturb::add_scaled_perturbation;
use crate::rng::{mix64, GOLDEN_GAMMA};
use crate::zoo::step_update;

/// The K distinct candidate seeds, generated from a master seed.
#[derive(Debug, Clone)]
pub struct SeedPool {
    master_seed: u64,
    seeds: Vec<u32>,
    slots: HashMap<u32, usize>,
}

impl PartialEq for SeedPool {
    fn eq(&self, other: &Self) -> bool {
        self.master_seed == other.master_seed && self.seeds == other.seeds
    }
}

/// Draws `k` distinct 32-bit seeds from a SplitMix64 stream seeded with
/// `master_seed`, skipping duplicates.
pub fn init_pool(master_seed: u64, k: usize) -> Result<SeedPool> {
    if k == 0 {
        return Err(Error::Config("seed pool needs K >= 1".into()));
    }
    if k as u64 > 1 << 32 {
        return Err(Error::ImpossiblePool { requested: k as u64 });
    }
    let mut seeds = Vec::with_capacity(k);
    let mut slots = HashMap::with_capacity(k);
    let mut state = master_seed;
    while seeds.len() < k {
        state = state.wrapping_add(GOLDEN_GAMMA);
        let candidate = (mix64(state) >> 32) as u32;
        if let std::collections::hash_map::Entry::Vacant(e) = slots.entry(candidate) {
            e.insert(seeds.len());
            seeds.push(candidate);
        }
    }
    Ok(SeedPool { master_seed, seeds, slots })
}

impl SeedPool {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn seeds(&self) -> &[u32] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn seed(&self, slot: usize) -> u32 {
        self.seeds[slot]
    }

    pub fn slot_of(&self, seed: u32) -> Option<usize> {
        self.slots.get(&seed).copied()
    }
}

/// Per-slot running sums `a_j`, plus the `|G_j|` and `Σ|ĝ|` statistics that
/// drive the seed probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradAccumulator {
    slots: Vec<f64>,
    sample_counts: Vec<u64>,
    abs_sums: Vec<f64>,
}

impl GradAccumulator {
    pub fn new(k: usize) -> Self {
        Self { slots: vec![0.0; k], sample_counts: vec![0; k], abs_sums: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[f64] {
        &self.slots
    }

    pub fn sample_counts(&self) -> &[u64] {
        &self.sample_counts
    }

    pub fn abs_sums(&self) -> &[f64] {
        &self.abs_sums
    }

    pub fn nonzero_slots(&self) -> usize {
        self.slots.iter().filter(|a| **a != 0.0).count()
    }

    /// Folds one client's history in with aggregation weight `weight`:
    /// `a_j += weight · ĝ`, `|G_j| += 1`, `Σ|ĝ| += |ĝ|` per entry.
    ///
    /// The whole history is validated before any slot changes.
    pub fn accumulate(&mut self, history: &GradHistory, weight: f64, pool: &SeedPool) -> Result<()> {
        if pool.len() != self.len() {
            return Err(Error::Protocol(format!(
                "accumulator has {} slots but the pool has {} seeds",
                self.len(),
                pool.len()
            )));
        }
        if !(weight.is_finite() && (0.0..=1.0).contains(&weight)) {
            return Err(Error::Contract(format!("aggregation weight {weight} outside [0, 1]")));
        }
        let resolved = history
            .iter()
            .map(|&(seed, g)| {
                let slot = pool
                    .slot_of(seed)
                    .ok_or_else(|| Error::Protocol(format!("seed {seed} is not in the candidate pool")))?;
                if !g.is_finite() {
                    return Err(Error::Protocol(format!("non-finite scalar gradient for seed {seed}")));
                }
                Ok((slot, g))
            })
            .collect::<Result<Vec<_>>>()?;
        for (slot, g) in resolved {
            self.slots[slot] += weight * g;
            self.sample_counts[slot] += 1;
            self.abs_sums[slot] += g.abs();
        }
        Ok(())
    }

    /// Clears the `|G_j|` / `Σ|ĝ|` statistics, keeping the slot sums.
    pub fn reset_statistics(&mut self) {
        self.sample_counts.iter_mut().for_each(|c| *c = 0);
        self.abs_sums.iter_mut().for_each(|s| *s = 0.0);
    }
}

/// One client's ordered `(seed, scalar gradient)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradHistory {
    entries: Vec<(u32, f64)>,
}

impl GradHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { entries: Vec::with_capacity(n) }
    }

    pub fn push(&mut self, seed: u32, grad: f64) {
        self.entries.push((seed, grad));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, (u32, f64)> {
        self.entries.iter()
    }
}

impl FromIterator<(u32, f64)> for GradHistory {
    fn from_iter<I: IntoIterator<Item = (u32, f64)>>(iter: I) -> Self {
        Self { entries: iter.into_iter().collect() }
    }
}

/// `w⁰ − η Σ_j a_j z(s_j)` over the nonzero slots of `acc`.
pub fn reconstruct_model(w0: &ParamVector, pool: &SeedPool, acc: &GradAccumulator, eta: f64) -> Result<ParamVector> {
    let mut w = w0.clone();
    reconstruct_in_place(&mut w, pool, acc.slots(), eta)?;
    Ok(w)
}

/// Applies `−η · slots[j] · z(s_j)` to `w` for every nonzero slot and returns
/// the number of perturbation passes made (at most K).
pub fn reconstruct_in_place(w: &mut ParamVector, pool: &SeedPool, slots: &[f64], eta: f64) -> Result<usize> {
    if slots.len() != pool.len() {
        return Err(Error::Protocol(format!(
            "{} accumulator slots for a pool of {} seeds",
            slots.len(),
            pool.len()
        )));
    }
    let mut passes = 0;
    for (j, &a) in slots.iter().enumerate() {
        if a != 0.0 {
            step_update(w, u64::from(pool.seed(j)), a, eta)?;
            passes += 1;
        }
    }
    Ok(passes)
}

/// Coordinates `G` of the model in the K-dimensional subspace spanned by the
/// pool's perturbations: `w = w⁰ + Σ_j G_j z(s_j)` with `G_j = −η a_j`.
pub fn subspace_coefficients(acc: &GradAccumulator, eta: f64) -> Vec<f64> {
    acc.slots().iter().map(|a| -eta * a).collect()
}

/// `w⁰ + Σ_j G_j z(s_j)`.
pub fn model_from_subspace(w0: &ParamVector, pool: &SeedPool, coefficients: &[f64]) -> Result<ParamVector> {
    if coefficients.len() != pool.len() {
        return Err(Error::Protocol("coefficient count does not match the pool".into()));
    }
    let mut w = w0.clone();
    for (j, &g) in coefficients.iter().enumerate() {
        if g != 0.0 {
            add_scaled_perturbation(w.as_mut_slice(), u64::from(pool.seed(j)), g)?;
        }
    }
    Ok(w)
}

/// Sampling distribution over the K seed slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProbabilities {
    p: Vec<f64>,
}

impl SeedProbabilities {
    pub fn uniform(k: usize) -> Self {
        Self { p: vec![1.0 / k as f64; k] }
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
            return Err(Error::Contract("seed weights must be finite, nonnegative and not all zero".into()));
        }
        Ok(Self { p: weights.iter().map(|w| w / total).collect() })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.p.windows(2).all(|w| w[0] == w[1])
    }
}

/// Seed importance `ψ_j = Σ|ĝ| / |G_j|` (0 for unseen slots), min-max
/// normalized to `[0, 1]`, then softmax. All-equal `ψ` gives the uniform
/// distribution.
pub fn update_probabilities(acc: &GradAccumulator) -> SeedProbabilities {
    let psi: Vec<f64> = acc
        .abs_sums()
        .iter()
        .zip(acc.sample_counts())
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let lo = psi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return SeedProbabilities::uniform(psi.len());
    }
    // normalized values lie in [0, 1], so exp needs no shift
    let e: Vec<f64> = psi.iter().map(|v| ((v - lo) / (hi - lo)).exp()).collect();
    let total: f64 = e.iter().sum();
    SeedProbabilities { p: e.into_iter().map(|v| v / total).collect() }
}

/// Draws seed slots from a fixed distribution.
#[derive(Debug, Clone)]
pub enum SeedSampler {
    Uniform(usize),
    Weighted(WeightedIndex<f64>),
}

impl SeedSampler {
    pub fn new(p: &SeedProbabilities) -> Result<Self> {
        if p.is_uniform() {
            return Ok(Self::Uniform(p.len()));
        }
        WeightedIndex::new(p.as_slice())
            .map(Self::Weighted)
            .map_err(|e| Error::Contract(format!("invalid seed probabilities: {e}")))
    }

    pub fn uniform(k: usize) -> Self {
        Self::Uniform(k)
    }

    /// `(seed, slot)`.
    pub fn sample<R: Rng + ?Sized>(&self, pool: &SeedPool, rng: &mut R) -> (u32, usize) {
        let slot = match self {
            Self::Uniform(k) => rng.random_range(0..*k),
            Self::Weighted(w) => w.sample(rng),
        };
        (pool.seed(slot), slot)
    }
}

/// One draw from `p`. Prefer a reused [`SeedSampler`] for repeated draws.
pub fn sample_seed<R: Rng + ?Sized>(pool: &SeedPool, p: &SeedProbabilities, rng: &mut R) -> Result<(u32, usize)> {
    if p.len() != pool.len() {
        return Err(Error::Contract("probability count does not match the pool".into()));
    }
    Ok(SeedSampler::new(p)?.sample(pool, rng))
}
