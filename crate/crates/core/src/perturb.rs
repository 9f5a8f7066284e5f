//! Seeded standard-normal perturbations.
//!
//! The perturbation for a seed is a virtual vector `z[0..)` whose element `i`
//! is a pure function of `(seed, i)`. Elements come in Box–Muller pairs: pair
//! `k` covers indices `2k` and `2k + 1` and consumes the two 64-bit words at
//! counters `2k` and `2k + 1` of a SplitMix64-style counter stream keyed by
//! the seed. Transcendentals go through `libm` so the bits are the same on
//! every platform.
//!
//! Nothing here materializes a full-length perturbation: callers walk the
//! vector in windows of at most [`CHUNK_SIZE`] elements.

use crate::error::{Error, Result};
use crate::rng::{mix64, GOLDEN_GAMMA};

/// Largest window handed out at once, in elements.
pub const CHUNK_SIZE: usize = 65_536;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
fn stream_key(seed: u64) -> u64 {
    mix64(seed ^ 0xD1B5_4A32_D192_ED03)
}

#[inline]
fn word(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Box–Muller pair `k` of the stream keyed by `key`.
#[inline]
fn normal_pair(key: u64, pair: u64) -> (f64, f64) {
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((word(key, 2 * pair) >> 11) + 1) as f64 * TWO_POW_NEG_53;
    let u2 = (word(key, 2 * pair + 1) >> 11) as f64 * TWO_POW_NEG_53;
    let radius = libm::sqrt(-2.0 * libm::log(u1));
    let theta = 2.0 * std::f64::consts::PI * u2;
    (radius * libm::cos(theta), radius * libm::sin(theta))
}

/// Fills `out` with `z[offset .. offset + out.len())` for `seed`.
///
/// Unchecked counterpart of [`perturbation_chunk`]; any length works.
pub fn fill_perturbation(seed: u64, offset: usize, out: &mut [f64]) {
    let key = stream_key(seed);
    let mut idx = offset as u64;
    let mut rest = out;
    if idx % 2 == 1 && !rest.is_empty() {
        let (first, tail) = rest.split_at_mut(1);
        first[0] = normal_pair(key, idx / 2).1;
        rest = tail;
        idx += 1;
    }
    let mut pairs = rest.chunks_exact_mut(2);
    for slot in &mut pairs {
        let (a, b) = normal_pair(key, idx / 2);
        slot[0] = a;
        slot[1] = b;
        idx += 2;
    }
    if let [last] = pairs.into_remainder() {
        *last = normal_pair(key, idx / 2).0;
    }
}

/// Returns `z[offset .. offset + len)` for `seed`.
pub fn perturbation_chunk(seed: u64, offset: usize, len: usize) -> Result<Vec<f64>> {
    if len == 0 || len > CHUNK_SIZE {
        return Err(Error::Contract(format!(
            "perturbation chunk length {len} outside 1..={CHUNK_SIZE}"
        )));
    }
    let mut out = vec![0.0; len];
    fill_perturbation(seed, offset, &mut out);
    Ok(out)
}

/// `w ← w + scale · z(seed)`, one chunk at a time.
///
/// A zero scale leaves `w` untouched bit for bit.
pub fn add_scaled_perturbation(w: &mut [f64], seed: u64, scale: f64) -> Result<()> {
    add_scaled_perturbation_chunked(w, seed, scale, CHUNK_SIZE)
}

/// [`add_scaled_perturbation`] with an explicit window size.
pub fn add_scaled_perturbation_chunked(
    w: &mut [f64],
    seed: u64,
    scale: f64,
    chunk_size: usize,
) -> Result<()> {
    if !scale.is_finite() {
        return Err(Error::Contract(format!("non-finite perturbation scale {scale}")));
    }
    if chunk_size == 0 || chunk_size > CHUNK_SIZE {
        return Err(Error::Contract(format!("chunk size {chunk_size} outside 1..={CHUNK_SIZE}")));
    }
    if scale == 0.0 || w.is_empty() {
        return Ok(());
    }
    let mut buf = vec![0.0; chunk_size.min(w.len())];
    for (c, block) in w.chunks_mut(chunk_size).enumerate() {
        let z = &mut buf[..block.len()];
        fill_perturbation(seed, c * chunk_size, z);
        for (wi, zi) in block.iter_mut().zip(z.iter()) {
            *wi += scale * *zi;
        }
    }
    Ok(())
}

/// Sequential reader over a parameter vector, optionally viewed through a
/// perturbation: element `i` reads as `base[i] + scale · z(seed)[i]`.
///
/// The perturbed view holds a single chunk-sized window. Values match what an
/// in-place `add_scaled_perturbation(base, seed, scale)` would leave behind.
pub struct ParamReader<'a> {
    base: &'a [f64],
    pos: usize,
    view: Option<PerturbedWindow>,
}

struct PerturbedWindow {
    seed: u64,
    scale: f64,
    buf: Vec<f64>,
    start: usize,
}

impl<'a> ParamReader<'a> {
    pub fn plain(base: &'a [f64]) -> Self {
        Self { base, pos: 0, view: None }
    }

    pub fn perturbed(base: &'a [f64], seed: u64, scale: f64) -> Self {
        if scale == 0.0 || base.is_empty() {
            return Self::plain(base);
        }
        Self {
            base,
            pos: 0,
            view: Some(PerturbedWindow {
                seed,
                scale,
                buf: Vec::with_capacity(CHUNK_SIZE.min(base.len())),
                start: 0,
            }),
        }
    }

    /// Number of parameters not yet read.
    pub fn remaining(&self) -> usize {
        self.base.len() - self.pos
    }

    /// Next parameter value. Panics past the end; models check lengths first.
    #[inline]
    pub fn next_value(&mut self) -> f64 {
        let i = self.pos;
        self.pos += 1;
        match &mut self.view {
            None => self.base[i],
            Some(v) => {
                if i < v.start || i >= v.start + v.buf.len() {
                    let len = CHUNK_SIZE.min(self.base.len() - i);
                    v.buf.resize(len, 0.0);
                    fill_perturbation(v.seed, i, &mut v.buf);
                    v.start = i;
                }
                self.base[i] + v.scale * v.buf[i - v.start]
            }
        }
    }
}
