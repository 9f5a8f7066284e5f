//! Byte-exact codecs for the round messages.
//!
//! Layouts, all little-endian with no framing:
//!
//! * downlink: `[pool seed: u32][a_1..a_K: f32][p_1..p_K: f32, Pro only]`,
//!   `4 + 4K` or `4 + 8K` bytes. K travels out of band.
//! * uplink: `[seed: u32][grad: f32]` per history entry, `8τ` bytes.

use crate::error::{Error, Result};
use crate::seed_state::{GradAccumulator, GradHistory, SeedProbabilities};

#[derive(Debug, Clone, PartialEq)]
pub struct DownlinkMsg {
    pub master_seed: u32,
    pub accumulator: Vec<f32>,
    pub probabilities: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkMsg {
    pub entries: Vec<(u32, f32)>,
}

/// Per-client byte counts for one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundBytes {
    pub down: usize,
    pub up: usize,
    pub total: usize,
}

/// Closed-form per-client traffic for one round.
pub fn round_bytes(k: usize, tau: usize, pro: bool) -> RoundBytes {
    let down = downlink_len(k, pro);
    let up = 8 * tau;
    RoundBytes { down, up, total: down + up }
}

pub fn downlink_len(k: usize, pro: bool) -> usize {
    4 + if pro { 8 * k } else { 4 * k }
}

fn narrow(v: f64, what: &str) -> Result<f32> {
    let n = v as f32;
    if !n.is_finite() {
        return Err(Error::Encode(format!("{what} {v} is not representable as a finite f32")));
    }
    Ok(n)
}

impl DownlinkMsg {
    /// Narrows server state to the wire representation.
    pub fn from_state(master_seed: u32, acc: &GradAccumulator, probabilities: Option<&SeedProbabilities>) -> Result<Self> {
        let accumulator = acc.slots().iter().map(|&a| narrow(a, "accumulator slot")).collect::<Result<_>>()?;
        let probabilities = probabilities
            .map(|p| p.as_slice().iter().map(|&v| narrow(v, "probability")).collect::<Result<Vec<_>>>())
            .transpose()?;
        Ok(Self { master_seed, accumulator, probabilities })
    }

    pub fn k(&self) -> usize {
        self.accumulator.len()
    }

    /// Accumulator slots widened back to f64.
    pub fn slots_f64(&self) -> Vec<f64> {
        self.accumulator.iter().map(|&a| f64::from(a)).collect()
    }
}

pub fn encode_downlink(msg: &DownlinkMsg) -> Result<Vec<u8>> {
    let k = msg.accumulator.len();
    if k == 0 {
        return Err(Error::Encode("downlink needs K >= 1".into()));
    }
    if let Some(p) = &msg.probabilities {
        if p.len() != k {
            return Err(Error::Encode(format!("{} probabilities for K = {k}", p.len())));
        }
    }
    let values = msg.accumulator.iter().chain(msg.probabilities.iter().flatten());
    let mut out = Vec::with_capacity(downlink_len(k, msg.probabilities.is_some()));
    out.extend_from_slice(&msg.master_seed.to_le_bytes());
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Encode(format!("non-finite value {v} in downlink")));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn read_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode_downlink(bytes: &[u8], k: usize, pro: bool) -> Result<DownlinkMsg> {
    if k == 0 {
        return Err(Error::Protocol("downlink K must be positive".into()));
    }
    let expected = downlink_len(k, pro);
    if bytes.len() != expected {
        return Err(Error::Protocol(format!(
            "downlink is {} bytes, expected {expected} for K = {k}{}",
            bytes.len(),
            if pro { " with probabilities" } else { "" }
        )));
    }
    let master_seed = read_u32(&bytes[..4]);
    let mut floats = bytes[4..].chunks_exact(4).map(read_f32);
    let accumulator: Vec<f32> = floats.by_ref().take(k).collect();
    let probabilities = pro.then(|| floats.collect());
    Ok(DownlinkMsg { master_seed, accumulator, probabilities })
}

impl UplinkMsg {
    pub fn from_history(history: &GradHistory) -> Result<Self> {
        let entries = history.iter().map(|&(s, g)| Ok((s, narrow(g, "scalar gradient")?))).collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    /// Widened back to f64 for aggregation.
    pub fn to_history(&self) -> GradHistory {
        self.entries.iter().map(|&(s, g)| (s, f64::from(g))).collect()
    }
}

pub fn encode_uplink(msg: &UplinkMsg) -> Result<Vec<u8>> {
    if msg.entries.is_empty() {
        return Err(Error::Encode("uplink needs at least one entry".into()));
    }
    let mut out = Vec::with_capacity(8 * msg.entries.len());
    for &(seed, grad) in &msg.entries {
        if !grad.is_finite() {
            return Err(Error::Encode(format!("non-finite scalar gradient {grad} for seed {seed}")));
        }
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&grad.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_uplink(bytes: &[u8]) -> Result<UplinkMsg> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(8) {
        return Err(Error::Protocol(format!("uplink length {} is not a positive multiple of 8", bytes.len())));
    }
    let entries = bytes.chunks_exact(8).map(|c| (read_u32(&c[..4]), read_f32(&c[4..]))).collect();
    Ok(UplinkMsg { entries })
}

/// Lowercase hex without separators.
pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn from_hex(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    if !s.len().is_multiple_of(2) {
        return Err(Error::Protocol("odd-length hex string".into()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Protocol(format!("bad hex: {e}"))))
        .collect()
}
