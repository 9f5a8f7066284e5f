//! Self-test run by `fedkseed verify`: frozen golden vectors for the
//! perturbation generator and the wire codecs, plus randomized batches of
//! the two-point/one-point identity and replay/reconstruction equivalence.
//!
//! The default fixtures are compiled in; a directory override lets a
//! deployment check the files it actually ships.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{DataInstance, Label, ModelSpec, ParamVector};
use crate::perturb::fill_perturbation;
use crate::seed_state::{init_pool, reconstruct_model, GradAccumulator, GradHistory};
use crate::wire::{decode_downlink, decode_uplink, encode_downlink, encode_uplink, from_hex, to_hex, DownlinkMsg, UplinkMsg};
use crate::zoo::{scalar_gradient_one_point_signed, scalar_gradient_two_point, step_update};

pub const PERTURB_FIXTURE: &str = "perturb_golden.txt";
pub const WIRE_FIXTURE: &str = "wire_golden.txt";

const PERTURB_DEFAULT: &str = include_str!("../fixtures/perturb_golden.txt");
const WIRE_DEFAULT: &str = include_str!("../fixtures/wire_golden.txt");

/// Relative bound on |two-point − mean of opposing one-point estimates|.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
/// Relative bound on the replay/reconstruction ∞-norm gap.
pub const REPLAY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Read fixtures from this directory instead of the compiled-in copies.
    pub fixtures_dir: Option<PathBuf>,
    /// Multiplies every numeric tolerance; 1.0 checks the documented bounds.
    pub tolerance_scale: f64,
    pub identity_trials: usize,
    pub replay_trials: usize,
    pub replay_dim: usize,
    pub replay_k: usize,
    pub replay_entries: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            fixtures_dir: None,
            tolerance_scale: 1.0,
            identity_trials: 1000,
            replay_trials: 20,
            replay_dim: 1000,
            replay_k: 512,
            replay_entries: 10_000,
            seed: 0x5EED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    fn push(&mut self, name: &str, outcome: std::result::Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(Check { name: name.to_string(), passed, detail });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

fn fixture_text(dir: Option<&Path>, name: &str, default: &str) -> std::result::Result<String, String> {
    match dir {
        None => Ok(default.to_string()),
        Some(d) => std::fs::read_to_string(d.join(name)).map_err(|e| format!("cannot read {}: {e}", d.join(name).display())),
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn check_perturb_golden(text: &str) -> std::result::Result<String, String> {
    let mut count = 0;
    for (line_no, line) in data_lines(text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [s, i, bits] => s
                .parse::<u64>()
                .ok()
                .zip(i.parse::<usize>().ok())
                .zip(u64::from_str_radix(bits, 16).ok())
                .map(|((s, i), b)| (s, i, b)),
            _ => None,
        };
        let (seed, index, bits) = parsed.ok_or_else(|| format!("line {line_no}: expected `seed index hexbits`"))?;
        let mut v = [0.0];
        fill_perturbation(seed, index, &mut v);
        if v[0].to_bits() != bits {
            return Err(format!(
                "line {line_no}: z({seed})[{index}] = {:016x}, fixture says {bits:016x}",
                v[0].to_bits()
            ));
        }
        count += 1;
    }
    if count == 0 {
        return Err("no golden values".into());
    }
    Ok(format!("{count} values bit-identical"))
}

/// The messages the wire fixture encodes, by name.
pub fn reference_messages() -> (DownlinkMsg, DownlinkMsg, UplinkMsg) {
    let plain = DownlinkMsg { master_seed: 0x0102_0304, accumulator: vec![1.5, -2.0, 0.25], probabilities: None };
    let pro = DownlinkMsg { probabilities: Some(vec![0.25, 0.5, 0.25]), ..plain.clone() };
    let up = UplinkMsg { entries: vec![(7, 0.25), (u32::MAX, -1e-3), (123_456_789, 3.5)] };
    (plain, pro, up)
}

fn check_wire_golden(text: &str) -> std::result::Result<String, String> {
    let (plain, pro, up) = reference_messages();
    let mut seen = Vec::new();
    for (line_no, line) in data_lines(text) {
        let (name, hex) = line.split_once(char::is_whitespace).ok_or_else(|| format!("line {line_no}: expected `name hex`"))?;
        let bytes = from_hex(hex).map_err(|e| format!("line {line_no}: {e}"))?;
        let (encoded, decodes) = match name {
            "downlink" => (encode_downlink(&plain), decode_downlink(&bytes, 3, false).ok() == Some(plain.clone())),
            "downlink-pro" => (encode_downlink(&pro), decode_downlink(&bytes, 3, true).ok() == Some(pro.clone())),
            "uplink" => (encode_uplink(&up), decode_uplink(&bytes).ok() == Some(up.clone())),
            other => return Err(format!("line {line_no}: unknown message `{other}`")),
        };
        let encoded = encoded.map_err(|e| format!("{name}: {e}"))?;
        if encoded != bytes {
            return Err(format!("{name}: encodes to {}, fixture says {}", to_hex(&encoded), hex.trim()));
        }
        if !decodes {
            return Err(format!("{name}: fixture bytes do not decode to the reference message"));
        }
        seen.push(name);
    }
    for required in ["downlink", "downlink-pro", "uplink"] {
        if !seen.contains(&required) {
            return Err(format!("missing `{required}` dump"));
        }
    }
    Ok(format!("{} dumps byte-identical", seen.len()))
}

fn random_instance<R: Rng>(spec: &ModelSpec, rng: &mut R) -> DataInstance {
    let features = (0..spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let label = match spec.kind {
        crate::model::ModelKind::LinearRegression if spec.output_dim == 1 => Label::Real(rng.random_range(-2.0..2.0)),
        _ => Label::Class(rng.random_range(0..spec.output_dim)),
    };
    DataInstance::new(features, label)
}

fn random_spec<R: Rng>(rng: &mut R) -> ModelSpec {
    let input = rng.random_range(1..12);
    match rng.random_range(0..3) {
        0 => ModelSpec::linear_regression(input, 1),
        1 => ModelSpec::logistic_regression(input, rng.random_range(2..6)),
        _ => ModelSpec::mlp(input, vec![rng.random_range(2..8)], rng.random_range(2..5)),
    }
}

/// Worst `|two − ½(one(z) − one(−z))| / (1 + |two|)` over random tuples.
pub fn identity_worst_ratio(trials: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let spec = random_spec(&mut rng);
        let d = spec.param_count()?;
        let w = ParamVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let x = random_instance(&spec, &mut rng);
        let z_seed: u64 = rng.random();
        let eps = 10f64.powf(rng.random_range(-3.0..-1.0));
        let two = scalar_gradient_two_point(&spec, &w, &x, z_seed, eps)?;
        let plus = scalar_gradient_one_point_signed(&spec, &w, &x, z_seed, eps)?;
        let minus = scalar_gradient_one_point_signed(&spec, &w, &x, z_seed, -eps)?;
        worst = worst.max((two - 0.5 * (plus - minus)).abs() / (1.0 + two.abs()));
    }
    Ok(worst)
}

/// Worst `‖replay − reconstruction‖∞ / (1 + ‖replay‖∞)` over random trials.
///
/// Replay applies every history entry as its own update; reconstruction
/// folds the history into per-seed accumulator slots first.
pub fn replay_worst_ratio(trials: usize, d: usize, k: usize, entries: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let pool = init_pool(rng.random(), k)?;
        let eta = 10f64.powf(rng.random_range(-3.0..-1.0));
        let w0 = ParamVector::from_vec((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let history: GradHistory =
            (0..entries).map(|_| (pool.seed(rng.random_range(0..k)), rng.random_range(-1.0..1.0))).collect();
        let mut replay = w0.clone();
        for &(s, g) in history.iter() {
            step_update(&mut replay, u64::from(s), g, eta)?;
        }
        let mut acc = GradAccumulator::new(k);
        acc.accumulate(&history, 1.0, &pool)?;
        let rebuilt = reconstruct_model(&w0, &pool, &acc, eta)?;
        worst = worst.max(rebuilt.max_abs_diff(&replay) / (1.0 + replay.max_abs()));
    }
    Ok(worst)
}

fn bounded(worst: crate::Result<f64>, bound: f64) -> std::result::Result<String, String> {
    match worst {
        Ok(w) if w <= bound => Ok(format!("worst relative gap {w:.3e} <= {bound:.1e}")),
        Ok(w) => Err(format!("worst relative gap {w:.3e} exceeds {bound:.1e}")),
        Err(e) => Err(e.to_string()),
    }
}

/// Runs every check and collects the outcomes; never stops at the first
/// failure.
pub fn verify_fixtures(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    let dir = opts.fixtures_dir.as_deref();
    report.push(PERTURB_FIXTURE, fixture_text(dir, PERTURB_FIXTURE, PERTURB_DEFAULT).and_then(|t| check_perturb_golden(&t)));
    report.push(WIRE_FIXTURE, fixture_text(dir, WIRE_FIXTURE, WIRE_DEFAULT).and_then(|t| check_wire_golden(&t)));
    report.push(
        "estimator identity",
        bounded(identity_worst_ratio(opts.identity_trials, opts.seed), IDENTITY_TOLERANCE * opts.tolerance_scale),
    );
    report.push(
        "replay equivalence",
        bounded(
            replay_worst_ratio(opts.replay_trials, opts.replay_dim, opts.replay_k, opts.replay_entries, opts.seed),
            REPLAY_TOLERANCE * opts.tolerance_scale,
        ),
    );
    report
}
