//! Reference models over a flat parameter vector.
//!
//! Every model is a stack of dense layers. Layer `l` with `n_in` inputs and
//! `n_out` outputs owns `n_in · n_out` weights in row-major `[out][in]` order
//! followed by `n_out` biases; layers are laid out back to back. Hidden layers
//! use `tanh`. The head depends on the label: class labels use softmax
//! cross-entropy (squared error against a one-hot target for linear
//! regression), real targets use `½ (y − t)²` with a single output.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::ParamReader;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-regression" | "linear" => Ok(Self::LinearRegression),
            "logistic-regression" | "logistic" => Ok(Self::LogisticRegression),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Hidden widths; must be empty unless `kind` is [`ModelKind::Mlp`].
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize, output_dim: usize) -> Self {
        Self { kind: ModelKind::LinearRegression, input_dim, hidden_dims: Vec::new(), output_dim }
    }

    pub fn logistic_regression(input_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_dim,
            hidden_dims: Vec::new(),
            output_dim: n_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self { kind: ModelKind::Mlp, input_dim, hidden_dims, output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("model input and output dimensions must be positive".into()));
        }
        match self.kind {
            ModelKind::Mlp => {
                if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
                    return Err(Error::Config(
                        "mlp needs at least one hidden layer, all widths positive".into(),
                    ));
                }
            }
            _ if !self.hidden_dims.is_empty() => {
                return Err(Error::Config(format!("{:?} takes no hidden layers", self.kind)));
            }
            ModelKind::LogisticRegression if self.output_dim < 2 => {
                return Err(Error::Config("logistic regression needs at least 2 classes".into()));
            }
            _ => {}
        }
        Ok(())
    }

    /// `(n_in, n_out)` for every dense layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|p| (p[0], p[1])).collect()
    }

    /// Number of parameters `d`.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.layers().iter().map(|&(i, o)| i * o + o).sum())
    }
}

/// Flat model parameters; length fixed at construction, finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("parameter {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// ∞-norm distance to `other`.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Real(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataInstance {
    pub features: Vec<f64>,
    pub label: Label,
}

impl DataInstance {
    pub fn new(features: Vec<f64>, label: Label) -> Self {
        Self { features, label }
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Real(_) => None,
        }
    }
}

enum Head {
    CrossEntropy(usize),
    Squared(Target),
}

enum Target {
    OneHot(usize),
    Scalar(f64),
}

impl Target {
    #[inline]
    fn at(&self, o: usize) -> f64 {
        match *self {
            Target::OneHot(c) => f64::from(u8::from(o == c)),
            Target::Scalar(t) => t,
        }
    }
}

fn head(spec: &ModelSpec, x: &DataInstance) -> Result<Head> {
    if x.features.len() != spec.input_dim {
        return Err(Error::Contract(format!(
            "instance has {} features, model expects {}",
            x.features.len(),
            spec.input_dim
        )));
    }
    match (spec.kind, x.label) {
        (_, Label::Class(c)) if c >= spec.output_dim => Err(Error::Contract(format!(
            "class {c} out of range for {} outputs",
            spec.output_dim
        ))),
        (ModelKind::LinearRegression, Label::Class(c)) => Ok(Head::Squared(Target::OneHot(c))),
        (_, Label::Class(c)) => Ok(Head::CrossEntropy(c)),
        (ModelKind::LogisticRegression, Label::Real(_)) => {
            Err(Error::Contract("logistic regression needs a class label".into()))
        }
        (_, Label::Real(_)) if spec.output_dim != 1 => {
            Err(Error::Contract("a real target needs exactly one output".into()))
        }
        (_, Label::Real(t)) => Ok(Head::Squared(Target::Scalar(t))),
    }
}

fn check_params(spec: &ModelSpec, d: usize) -> Result<()> {
    let expected = spec.param_count()?;
    if d != expected {
        return Err(Error::Contract(format!("parameter vector has length {d}, model needs {expected}")));
    }
    Ok(())
}

/// Dense layer reading its weights then biases from `params`.
fn dense(params: &mut ParamReader<'_>, input: &[f64], n_out: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let mut acc = 0.0;
        for &a in input {
            acc += params.next_value() * a;
        }
        out.push(acc);
    }
    for y in out.iter_mut() {
        *y += params.next_value();
    }
    out
}

/// `log Σ exp(y)` with the max shifted out.
fn log_sum_exp(y: &[f64]) -> f64 {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + y.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn head_loss(head: &Head, y: &[f64]) -> f64 {
    match head {
        Head::CrossEntropy(c) => log_sum_exp(y) - y[*c],
        Head::Squared(t) => 0.5 * y.iter().enumerate().map(|(o, v)| (v - t.at(o)).powi(2)).sum::<f64>(),
    }
}

fn forward(spec: &ModelSpec, params: &mut ParamReader<'_>, features: &[f64]) -> Vec<f64> {
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut act: Option<Vec<f64>> = None;
    for (l, &(_, n_out)) in layers.iter().enumerate() {
        let mut out = dense(params, act.as_deref().unwrap_or(features), n_out);
        if l != last {
            out.iter_mut().for_each(|a| *a = a.tanh());
        }
        act = Some(out);
    }
    act.unwrap_or_default()
}

/// Raw model outputs (logits or regression values).
pub fn predict(spec: &ModelSpec, w: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, w.len())?;
    if features.len() != spec.input_dim {
        return Err(Error::Contract("feature length does not match the model".into()));
    }
    Ok(forward(spec, &mut ParamReader::plain(w.as_slice()), features))
}

/// `L(w; x)` for one instance.
pub fn evaluate_loss(spec: &ModelSpec, w: &ParamVector, x: &DataInstance) -> Result<f64> {
    evaluate_loss_with(spec, ParamReader::plain(w.as_slice()), x)
}

/// Loss with parameters streamed from `params`, which must cover exactly `d` values.
pub fn evaluate_loss_with(spec: &ModelSpec, mut params: ParamReader<'_>, x: &DataInstance) -> Result<f64> {
    check_params(spec, params.remaining())?;
    let head = head(spec, x)?;
    let y = forward(spec, &mut params, &x.features);
    Ok(head_loss(&head, &y))
}

/// `∇_w L(w; x)` by backpropagation.
pub fn exact_gradient(spec: &ModelSpec, w: &ParamVector, x: &DataInstance) -> Result<ParamVector> {
    check_params(spec, w.len())?;
    let head = head(spec, x)?;
    let layers = spec.layers();
    let params = w.as_slice();

    // forward pass keeping every layer input
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut offsets = Vec::with_capacity(layers.len());
    let mut act = x.features.clone();
    let mut off = 0;
    for (l, &(n_in, n_out)) in layers.iter().enumerate() {
        offsets.push(off);
        let (wts, bias) = (&params[off..off + n_in * n_out], &params[off + n_in * n_out..off + n_in * n_out + n_out]);
        let mut out: Vec<f64> = wts.chunks_exact(n_in).map(|row| row.iter().zip(&act).map(|(w, a)| w * a).sum()).collect();
        out.iter_mut().zip(bias).for_each(|(y, b)| *y += b);
        if l != layers.len() - 1 {
            out.iter_mut().for_each(|a| *a = a.tanh());
        }
        inputs.push(std::mem::replace(&mut act, out));
        off += n_in * n_out + n_out;
    }

    // dL/dy at the output
    let mut delta: Vec<f64> = match &head {
        Head::CrossEntropy(c) => {
            let lse = log_sum_exp(&act);
            act.iter().enumerate().map(|(o, y)| (y - lse).exp() - f64::from(u8::from(o == *c))).collect()
        }
        Head::Squared(t) => act.iter().enumerate().map(|(o, y)| y - t.at(o)).collect(),
    };

    let mut grad = vec![0.0; params.len()];
    for l in (0..layers.len()).rev() {
        let (n_in, n_out) = layers[l];
        let off = offsets[l];
        let input = &inputs[l];
        for o in 0..n_out {
            let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
            row.iter_mut().zip(input).for_each(|(g, a)| *g = delta[o] * a);
            grad[off + n_in * n_out + o] = delta[o];
        }
        if l > 0 {
            let wts = &params[off..off + n_in * n_out];
            // input here is tanh output of the previous layer
            delta = (0..n_in)
                .map(|i| {
                    let back: f64 = (0..n_out).map(|o| wts[o * n_in + i] * delta[o]).sum();
                    back * (1.0 - input[i] * input[i])
                })
                .collect();
        }
    }
    Ok(ParamVector(grad))
}

/// Initial parameters: zeros for the convex models, scaled Gaussian weights
/// (`1/√n_in`) and zero biases for the MLP.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ParamVector> {
    let d = spec.param_count()?;
    if spec.kind != ModelKind::Mlp {
        return Ok(ParamVector::zeros(d));
    }
    let mut values = Vec::with_capacity(d);
    for (n_in, n_out) in spec.layers() {
        let std = 1.0 / (n_in as f64).sqrt();
        values.extend((0..n_in * n_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)));
        values.extend(std::iter::repeat_n(0.0, n_out));
    }
    Ok(ParamVector(values))
}
