//! Zeroth-order scalar-gradient estimators and the seeded update step.
//!
//! Loss probes at `w + s·z(seed)` stream the perturbed parameters through a
//! [`ParamReader`] instead of editing `w`, so estimators take `&ParamVector`
//! and the caller's parameters are untouched by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate_loss_with, DataInstance, ModelSpec, ParamVector};
use crate::perturb::{add_scaled_perturbation, ParamReader};

/// Perturbation scale `epsilon` and learning rate `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub epsilon: f64,
    pub eta: f64,
}

impl ZooConfig {
    pub fn new(epsilon: f64, eta: f64) -> Result<Self> {
        let cfg = Self { epsilon, eta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive and finite, got {}", self.epsilon)));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon.is_finite() && epsilon > 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("epsilon must be positive and finite, got {epsilon}")))
    }
}

/// `L(w + scale · z(seed); x)`. A negative scale probes along `-z`.
pub fn probe_loss(spec: &ModelSpec, w: &ParamVector, x: &DataInstance, seed: u64, scale: f64) -> Result<f64> {
    evaluate_loss_with(spec, ParamReader::perturbed(w.as_slice(), seed, scale), x)
}

/// Two-point estimate `(L(w+εz) − L(w−εz)) / 2ε`.
pub fn scalar_gradient_two_point(
    spec: &ModelSpec,
    w: &ParamVector,
    x: &DataInstance,
    seed: u64,
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    let loss_plus = probe_loss(spec, w, x, seed, epsilon)?;
    let loss_minus = probe_loss(spec, w, x, seed, -epsilon)?;
    if !(loss_plus.is_finite() && loss_minus.is_finite()) {
        return Err(Error::NonFiniteLoss { loss_plus, loss_minus });
    }
    Ok((loss_plus - loss_minus) / (2.0 * epsilon))
}

/// One-point estimate `(L(w+εz) − L(w)) / ε` (mini-batch sizes of one).
pub fn scalar_gradient_one_point(
    spec: &ModelSpec,
    w: &ParamVector,
    x: &DataInstance,
    seed: u64,
    epsilon: f64,
) -> Result<f64> {
    scalar_gradient_one_point_signed(spec, w, x, seed, epsilon)
}

/// One-point estimate along `sign(epsilon) · z`: `(L(w+εz) − L(w)) / |ε|`.
///
/// With a negative `epsilon` this is the estimate for the opposing direction
/// `-z`, whose update direction is also `-z`.
pub fn scalar_gradient_one_point_signed(
    spec: &ModelSpec,
    w: &ParamVector,
    x: &DataInstance,
    seed: u64,
    epsilon: f64,
) -> Result<f64> {
    check_epsilon(epsilon.abs())?;
    let loss_plus = probe_loss(spec, w, x, seed, epsilon)?;
    let loss_base = probe_loss(spec, w, x, seed, 0.0)?;
    if !(loss_plus.is_finite() && loss_base.is_finite()) {
        return Err(Error::NonFiniteLoss { loss_plus, loss_minus: loss_base });
    }
    Ok((loss_plus - loss_base) / epsilon.abs())
}

/// `w ← w − η · ĝ · z(seed)`.
pub fn step_update(w: &mut ParamVector, seed: u64, scalar_grad: f64, eta: f64) -> Result<()> {
    if !scalar_grad.is_finite() {
        return Err(Error::Contract(format!("non-finite scalar gradient {scalar_grad}")));
    }
    add_scaled_perturbation(w.as_mut_slice(), seed, -eta * scalar_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_gradient, Label};
    use crate::perturb::fill_perturbation;

    fn z(seed: u64, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        fill_perturbation(seed, 0, &mut out);
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn quadratic() -> (ModelSpec, ParamVector, DataInstance) {
        let spec = ModelSpec::linear_regression(3, 1);
        let w = ParamVector::from_vec(vec![0.4, -1.2, 0.9, 0.3]).unwrap();
        let x = DataInstance::new(vec![1.0, 0.5, -2.0], Label::Real(0.0));
        (spec, w, x)
    }

    #[test]
    fn two_point_is_exact_on_quadratics() {
        let (spec, w, x) = quadratic();
        let g = exact_gradient(&spec, &w, &x).unwrap();
        for seed in 0..20 {
            let est = scalar_gradient_two_point(&spec, &w, &x, seed, 1e-2).unwrap();
            let truth = dot(&z(seed, 4), g.as_slice());
            assert!((est - truth).abs() <= 1e-10 * truth.abs().max(1.0), "{est} vs {truth}");
        }
    }

    #[test]
    fn two_point_vanishes_at_symmetric_minimum() {
        let (spec, _, x) = quadratic();
        let est = scalar_gradient_two_point(&spec, &ParamVector::zeros(4), &x, 11, 1e-3).unwrap();
        assert!(est.abs() <= 1e-12);
    }

    #[test]
    fn one_point_matches_quadratic_expansion() {
        // L = ½ (wᵀx̃)², so (L(w+εz) − L(w))/ε = zᵀ∇L + (ε/2)(zᵀx̃)²
        let (spec, w, x) = quadratic();
        let xt = [1.0, 0.5, -2.0, 1.0];
        let g = exact_gradient(&spec, &w, &x).unwrap();
        let eps = 1e-3;
        for seed in 0..20 {
            let zs = z(seed, 4);
            let closed = dot(&zs, g.as_slice()) + 0.5 * eps * dot(&zs, &xt).powi(2);
            let est = scalar_gradient_one_point(&spec, &w, &x, seed, eps).unwrap();
            assert!((est - closed).abs() <= 1e-9 * closed.abs().max(1.0), "{est} vs {closed}");
        }
    }

    #[test]
    fn two_point_is_average_of_opposing_one_point() {
        let spec = ModelSpec::logistic_regression(4, 3);
        let w = ParamVector::from_vec((0..15).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let x = DataInstance::new(vec![0.2, -1.0, 3.0, 0.5], Label::Class(2));
        let eps = 1e-3;
        let two = scalar_gradient_two_point(&spec, &w, &x, 8, eps).unwrap();
        let plus = scalar_gradient_one_point_signed(&spec, &w, &x, 8, eps).unwrap();
        let minus = scalar_gradient_one_point_signed(&spec, &w, &x, 8, -eps).unwrap();
        // ĝ(z)·z and ĝ(−z)·(−z) averaged along z
        assert!((two - 0.5 * (plus - minus)).abs() <= 1e-12 * (1.0 + two.abs()));
    }

    #[test]
    fn estimators_leave_parameters_untouched() {
        let (spec, w, x) = quadratic();
        let before = w.clone();
        scalar_gradient_two_point(&spec, &w, &x, 3, 0.1).unwrap();
        scalar_gradient_one_point(&spec, &w, &x, 3, 0.1).unwrap();
        assert!(w.bit_eq(&before));
    }

    #[test]
    fn non_finite_loss_reports_both_probes() {
        let spec = ModelSpec::linear_regression(1, 1);
        let w = ParamVector::from_vec(vec![1e200, 0.0]).unwrap();
        let x = DataInstance::new(vec![1e200], Label::Real(0.0));
        match scalar_gradient_two_point(&spec, &w, &x, 1, 1e-3) {
            Err(Error::NonFiniteLoss { loss_plus, loss_minus }) => {
                assert!(!loss_plus.is_finite() || !loss_minus.is_finite())
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn bad_epsilon_is_rejected() {
        let (spec, w, x) = quadratic();
        assert!(scalar_gradient_two_point(&spec, &w, &x, 1, 0.0).is_err());
        assert!(scalar_gradient_one_point(&spec, &w, &x, 1, f64::NAN).is_err());
        assert!(ZooConfig::new(1e-3, 0.0).is_err());
        assert!(ZooConfig::new(1e-3, 0.1).is_ok());
    }

    #[test]
    fn zero_gradient_update_is_identity() {
        let mut w = ParamVector::from_vec(vec![1.0, -0.0, 3.0]).unwrap();
        let before = w.clone();
        step_update(&mut w, 4, 0.0, 0.5).unwrap();
        assert!(w.bit_eq(&before));
    }

    #[test]
    fn updates_commute() {
        let start = ParamVector::from_vec((0..300).map(|i| i as f64 / 300.0).collect()).unwrap();
        let mut a = start.clone();
        step_update(&mut a, 1, 0.7, 0.01).unwrap();
        step_update(&mut a, 2, -1.3, 0.01).unwrap();
        let mut b = start;
        step_update(&mut b, 2, -1.3, 0.01).unwrap();
        step_update(&mut b, 1, 0.7, 0.01).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn update_matches_full_buffer_oracle() {
        let start = ParamVector::from_vec((0..500).map(|i| (i as f64).sqrt()).collect()).unwrap();
        let (seed, g, eta) = (19, 2.5, 0.03);
        let zs = z(seed, 500);
        let scale = -eta * g;
        let oracle: Vec<f64> = start.as_slice().iter().zip(&zs).map(|(w, z)| w + scale * z).collect();
        let mut w = start;
        step_update(&mut w, seed, g, eta).unwrap();
        assert_eq!(w.as_slice(), oracle.as_slice());
    }
}
