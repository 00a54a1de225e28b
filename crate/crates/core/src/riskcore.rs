//! Tail-risk estimators and the saddle-point updates for the CVaR constraint.
//!
//! Returns are treated as rewards (higher is better), so the risky tail is
//! the *lower* tail. `VaR_α` is the empirical α-quantile and `CVaR_α` is the
//! mean of the worst `⌈α·N⌉` samples, which is the exact maximizer of the
//! Rockafellar–Uryasev dual
//!
//! ```text
//! CVaR_α(R) = sup_η  η − E[(η − R)⁺] / α
//! ```
//!
//! whenever `α·N` is an integer.

use serde::{Deserialize, Serialize};

use crate::error::RiskError;

/// Weight of the newest `VaR_α` observation in the constraint-level EMA.
pub const BETA_EMA_WEIGHT: f64 = 0.3;

/// Risk level α ∈ (0, 1]. Small values are risk-averse, 1 is risk-neutral.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskLevel(f64);

impl RiskLevel {
    pub fn new(alpha: f64) -> Result<Self, RiskError> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(RiskError::InvalidAlpha(alpha))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Size of the lower tail, `⌈α·N⌉`, clamped to `[1, N]`.
    ///
    /// The product is nudged down by a few ulps before rounding up so that
    /// e.g. `0.1 * 30 = 3.0000000000000004` still counts as three samples.
    pub fn tail_count(self, n: usize) -> usize {
        let x = self.0 * n as f64;
        let k = (x - x.max(1.0) * 1e-12).ceil() as usize;
        k.clamp(1, n.max(1))
    }
}

impl TryFrom<f64> for RiskLevel {
    type Error = RiskError;

    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<RiskLevel> for f64 {
    fn from(value: RiskLevel) -> Self {
        value.0
    }
}

/// A non-empty set of finite return realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSample {
    values: Vec<f64>,
    sorted: Vec<f64>,
}

impl ReturnSample {
    pub fn new(values: Vec<f64>) -> Result<Self, RiskError> {
        if values.is_empty() {
            return Err(RiskError::EmptySample);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite {
                index: i,
                value: values[i],
            });
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { values, sorted })
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, RiskError> {
        Self::new(values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Ascending order.
    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.len() - 1]
    }

    /// Fraction of samples with `D ≤ threshold`.
    pub fn fraction_at_or_below(&self, threshold: f64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= threshold);
        count as f64 / self.len() as f64
    }

    /// `E[(threshold − D)⁺]`.
    pub fn mean_shortfall(&self, threshold: f64) -> f64 {
        self.values
            .iter()
            .map(|&v| (threshold - v).max(0.0))
            .sum::<f64>()
            / self.len() as f64
    }
}

/// Empirical α-quantile: the sorted sample at index `⌈α·N⌉ − 1`.
pub fn var_estimate(samples: &ReturnSample, alpha: RiskLevel) -> f64 {
    samples.sorted()[alpha.tail_count(samples.len()) - 1]
}

/// Mean of the lowest `⌈α·N⌉` samples.
pub fn cvar_estimate(samples: &ReturnSample, alpha: RiskLevel) -> f64 {
    let k = alpha.tail_count(samples.len());
    samples.sorted()[..k].iter().sum::<f64>() / k as f64
}

/// Multiplier, threshold and constraint level of the CVaR-constrained
/// Lagrangian, together with their step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    /// CVaR auxiliary threshold, reward units.
    pub eta: f64,
    /// Multiplier, always within `[0, lambda_max]`.
    pub lambda: f64,
    /// Constraint level: the policy should keep `CVaR_α ≥ beta`.
    pub beta: f64,
    pub lambda_max: f64,
    pub lr_eta: f64,
    pub lr_lambda: f64,
}

impl LagrangianState {
    pub fn new(
        eta: f64,
        beta: f64,
        lambda_max: f64,
        lr_eta: f64,
        lr_lambda: f64,
    ) -> Result<Self, RiskError> {
        let state = Self {
            eta,
            lambda: 0.0,
            beta,
            lambda_max,
            lr_eta,
            lr_lambda,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        let bad = |what: &'static str, value: f64| Err(RiskError::InvalidState { what, value });
        if !(self.lambda_max > 0.0 && self.lambda_max.is_finite()) {
            return bad("lambda_max", self.lambda_max);
        }
        if !(self.lambda >= 0.0 && self.lambda <= self.lambda_max) {
            return bad("lambda", self.lambda);
        }
        if !(self.lr_eta > 0.0 && self.lr_eta.is_finite()) {
            return bad("lr_eta", self.lr_eta);
        }
        if !(self.lr_lambda > 0.0 && self.lr_lambda.is_finite()) {
            return bad("lr_lambda", self.lr_lambda);
        }
        if !self.eta.is_finite() {
            return bad("eta", self.eta);
        }
        if !self.beta.is_finite() {
            return bad("beta", self.beta);
        }
        Ok(())
    }
}

/// `∂L/∂η = −λ + (λ/α)·P(D ≤ η)`.
pub fn grad_eta(samples: &ReturnSample, state: &LagrangianState, alpha: RiskLevel) -> f64 {
    let lambda = state.lambda;
    -lambda + lambda / alpha.value() * samples.fraction_at_or_below(state.eta)
}

/// `∂L/∂λ = β − η + (1/α)·E[(η − D)⁺]`.
pub fn grad_lambda(samples: &ReturnSample, state: &LagrangianState, alpha: RiskLevel) -> f64 {
    state.beta - state.eta + samples.mean_shortfall(state.eta) / alpha.value()
}

/// PPO clip target: `(1+ε)·a` for `a ≥ 0`, `(1−ε)·a` otherwise.
pub fn clip_g(epsilon: f64, a: f64) -> f64 {
    if a >= 0.0 {
        (1.0 + epsilon) * a
    } else {
        (1.0 - epsilon) * a
    }
}

/// `β ← 0.3·VaR_α + 0.7·β`.
pub fn update_beta(
    state: &LagrangianState,
    samples: &ReturnSample,
    alpha: RiskLevel,
) -> LagrangianState {
    let var = var_estimate(samples, alpha);
    LagrangianState {
        beta: BETA_EMA_WEIGHT * var + (1.0 - BETA_EMA_WEIGHT) * state.beta,
        ..*state
    }
}

/// One descent step on η.
pub fn step_eta(
    state: &LagrangianState,
    samples: &ReturnSample,
    alpha: RiskLevel,
) -> LagrangianState {
    let g = grad_eta(samples, state, alpha);
    LagrangianState {
        eta: state.eta - state.lr_eta * g,
        ..*state
    }
}

/// One projected ascent step on λ, clamped to `[0, λ_max]`.
pub fn step_lambda(
    state: &LagrangianState,
    samples: &ReturnSample,
    alpha: RiskLevel,
) -> LagrangianState {
    let g = grad_lambda(samples, state, alpha);
    let lambda = (state.lambda + state.lr_lambda * g).clamp(0.0, state.lambda_max);
    LagrangianState { lambda, ..*state }
}

/// η descent followed by λ ascent, the latter evaluated at the updated η.
pub fn step_eta_lambda(
    state: &LagrangianState,
    samples: &ReturnSample,
    alpha: RiskLevel,
) -> LagrangianState {
    step_lambda(&step_eta(state, samples, alpha), samples, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: &[f64]) -> ReturnSample {
        ReturnSample::from_slice(v).unwrap()
    }

    fn alpha(a: f64) -> RiskLevel {
        RiskLevel::new(a).unwrap()
    }

    fn state(eta: f64, lambda: f64, beta: f64) -> LagrangianState {
        LagrangianState {
            eta,
            lambda,
            beta,
            lambda_max: 10.0,
            lr_eta: 0.1,
            lr_lambda: 0.1,
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(ReturnSample::new(vec![]), Err(RiskError::EmptySample));
        assert!(matches!(
            ReturnSample::new(vec![1.0, f64::NAN]),
            Err(RiskError::NonFinite { index: 1, .. })
        ));
        assert!(RiskLevel::new(0.0).is_err());
        assert!(RiskLevel::new(1.5).is_err());
        assert!(RiskLevel::new(f64::NAN).is_err());
        assert!(RiskLevel::new(1.0).is_ok());
    }

    #[test]
    fn tail_count_survives_rounding() {
        assert_eq!(alpha(0.1).tail_count(30), 3);
        assert_eq!(alpha(0.05).tail_count(60), 3);
        assert_eq!(alpha(0.5).tail_count(3), 2);
        assert_eq!(alpha(0.01).tail_count(3), 1);
        assert_eq!(alpha(1.0).tail_count(7), 7);
    }

    #[test]
    fn var_examples() {
        assert_eq!(var_estimate(&sample(&[5.0]), alpha(0.3)), 5.0);
        assert_eq!(var_estimate(&sample(&[4.0, 1.0, 3.0, 2.0]), alpha(0.5)), 2.0);
        assert_eq!(var_estimate(&sample(&[1.0, 2.0, 3.0, 4.0]), alpha(1.0)), 4.0);
    }

    #[test]
    fn cvar_examples() {
        let s = sample(&[2.0, -1.0, 1.0, 0.0]);
        assert_eq!(cvar_estimate(&s, alpha(0.5)), -0.5);
        assert_eq!(cvar_estimate(&s, alpha(1.0)), 0.5);
        assert_eq!(cvar_estimate(&sample(&[7.0, 7.0, 7.0]), alpha(0.25)), 7.0);
    }

    #[test]
    fn grad_eta_examples() {
        let s = sample(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grad_eta(&s, &state(0.0, 2.0, 0.0), alpha(0.25)), -2.0);
        assert_eq!(grad_eta(&s, &state(10.0, 2.0, 0.0), alpha(0.25)), 6.0);
        assert_eq!(grad_eta(&s, &state(2.5, 1.0, 0.0), alpha(0.5)), 0.0);
    }

    #[test]
    fn grad_lambda_examples() {
        assert_eq!(
            grad_lambda(&sample(&[0.0, 2.0]), &state(1.0, 0.0, 0.0), alpha(0.5)),
            0.0
        );
        assert_eq!(
            grad_lambda(&sample(&[3.0, 4.0]), &state(3.0, 1.0, 3.0), alpha(0.3)),
            0.0
        );
        assert_eq!(
            grad_lambda(&sample(&[0.0, 0.0]), &state(0.0, 1.0, 5.0), alpha(1.0)),
            5.0
        );
    }

    #[test]
    fn clip_g_examples() {
        assert_eq!(clip_g(0.2, 1.0), 1.2);
        assert_eq!(clip_g(0.2, -1.0), -0.8);
        assert_eq!(clip_g(0.2, 0.0), 0.0);
    }

    #[test]
    fn beta_ema() {
        let s = sample(&[20.0]);
        assert_eq!(update_beta(&state(0.0, 0.0, 10.0), &s, alpha(0.5)).beta, 13.0);
        assert_eq!(update_beta(&state(0.0, 0.0, 20.0), &s, alpha(0.5)).beta, 20.0);

        let ones = sample(&[1.0, 1.0]);
        let once = update_beta(&state(0.0, 0.0, 0.0), &ones, alpha(0.5));
        let twice = update_beta(&once, &ones, alpha(0.5));
        assert!((twice.beta - 0.51).abs() < 1e-15);
        assert_eq!(twice.eta, 0.0);
        assert_eq!(twice.lambda, 0.0);
    }

    #[test]
    fn lambda_clamps() {
        let s = sample(&[1.0, 2.0]);
        // β − η < 0 with no shortfall: gradient is negative at λ = 0.
        let floor = step_lambda(&state(0.0, 0.0, -5.0), &s, alpha(0.5));
        assert_eq!(floor.lambda, 0.0);

        let mut near_max = state(100.0, 9.99, 1000.0);
        near_max.lr_lambda = 1.0;
        assert_eq!(step_lambda(&near_max, &s, alpha(0.5)).lambda, 10.0);
    }

    #[test]
    fn eta_stationary_step() {
        let s = sample(&[1.0, 2.0, 3.0, 4.0]);
        let next = step_eta_lambda(&state(2.5, 1.0, 0.0), &s, alpha(0.5));
        assert_eq!(next.eta, 2.5);
    }

    #[test]
    fn state_validation() {
        assert!(LagrangianState::new(0.0, 0.0, 10.0, 0.1, 0.1).is_ok());
        assert!(LagrangianState::new(0.0, 0.0, 0.0, 0.1, 0.1).is_err());
        assert!(LagrangianState::new(f64::NAN, 0.0, 1.0, 0.1, 0.1).is_err());
        let mut s = state(0.0, 11.0, 0.0);
        assert!(s.validate().is_err());
        s.lambda = 10.0;
        assert!(s.validate().is_ok());
    }
}
