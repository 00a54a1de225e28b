use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{MlpLayout, Trace};
use crate::error::NetError;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal-Gaussian log-density of `action`.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAction {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Batched log-probabilities with the trace needed to differentiate them.
#[derive(Debug, Clone)]
pub struct LogProbBatch {
    trace: Trace,
    pub log_probs: Vec<f64>,
    actions: Vec<f64>,
}

impl LogProbBatch {
    pub fn means(&self) -> &[f64] {
        self.trace.output()
    }
}

/// Actor: an MLP producing the action mean plus a state-independent,
/// learnable log standard deviation.
///
/// `params` holds the MLP parameters followed by one log-std per action
/// dimension; log-stds stay within `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    layout: MlpLayout,
    params: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(
        layout: MlpLayout,
        init_log_std: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut params = layout.init_params(rng, output_gain);
        params.extend(std::iter::repeat_n(init_log_std, layout.output_dim()));
        let mut policy = Self { layout, params };
        policy.clamp_log_std();
        policy
    }

    pub fn from_params(layout: MlpLayout, params: Vec<f64>) -> Result<Self, NetError> {
        let expected = layout.num_params() + layout.output_dim();
        if params.len() != expected {
            return Err(NetError::Shape {
                context: "policy parameters",
                expected,
                actual: params.len(),
            });
        }
        let mut policy = Self { layout, params };
        policy.clamp_log_std();
        Ok(policy)
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn obs_dim(&self) -> usize {
        self.layout.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.layout.output_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Callers must invoke [`GaussianPolicy::clamp_log_std`] after editing.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn net_params(&self) -> &[f64] {
        &self.params[..self.layout.num_params()]
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params[self.layout.num_params()..]
    }

    pub fn clamp_log_std(&mut self) {
        let n = self.layout.num_params();
        for ls in &mut self.params[n..] {
            *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>, NetError> {
        self.layout.forward(self.net_params(), obs)
    }

    /// Means for a row-major batch of observations.
    pub fn mean_batch(&self, obs: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.layout.forward_batch(self.net_params(), obs)?.into_output())
    }

    /// Evaluates the Gaussian head at `obs` and draws one action from it.
    pub fn actor_forward<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
    ) -> Result<GaussianAction, NetError> {
        let mean = self.mean(obs)?;
        let log_std = self.log_std().to_vec();
        let action: Vec<f64> = mean
            .iter()
            .zip(&log_std)
            .map(|(&m, &ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let log_prob = gaussian_log_prob(&action, &mean, &log_std);
        Ok(GaussianAction {
            mean,
            log_std,
            action,
            log_prob,
        })
    }

    /// Log-probabilities of `actions` at `obs` (both row-major batches).
    pub fn log_prob_batch(&self, obs: &[f64], actions: &[f64]) -> Result<LogProbBatch, NetError> {
        let trace = self.layout.forward_batch(self.net_params(), obs)?;
        let d = self.act_dim();
        if actions.len() != trace.batch() * d {
            return Err(NetError::Shape {
                context: "policy action batch",
                expected: trace.batch() * d,
                actual: actions.len(),
            });
        }
        let log_std = self.log_std();
        let log_probs = trace
            .output()
            .chunks_exact(d)
            .zip(actions.chunks_exact(d))
            .map(|(m, a)| gaussian_log_prob(a, m, log_std))
            .collect();
        Ok(LogProbBatch {
            trace,
            log_probs,
            actions: actions.to_vec(),
        })
    }

    /// Gradient of `Σ_b d_logp[b]·log π(a_b|s_b)` with respect to `params`.
    pub fn log_prob_backward(&self, batch: &LogProbBatch, d_logp: &[f64]) -> Result<Vec<f64>, NetError> {
        let d = self.act_dim();
        let n_net = self.layout.num_params();
        let n = batch.trace.batch();
        if d_logp.len() != n {
            return Err(NetError::Shape {
                context: "log-prob adjoint",
                expected: n,
                actual: d_logp.len(),
            });
        }
        let log_std = self.log_std();
        let inv_var: Vec<f64> = log_std.iter().map(|&ls| (-2.0 * ls).exp()).collect();
        let mut d_mean = vec![0.0; n * d];
        let mut grad = vec![0.0; self.params.len()];
        for b in 0..n {
            let g = d_logp[b];
            if g == 0.0 {
                continue;
            }
            for i in 0..d {
                let diff = batch.actions[b * d + i] - batch.means()[b * d + i];
                d_mean[b * d + i] = g * diff * inv_var[i];
                grad[n_net + i] += g * (diff * diff * inv_var[i] - 1.0);
            }
        }
        self.layout
            .backward(self.net_params(), &batch.trace, &d_mean, &mut grad[..n_net])?;
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianPolicy::new(MlpLayout::with_hidden(4, &[8, 8], 2), -0.3, 1.0, &mut rng)
    }

    #[test]
    fn zero_weights_give_zero_mean() {
        let layout = MlpLayout::with_hidden(3, &[5], 2);
        let params = vec![0.0; layout.num_params() + 2];
        let p = GaussianPolicy::from_params(layout, params).unwrap();
        assert_eq!(p.mean(&[1.0, -7.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn log_prob_at_mode_with_unit_std() {
        for d in 1..5 {
            let mean = vec![0.3; d];
            let lp = gaussian_log_prob(&mean, &mean, &vec![0.0; d]);
            let expected = -(d as f64) / 2.0 * (2.0 * std::f64::consts::PI).ln();
            assert!((lp - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = policy(1);
        let obs = [0.1, 0.2, -0.3, 0.4];
        let a = p.actor_forward(&obs, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = p.actor_forward(&obs, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log_prob, gaussian_log_prob(&a.action, &a.mean, &a.log_std));
    }

    #[test]
    fn ratio_is_exactly_one_for_identical_params() {
        let p = policy(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let obs = [0.5, -0.5, 1.0, 0.0];
        let act = p.actor_forward(&obs, &mut rng).unwrap();
        let batch = p.log_prob_batch(&obs, &act.action).unwrap();
        assert_eq!((batch.log_probs[0] - act.log_prob).exp(), 1.0);
    }

    #[test]
    fn density_integrates_to_one() {
        // Trapezoid rule over ±12σ.
        let (mean, log_std) = (0.7, -0.4);
        let sigma = f64::exp(log_std);
        let n = 20_000;
        let (lo, hi) = (mean - 12.0 * sigma, mean + 12.0 * sigma);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * gaussian_log_prob(&[x], &[mean], &[log_std]).exp();
        }
        assert!((total * h - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_std_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GaussianPolicy::new(MlpLayout::with_hidden(2, &[3], 2), 9.0, 1.0, &mut rng);
        assert_eq!(p.log_std(), &[LOG_STD_MAX, LOG_STD_MAX]);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let p = policy(4);
        let obs = [0.2, -1.0, 0.5, 0.3, 1.2, 0.1, -0.4, 0.9];
        let actions = [0.4, -0.2, 1.0, 0.3];
        let weights = [0.8, -1.7];
        let batch = p.log_prob_batch(&obs, &actions).unwrap();
        let g = p.log_prob_backward(&batch, &weights).unwrap();
        let f = |params: &[f64]| {
            let q = GaussianPolicy::from_params(p.layout().clone(), params.to_vec()).unwrap();
            let lp = q.log_prob_batch(&obs, &actions).unwrap().log_probs;
            lp[0] * weights[0] + lp[1] * weights[1]
        };
        for i in 0..p.params().len() {
            let h = 1e-5;
            let mut x = p.params().to_vec();
            x[i] += h;
            let up = f(&x);
            x[i] -= 2.0 * h;
            let fd = (up - f(&x)) / (2.0 * h);
            let err = (g[i] - fd).abs() / (g[i].abs() + fd.abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: {} vs {fd}", g[i]);
        }
    }
}
