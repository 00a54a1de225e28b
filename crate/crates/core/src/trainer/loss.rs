//! Clipped PPO-Lagrangian actor loss and the critic regression loss.

use crate::config::{HingeClip, HingeRatio};
use crate::error::{NetError, TrainError};
use crate::policynet::{GaussianPolicy, Mlp};
use crate::riskcore::{clip_g, LagrangianState, RiskLevel};
use crate::rollout::{RolloutBatch, Segment};

/// One trajectory of a minibatch: its steps (local indices, in time order)
/// and its bootstrapped return `D̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<usize>,
    pub bootstrapped_return: f64,
}

/// Flat per-step data for a set of environments.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    /// Advantages as fed to the surrogate (normalized if configured).
    pub advantages: Vec<f64>,
    /// Critic regression targets `V_old + A` (raw advantages).
    pub value_targets: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.old_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_log_probs.is_empty()
    }

    /// Gathers the steps of `envs` (in the given order, each in time order).
    pub fn gather(
        batch: &RolloutBatch,
        advantages: &[f64],
        raw_advantages: &[f64],
        segments: &[Segment],
        envs: &[usize],
    ) -> Self {
        let obs_dim = batch.obs.len() / batch.len();
        let act_dim = batch.actions.len() / batch.len();
        let n = envs.len() * batch.num_steps;
        let mut mb = Minibatch {
            obs: Vec::with_capacity(n * obs_dim),
            actions: Vec::with_capacity(n * act_dim),
            old_log_probs: Vec::with_capacity(n),
            advantages: Vec::with_capacity(n),
            value_targets: Vec::with_capacity(n),
            trajectories: Vec::new(),
        };
        for &e in envs {
            let base = mb.old_log_probs.len();
            for t in 0..batch.num_steps {
                let i = batch.index(t, e);
                mb.obs.extend_from_slice(&batch.obs[i * obs_dim..(i + 1) * obs_dim]);
                mb.actions.extend_from_slice(&batch.actions[i * act_dim..(i + 1) * act_dim]);
                mb.old_log_probs.push(batch.log_probs[i]);
                mb.advantages.push(advantages[i]);
                mb.value_targets.push(batch.values[i] + raw_advantages[i]);
            }
            for s in segments.iter().filter(|s| s.env == e) {
                mb.trajectories.push(Trajectory {
                    steps: (s.start..s.end).map(|t| base + t).collect(),
                    bootstrapped_return: s.bootstrapped_return,
                });
            }
        }
        mb
    }
}

/// Hyperparameters of the actor loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub alpha: RiskLevel,
    pub epsilon: f64,
    pub delta_clip: f64,
    pub hinge_ratio: HingeRatio,
    pub hinge_clip: HingeClip,
    pub hinge_baseline: bool,
    /// Multiplies every shortfall `(η − D̃)⁺`; the trainer sets it to the
    /// advantage normalization factor so both terms share one scale.
    pub hinge_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `−E[min(r·A, g(ε, A))]`.
    pub surrogate: f64,
    /// `(λ/α)·E[min(r̄·h, g(δ, h))]`, `h = (η − D̃)⁺`, or its trust-region
    /// and baseline variants.
    pub hinge: f64,
    /// Derivative of `loss` with respect to each sample's log-probability.
    pub d_log_probs: Vec<f64>,
}

/// Loss and its adjoint with respect to the new log-probabilities.
pub fn loss_from_log_probs(
    log_probs: &[f64],
    mb: &Minibatch,
    state: &LagrangianState,
    p: &LossParams,
) -> LossOutput {
    let n = mb.len();
    let inv_n = 1.0 / n as f64;
    let mut d = vec![0.0; n];
    let mut surr_sum = 0.0;
    for i in 0..n {
        let r = (log_probs[i] - mb.old_log_probs[i]).exp();
        let a = mb.advantages[i];
        let unclipped = r * a;
        let clipped = clip_g(p.epsilon, a);
        if unclipped < clipped {
            surr_sum += unclipped;
            d[i] = -unclipped * inv_n;
        } else {
            surr_sum += clipped;
        }
    }
    let surrogate = -surr_sum * inv_n;
    let mut hinge = 0.0;
    // λ = 0 drops the term entirely, leaving plain PPO.
    if state.lambda > 0.0 && !mb.trajectories.is_empty() {
        let coef = state.lambda / p.alpha.value();
        let log_ratio = |i: usize| log_probs[i] - mb.old_log_probs[i];
        let weight = |t: &Trajectory| match p.hinge_ratio {
            HingeRatio::PerStep => t.steps.len() as f64,
            _ => 1.0,
        };
        let count: f64 = mb.trajectories.iter().map(weight).sum();
        let shortfall = |t: &Trajectory| p.hinge_scale * (state.eta - t.bootstrapped_return).max(0.0);
        let baseline = if p.hinge_baseline {
            mb.trajectories.iter().map(|t| weight(t) * shortfall(t)).sum::<f64>() / count
        } else {
            0.0
        };
        let scale = coef / count;
        // Value of one ratio-weighted term and whether its gradient flows.
        let term = |lr: f64, c: f64| {
            let v = lr.exp() * c;
            match p.hinge_clip {
                HingeClip::Cap => {
                    let cap = clip_g(p.delta_clip, c);
                    if v < cap {
                        (v, true)
                    } else {
                        (cap, false)
                    }
                }
                HingeClip::TrustRegion => {
                    let floor = -clip_g(p.delta_clip, -c);
                    if v > floor {
                        (v, true)
                    } else {
                        (floor, false)
                    }
                }
            }
        };
        let mut sum = 0.0;
        for traj in &mb.trajectories {
            let c = shortfall(traj) - baseline;
            match p.hinge_ratio {
                HingeRatio::FirstStep => {
                    let first = traj.steps[0];
                    let (v, active) = term(log_ratio(first), c);
                    sum += v;
                    if active {
                        d[first] += scale * v;
                    }
                }
                HingeRatio::Product => {
                    let lr: f64 = traj.steps.iter().map(|&i| log_ratio(i)).sum();
                    let (v, active) = term(lr, c);
                    sum += v;
                    if active {
                        for &i in &traj.steps {
                            d[i] += scale * v;
                        }
                    }
                }
                HingeRatio::PerStep => {
                    for &i in &traj.steps {
                        let (v, active) = term(log_ratio(i), c);
                        sum += v;
                        if active {
                            d[i] += scale * v;
                        }
                    }
                }
            }
        }
        hinge = scale * sum;
    }
    LossOutput {
        loss: surrogate + hinge,
        surrogate,
        hinge,
        d_log_probs: d,
    }
}

/// Actor loss at `policy` together with its parameter gradient.
pub fn ppo_lagrangian_loss(
    policy: &GaussianPolicy,
    mb: &Minibatch,
    state: &LagrangianState,
    p: &LossParams,
) -> Result<(LossOutput, Vec<f64>), TrainError> {
    let lp = policy.log_prob_batch(&mb.obs, &mb.actions)?;
    let out = loss_from_log_probs(&lp.log_probs, mb, state, p);
    if !out.loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: "actor loss",
            iteration: 0,
        });
    }
    let grad = policy.log_prob_backward(&lp, &out.d_log_probs)?;
    Ok((out, grad))
}

/// Loss value only.
pub fn ppo_lagrangian_loss_value(
    policy: &GaussianPolicy,
    mb: &Minibatch,
    state: &LagrangianState,
    p: &LossParams,
) -> Result<f64, NetError> {
    let lp = policy.log_prob_batch(&mb.obs, &mb.actions)?;
    Ok(loss_from_log_probs(&lp.log_probs, mb, state, p).loss)
}

/// `coef·mean((V − target)²)` and its parameter gradient.
pub fn critic_loss(
    critic: &Mlp,
    obs: &[f64],
    targets: &[f64],
    coef: f64,
) -> Result<(f64, Vec<f64>), NetError> {
    let trace = critic.forward_batch(obs)?;
    let n = targets.len();
    if trace.batch() != n {
        return Err(NetError::Shape {
            context: "critic targets",
            expected: trace.batch(),
            actual: n,
        });
    }
    let mut loss = 0.0;
    let mut d_out = vec![0.0; n];
    for (i, (&v, &y)) in trace.output().iter().zip(targets).enumerate() {
        let diff = v - y;
        loss += diff * diff;
        d_out[i] = 2.0 * coef * diff / n as f64;
    }
    let grad = critic.backward(&trace, &d_out)?;
    Ok((coef * loss / n as f64, grad))
}
