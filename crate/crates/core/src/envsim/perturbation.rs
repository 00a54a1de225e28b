//! Deployment-time shifts applied on top of the training environment.

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::EnvError;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// Identity wrapper.
    #[default]
    None,
    /// Random-walk bias on the linear-velocity observation: every step the
    /// bias moves by `drift` plus `noise·N(0,1)` per axis.
    Brownian { drift: f64, noise: f64 },
    /// Actions reach the actuator `ceil(seconds/dt)` steps late.
    Delay { seconds: f64 },
    /// Uniform xy velocity kick in `[-magnitude, magnitude]²` every
    /// `interval_s` seconds of wall time (not reset with episodes).
    Push { interval_s: f64, magnitude: f64 },
    /// Friction coefficient drawn from `range`, acting as damping
    /// `damping_per_friction · friction`.
    Friction {
        range: [f64; 2],
        damping_per_friction: f64,
    },
    /// With `probability` the previous observation is emitted again.
    Jitter { probability: f64 },
    /// Actuator gain drawn from `range` instead of the training range.
    Gain { range: [f64; 2] },
    /// Constant downhill acceleration `g·sin(degrees)` along −x.
    Incline { degrees: f64 },
}

/// Perturbation bookkeeping for a single environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PerturbState {
    pub bias: [f64; 2],
    pub queue: VecDeque<[f64; 3]>,
    pub last_obs: Option<Vec<f64>>,
}

fn check(cond: bool, msg: &str) -> Result<(), EnvError> {
    if cond {
        Ok(())
    } else {
        Err(EnvError::Config(msg.to_string()))
    }
}

fn valid_range(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1]
}

impl PerturbationSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Brownian { .. } => "brownian",
            Self::Delay { .. } => "delay",
            Self::Push { .. } => "push",
            Self::Friction { .. } => "friction",
            Self::Jitter { .. } => "jitter",
            Self::Gain { .. } => "gain",
            Self::Incline { .. } => "incline",
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match *self {
            Self::None => Ok(()),
            Self::Brownian { drift, noise } => check(
                drift.is_finite() && drift.abs() <= 1.0 && (0.0..=10.0).contains(&noise),
                "brownian drift must be finite with |drift| <= 1 and noise in [0, 10]",
            ),
            Self::Delay { seconds } => check(
                (0.0..=2.0).contains(&seconds),
                "delay seconds must lie in [0, 2]",
            ),
            Self::Push {
                interval_s,
                magnitude,
            } => check(
                interval_s > 0.0 && interval_s.is_finite() && (0.0..=100.0).contains(&magnitude),
                "push needs a positive interval and magnitude in [0, 100]",
            ),
            Self::Friction {
                range,
                damping_per_friction,
            } => check(
                valid_range(range) && damping_per_friction > 0.0 && damping_per_friction.is_finite(),
                "friction needs 0 < lo <= hi and a positive damping_per_friction",
            ),
            Self::Jitter { probability } => check(
                (0.0..=1.0).contains(&probability),
                "jitter probability must lie in [0, 1]",
            ),
            Self::Gain { range } => check(valid_range(range), "gain range needs 0 < lo <= hi"),
            Self::Incline { degrees } => check(
                (-90.0..=90.0).contains(&degrees),
                "incline degrees must lie in [-90, 90]",
            ),
        }
    }

    pub fn delay_steps(&self, dt: f64) -> usize {
        match *self {
            Self::Delay { seconds } => ((seconds / dt) - 1e-9).ceil().max(0.0) as usize,
            _ => 0,
        }
    }

    /// Fresh per-episode state.
    pub fn reset_state(&self, state: &mut PerturbState, dt: f64, act_dim: usize) {
        debug_assert_eq!(act_dim, 3);
        state.bias = [0.0; 2];
        state.queue.clear();
        for _ in 0..self.delay_steps(dt) {
            state.queue.push_back([0.0; 3]);
        }
        state.last_obs = None;
    }

    /// The action that actually reaches the actuator this step.
    pub fn delay_action(&self, state: &mut PerturbState, commanded: [f64; 3]) -> [f64; 3] {
        match self {
            Self::Delay { .. } if !state.queue.is_empty() => {
                state.queue.push_back(commanded);
                state.queue.pop_front().unwrap_or(commanded)
            }
            _ => commanded,
        }
    }

    /// Instantaneous velocity change applied before integration.
    pub fn velocity_kick<R: Rng + ?Sized>(&self, global_step: u64, dt: f64, rng: &mut R) -> [f64; 2] {
        match *self {
            Self::Push {
                interval_s,
                magnitude,
            } => {
                let interval = (interval_s / dt).round().max(1.0) as u64;
                if global_step > 0 && global_step.is_multiple_of(interval) {
                    [
                        rng.gen_range(-magnitude..=magnitude),
                        rng.gen_range(-magnitude..=magnitude),
                    ]
                } else {
                    [0.0; 2]
                }
            }
            _ => [0.0; 2],
        }
    }

    /// Constant external acceleration on the xy axes.
    pub fn bias_accel(&self) -> [f64; 2] {
        match *self {
            Self::Incline { degrees } => [-GRAVITY * degrees.to_radians().sin(), 0.0],
            _ => [0.0; 2],
        }
    }

    /// Gain and damping ranges used when an episode's dynamics are resampled.
    pub fn dynamics_ranges(&self, gain: [f64; 2], damping: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        match *self {
            Self::Gain { range } => (range, damping),
            Self::Friction {
                range,
                damping_per_friction,
            } => (
                gain,
                [range[0] * damping_per_friction, range[1] * damping_per_friction],
            ),
            _ => (gain, damping),
        }
    }
}

/// Observation-side part of a perturbation.
///
/// `raw_obs` is in physical units with the linear velocity in its first two
/// entries. Returns the observation the policy sees.
pub fn apply_perturbation<R: Rng + ?Sized>(
    spec: &PerturbationSpec,
    raw_obs: &[f64],
    state: &mut PerturbState,
    rng: &mut R,
) -> Vec<f64> {
    match *spec {
        PerturbationSpec::Brownian { drift, noise } => {
            let mut obs = raw_obs.to_vec();
            for (axis, b) in state.bias.iter_mut().enumerate() {
                let z: f64 = if noise > 0.0 {
                    StandardNormal.sample(rng)
                } else {
                    0.0
                };
                *b += drift + noise * z;
                obs[axis] += *b;
            }
            obs
        }
        PerturbationSpec::Jitter { probability } => {
            let stale = rng.gen::<f64>() < probability;
            match (&state.last_obs, stale) {
                (Some(prev), true) => prev.clone(),
                _ => {
                    state.last_obs = Some(raw_obs.to_vec());
                    raw_obs.to_vec()
                }
            }
        }
        _ => raw_obs.to_vec(),
    }
}

/// Named perturbations, e.g. the `[perturbations.<name>]` tables of an
/// experiment config.
pub type PerturbationSuite = BTreeMap<String, PerturbationSpec>;

pub fn resolve_perturbation(suite: &PerturbationSuite, name: &str) -> Result<PerturbationSpec, EnvError> {
    if name == "none" && !suite.contains_key("none") {
        return Ok(PerturbationSpec::None);
    }
    suite.get(name).cloned().ok_or_else(|| EnvError::UnknownPerturbation {
        name: name.to_string(),
        valid: suite.keys().cloned().collect::<Vec<_>>().join(", "),
    })
}

/// The shifts used for robustness evaluation, adapted to the point mass.
pub fn default_suite() -> PerturbationSuite {
    let mut s = BTreeMap::new();
    s.insert("none".into(), PerturbationSpec::None);
    s.insert(
        "brownian".into(),
        PerturbationSpec::Brownian {
            drift: 1e-3,
            noise: 0.05,
        },
    );
    s.insert("delay".into(), PerturbationSpec::Delay { seconds: 0.05 });
    s.insert(
        "push".into(),
        PerturbationSpec::Push {
            interval_s: 5.0,
            magnitude: 1.0,
        },
    );
    s.insert(
        "friction".into(),
        PerturbationSpec::Friction {
            range: [0.3, 0.7],
            damping_per_friction: 2.0,
        },
    );
    s.insert("jitter".into(), PerturbationSpec::Jitter { probability: 0.6 });
    s.insert("gain".into(), PerturbationSpec::Gain { range: [10.0, 50.0] });
    s.insert("incline".into(), PerturbationSpec::Incline { degrees: 20.0 });
    s
}
