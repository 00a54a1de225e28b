//! Planar point-mass velocity-tracking task, batched.
//!
//! Each environment integrates
//!
//! ```text
//! v' = v + dt·(gain·k·a − drag·v + f_ext) + σ_p·√dt·ξ
//! ```
//!
//! for the xy velocity and the yaw rate, where `a` is the clipped action,
//! `k = accel_per_gain` and `drag = damping·damping_rate`. Commands are drawn
//! at reset from a box whose half-width is the curriculum bound.

mod curriculum;
mod perturbation;
mod reward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use curriculum::{Curriculum, CurriculumConfig};
pub use perturbation::{
    apply_perturbation, default_suite, resolve_perturbation, PerturbState, PerturbationSpec,
    PerturbationSuite, GRAVITY,
};
pub use reward::{RewardTerms, RewardWeights};

use crate::error::EnvError;

pub const OBS_DIM: usize = 9;
pub const ACT_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_envs: usize,
    /// Control period (s); 50 Hz.
    pub dt: f64,
    pub episode_len: u32,
    /// Speed beyond which an episode terminates as a failure (m/s).
    pub divergence_speed: f64,
    pub gain_range: [f64; 2],
    pub damping_range: [f64; 2],
    /// Acceleration per unit action per unit gain (m/s²).
    pub accel_per_gain: f64,
    /// Drag rate per unit damping (1/s).
    pub damping_rate: f64,
    /// Actions are clipped to `[-action_limit, action_limit]`.
    pub action_limit: f64,
    /// Process-noise intensity (m/s per √s).
    pub process_noise: f64,
    /// Half-width of the uniform noise on the linear-velocity observation.
    pub lin_vel_obs_noise: f64,
    /// Half-width of the uniform noise on the yaw-rate observation.
    pub ang_vel_obs_noise: f64,
    /// Initial velocities are drawn uniformly from this box half-width.
    pub init_velocity: f64,
    /// Yaw-rate command bound relative to the linear bound.
    pub yaw_command_ratio: f64,
    /// Velocities and commands are divided by this before the policy sees them.
    pub obs_velocity_scale: f64,
    pub curriculum: CurriculumConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_envs: 256,
            dt: 0.02,
            episode_len: 100,
            divergence_speed: 10.0,
            gain_range: [22.0, 27.0],
            damping_range: [0.3, 0.7],
            accel_per_gain: 0.2,
            damping_rate: 2.0,
            action_limit: 3.0,
            process_noise: 0.3,
            lin_vel_obs_noise: 0.1,
            ang_vel_obs_noise: 0.2,
            init_velocity: 0.2,
            yaw_command_ratio: 0.5,
            obs_velocity_scale: 2.0,
            curriculum: CurriculumConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.num_envs == 0 {
            return fail("num_envs must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return fail("dt must be positive");
        }
        if self.episode_len == 0 {
            return fail("episode_len must be positive");
        }
        if !(self.divergence_speed > 0.0) {
            return fail("divergence_speed must be positive");
        }
        for (name, r) in [("gain_range", self.gain_range), ("damping_range", self.damping_range)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return Err(EnvError::Config(format!("{name} needs 0 < lo <= hi")));
            }
        }
        let nonneg = [
            self.process_noise,
            self.lin_vel_obs_noise,
            self.ang_vel_obs_noise,
            self.init_velocity,
            self.yaw_command_ratio,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return fail("noise levels, init_velocity and yaw_command_ratio must be >= 0");
        }
        if !(self.accel_per_gain > 0.0
            && self.damping_rate > 0.0
            && self.action_limit > 0.0
            && self.obs_velocity_scale > 0.0)
        {
            return fail("accel_per_gain, damping_rate, action_limit and obs_velocity_scale must be positive");
        }
        self.curriculum.validate()
    }

    /// `(r_min, r_max)` of a single step.
    pub fn reward_bounds(&self, weights: &RewardWeights) -> (f64, f64) {
        weights.bounds(self.action_limit, ACT_DIM)
    }

    /// Span of undiscounted returns over `steps` steps.
    pub fn return_range(&self, weights: &RewardWeights, steps: u32) -> f64 {
        let (lo, hi) = self.reward_bounds(weights);
        steps as f64 * (hi - lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub velocity: [f64; 2],
    pub yaw_rate: f64,
    pub command: [f64; 3],
    pub prev_action: [f64; 3],
    pub step: u32,
    pub gain: f64,
    pub damping: f64,
    /// Steps since construction; not reset with episodes.
    pub global_step: u64,
    pub episode_return: f64,
    pub perturb: PerturbState,
}

/// A finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeEnd {
    pub env: usize,
    pub undiscounted_return: f64,
    pub length: u32,
    pub failed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    /// Observations after auto-reset (`num_envs × OBS_DIM`).
    pub obs: Vec<f64>,
    /// Observation of the state reached this step, before any reset.
    pub final_obs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Failure: divergence or a non-finite action.
    pub terminated: Vec<bool>,
    /// Time limit reached.
    pub truncated: Vec<bool>,
    /// Non-finite action supplied.
    pub faulted: Vec<bool>,
    /// Tracking reward divided by its maximum, in `[0, 1]`.
    pub tracking: Vec<f64>,
    pub finished: Vec<EpisodeEnd>,
}

impl StepOutput {
    pub fn done(&self, env: usize) -> bool {
        self.terminated[env] || self.truncated[env]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecEnv {
    config: EnvConfig,
    weights: RewardWeights,
    perturbation: PerturbationSpec,
    curriculum_bound: f64,
    envs: Vec<EnvState>,
    rng: ChaCha8Rng,
}

impl VecEnv {
    pub fn new(
        config: EnvConfig,
        weights: RewardWeights,
        perturbation: PerturbationSpec,
        curriculum_bound: f64,
        seed: u64,
    ) -> Result<Self, EnvError> {
        config.validate()?;
        weights.validate()?;
        perturbation.validate()?;
        let mut env = Self {
            envs: Vec::new(),
            config,
            weights,
            perturbation,
            curriculum_bound,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.reset(seed);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn weights(&self) -> &RewardWeights {
        &self.weights
    }

    pub fn perturbation(&self) -> &PerturbationSpec {
        &self.perturbation
    }

    pub fn num_envs(&self) -> usize {
        self.config.num_envs
    }

    pub fn states(&self) -> &[EnvState] {
        &self.envs
    }

    pub fn curriculum_bound(&self) -> f64 {
        self.curriculum_bound
    }

    /// Takes effect at each environment's next reset.
    pub fn set_curriculum_bound(&mut self, bound: f64) {
        self.curriculum_bound = bound;
    }

    /// Re-seeds the generator and resets every environment.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let blank = EnvState {
            velocity: [0.0; 2],
            yaw_rate: 0.0,
            command: [0.0; 3],
            prev_action: [0.0; 3],
            step: 0,
            gain: 0.0,
            damping: 0.0,
            global_step: 0,
            episode_return: 0.0,
            perturb: PerturbState::default(),
        };
        self.envs = vec![blank; self.config.num_envs];
        let mut obs = vec![0.0; self.config.num_envs * OBS_DIM];
        for i in 0..self.config.num_envs {
            self.reset_env(i);
            let o = self.observe(i);
            obs[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&o);
        }
        obs
    }

    fn reset_env(&mut self, i: usize) {
        let cfg = &self.config;
        let (gain_range, damping_range) = self
            .perturbation
            .dynamics_ranges(cfg.gain_range, cfg.damping_range);
        let rng = &mut self.rng;
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let b = self.curriculum_bound;
        let yb = b * cfg.yaw_command_ratio;
        let iv = cfg.init_velocity;
        let st = &mut self.envs[i];
        st.velocity = [uniform(-iv, iv), uniform(-iv, iv)];
        st.yaw_rate = uniform(-iv, iv);
        st.command = [uniform(-b, b), uniform(-b, b), uniform(-yb, yb)];
        st.gain = uniform(gain_range[0], gain_range[1]);
        st.damping = uniform(damping_range[0], damping_range[1]);
        st.prev_action = [0.0; 3];
        st.step = 0;
        st.episode_return = 0.0;
        self.perturbation
            .reset_state(&mut st.perturb, cfg.dt, ACT_DIM);
    }

    /// Spreads the step counters of the current episodes uniformly over
    /// `[0, episode_len)` so that episode ends do not line up across envs.
    pub fn stagger_episodes(&mut self) {
        let len = self.config.episode_len;
        for st in &mut self.envs {
            st.step = self.rng.gen_range(0..len);
        }
    }

    /// Noisy, perturbed, scaled observation of environment `i`.
    fn observe(&mut self, i: usize) -> Vec<f64> {
        let cfg = &self.config;
        let st = &mut self.envs[i];
        let rng = &mut self.rng;
        let lin = cfg.lin_vel_obs_noise;
        let ang = cfg.ang_vel_obs_noise;
        let mut noise = |h: f64| if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
        let raw = [
            st.velocity[0] + noise(lin),
            st.velocity[1] + noise(lin),
            st.yaw_rate + noise(ang),
            st.command[0],
            st.command[1],
            st.command[2],
            st.prev_action[0],
            st.prev_action[1],
            st.prev_action[2],
        ];
        let mut obs = apply_perturbation(&self.perturbation, &raw, &mut st.perturb, rng);
        let s = 1.0 / cfg.obs_velocity_scale;
        for v in &mut obs[..6] {
            *v *= s;
        }
        obs
    }

    /// Advances every environment by one control period.
    ///
    /// Finished environments are reset in place; their pre-reset observation
    /// is kept in [`StepOutput::final_obs`].
    pub fn step(&mut self, actions: &[f64]) -> Result<StepOutput, EnvError> {
        let n = self.config.num_envs;
        if actions.len() != n * ACT_DIM {
            return Err(EnvError::ActionShape {
                expected: n * ACT_DIM,
                actual: actions.len(),
            });
        }
        let mut out = StepOutput {
            obs: vec![0.0; n * OBS_DIM],
            final_obs: vec![0.0; n * OBS_DIM],
            rewards: vec![0.0; n],
            terminated: vec![false; n],
            truncated: vec![false; n],
            faulted: vec![false; n],
            tracking: vec![0.0; n],
            finished: Vec::new(),
        };
        let dt = self.config.dt;
        let limit = self.config.action_limit;
        let sqrt_dt = dt.sqrt();
        let max_tracking = self.weights.max_tracking();
        for i in 0..n {
            let a = &actions[i * ACT_DIM..(i + 1) * ACT_DIM];
            if a.iter().any(|v| !v.is_finite()) {
                out.faulted[i] = true;
                out.terminated[i] = true;
            } else {
                let commanded = [
                    a[0].clamp(-limit, limit),
                    a[1].clamp(-limit, limit),
                    a[2].clamp(-limit, limit),
                ];
                let applied = self
                    .perturbation
                    .delay_action(&mut self.envs[i].perturb, commanded);
                let kick = self.perturbation.velocity_kick(
                    self.envs[i].global_step,
                    dt,
                    &mut self.rng,
                );
                let bias = self.perturbation.bias_accel();
                let sigma = self.config.process_noise;
                let mut draw = || -> f64 {
                    if sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        sigma * sqrt_dt * z
                    } else {
                        0.0
                    }
                };
                let noise = [draw(), draw(), draw()];
                let st = &mut self.envs[i];
                let k = st.gain * self.config.accel_per_gain;
                let drag = st.damping * self.config.damping_rate;
                for ax in 0..2 {
                    let v = st.velocity[ax] + kick[ax];
                    st.velocity[ax] = v + dt * (k * applied[ax] - drag * v + bias[ax]) + noise[ax];
                }
                st.yaw_rate += dt * (k * applied[2] - drag * st.yaw_rate) + noise[2];
                let terms = self.weights.terms(
                    st.velocity,
                    st.yaw_rate,
                    st.command,
                    &commanded,
                    &st.prev_action,
                );
                out.rewards[i] = terms.total();
                out.tracking[i] = terms.tracking() / max_tracking;
                st.prev_action = commanded;
                let speed = st.velocity[0].hypot(st.velocity[1]);
                if !(speed <= self.config.divergence_speed) || !st.yaw_rate.is_finite() {
                    out.terminated[i] = true;
                }
            }
            let st = &mut self.envs[i];
            st.step += 1;
            st.global_step += 1;
            st.episode_return += out.rewards[i];
            if !out.terminated[i] && st.step >= self.config.episode_len {
                out.truncated[i] = true;
            }
            let o = self.observe(i);
            out.final_obs[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&o);
            if out.done(i) {
                let st = &self.envs[i];
                out.finished.push(EpisodeEnd {
                    env: i,
                    undiscounted_return: st.episode_return,
                    length: st.step,
                    failed: out.terminated[i],
                });
                self.reset_env(i);
                let fresh = self.observe(i);
                out.obs[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&fresh);
            } else {
                out.obs[i * OBS_DIM..(i + 1) * OBS_DIM].copy_from_slice(&o);
            }
        }
        Ok(out)
    }
}
