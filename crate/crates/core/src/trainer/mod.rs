//! Offline CVaR policy optimization: rollouts, the PPO-Lagrangian actor
//! update, critic regression, η/λ/β updates and the command curriculum.

mod checkpoint;
mod eval;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use eval::{evaluate, evaluate_policy, EvalSummary, TailStats};
pub use loss::{
    critic_loss, loss_from_log_probs, ppo_lagrangian_loss, ppo_lagrangian_loss_value, LossOutput,
    LossParams, Minibatch, Trajectory,
};

use crate::config::TrainConfig;
use crate::envsim::{Curriculum, EnvConfig, PerturbationSpec, RewardWeights, VecEnv, ACT_DIM, OBS_DIM};
use crate::error::TrainError;
use crate::policynet::{clip_grad_norm, Adam, GaussianPolicy, Mlp, MlpLayout};
use crate::riskcore::{
    cvar_estimate, step_eta, step_lambda, update_beta, var_estimate, LagrangianState, ReturnSample,
};
use crate::rollout::{bootstrapped_returns, collect, gae_advantages, normalize_advantages, RolloutBatch};

/// Offset separating the environment stream from the learner stream.
const ENV_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Population standard deviation, floored as in [`normalize_advantages`].
fn advantage_std(adv: &[f64]) -> f64 {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt().max(1e-8)
}

/// One row of training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub timesteps: u64,
    pub episodes: usize,
    /// Mean undiscounted return of episodes that ended this iteration.
    pub mean_return: Option<f64>,
    pub failure_rate: Option<f64>,
    /// Statistics of the bootstrapped returns `D̃`.
    pub d_mean: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub var: f64,
    pub cvar: f64,
    /// Constraint level in force while this batch was used.
    pub beta_before: f64,
    pub eta: f64,
    pub lambda: f64,
    pub beta: f64,
    pub surrogate: f64,
    pub hinge: f64,
    pub value_loss: f64,
    pub curriculum_bound: f64,
    pub mean_tracking: f64,
}

impl IterationMetrics {
    pub const CSV_HEADER: &'static str = "iteration,timesteps,episodes,mean_return,failure_rate,\
d_mean,d_min,d_max,var,cvar,beta_before,eta,lambda,beta,surrogate,hinge,value_loss,\
curriculum_bound,mean_tracking";

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:?}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.iteration,
            self.timesteps,
            self.episodes,
            opt(self.mean_return),
            opt(self.failure_rate),
            self.d_mean,
            self.d_min,
            self.d_max,
            self.var,
            self.cvar,
            self.beta_before,
            self.eta,
            self.lambda,
            self.beta,
            self.surrogate,
            self.hinge,
            self.value_loss,
            self.curriculum_bound,
            self.mean_tracking,
        )
    }
}

/// Everything the update saw during one iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub batch: RolloutBatch,
    /// Environment indices per minibatch, per epoch.
    pub schedule: Vec<Vec<Vec<usize>>>,
    pub state_before: LagrangianState,
    pub metrics: IterationMetrics,
}

/// Training state; the whole struct is what a checkpoint stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) policy: GaussianPolicy,
    pub(crate) critic: Mlp,
    pub(crate) actor_opt: Adam,
    pub(crate) critic_opt: Adam,
    /// `None` until the first batch sets η and β.
    pub(crate) state: Option<LagrangianState>,
    pub(crate) curriculum: Curriculum,
    pub(crate) env: VecEnv,
    pub(crate) obs: Vec<f64>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) iteration: usize,
    pub(crate) timesteps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, env: EnvConfig, reward: RewardWeights) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor_layout = MlpLayout::with_hidden(OBS_DIM, &config.hidden, ACT_DIM);
        let critic_layout = MlpLayout::with_hidden(OBS_DIM, &config.hidden, 1);
        let policy = GaussianPolicy::new(actor_layout, config.init_log_std, config.actor_output_gain, &mut rng);
        let critic = Mlp::new(critic_layout, &mut rng, 1.0);
        let curriculum = Curriculum::new(env.curriculum.clone());
        let mut env = VecEnv::new(
            env,
            reward,
            PerturbationSpec::None,
            curriculum.bound,
            config.seed.wrapping_add(ENV_SEED_OFFSET),
        )?;
        let obs = env.reset(config.seed.wrapping_add(ENV_SEED_OFFSET));
        env.stagger_episodes();
        Ok(Self {
            actor_opt: Adam::new(policy.params().len()),
            critic_opt: Adam::new(critic.params.len()),
            config,
            policy,
            critic,
            state: None,
            curriculum,
            env,
            obs,
            rng,
            iteration: 0,
            timesteps: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.policy
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn lagrangian(&self) -> Option<&LagrangianState> {
        self.state.as_ref()
    }

    pub fn env(&self) -> &VecEnv {
        &self.env
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    fn loss_params(&self, hinge_scale: f64) -> LossParams {
        LossParams {
            alpha: self.config.alpha,
            epsilon: self.config.epsilon,
            delta_clip: self.config.delta_clip,
            hinge_ratio: self.config.hinge_ratio,
            hinge_clip: self.config.hinge_clip,
            hinge_baseline: self.config.hinge_baseline,
            hinge_scale,
        }
    }

    pub fn iterate(&mut self) -> Result<IterationMetrics, TrainError> {
        Ok(self.iterate_recorded()?.metrics)
    }

    /// One iteration; on a non-finite result the trainer is left exactly as
    /// it was before the call.
    pub fn iterate_recorded(&mut self) -> Result<IterationRecord, TrainError> {
        let snapshot = self.clone();
        let result = self.iterate_inner();
        if result.is_err() {
            *self = snapshot;
        }
        result
    }

    fn iterate_inner(&mut self) -> Result<IterationRecord, TrainError> {
        let cfg = self.config.clone();
        let it = self.iteration;
        let nonfinite = |what| TrainError::NonFinite { what, iteration: it };
        let batch = collect(
            &self.policy,
            &self.critic,
            &mut self.env,
            &mut self.obs,
            cfg.rollout_len,
            cfg.gamma,
            cfg.gae_lambda,
            &mut self.rng,
        )?;
        let raw_adv = gae_advantages(&batch);
        let (adv, hinge_scale) = if cfg.normalize_advantages {
            (normalize_advantages(&raw_adv), 1.0 / advantage_std(&raw_adv))
        } else {
            (raw_adv.clone(), 1.0)
        };
        let segments = bootstrapped_returns(&batch);
        let d: Vec<f64> = segments.iter().map(|s| s.bootstrapped_return).collect();
        let sample = ReturnSample::new(d).map_err(|_| nonfinite("bootstrapped return"))?;
        let alpha = cfg.alpha;
        let var = var_estimate(&sample, alpha);
        let cvar = cvar_estimate(&sample, alpha);

        let state0 = match self.state {
            Some(s) => s,
            None => LagrangianState::new(var, var, cfg.lambda_max, cfg.lr_eta, cfg.lr_lambda)?,
        };
        let mut state = step_eta(&state0, &sample, alpha);

        let params = self.loss_params(hinge_scale);
        let mut envs: Vec<usize> = (0..batch.num_envs).collect();
        let per_mb = batch.num_envs.div_ceil(cfg.minibatches.min(batch.num_envs));
        let mut schedule = Vec::with_capacity(cfg.epochs);
        let (mut surr_sum, mut hinge_sum, mut vloss_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..cfg.epochs {
            envs.shuffle(&mut self.rng);
            let mut epoch = Vec::new();
            for chunk in envs.chunks(per_mb) {
                let mb = Minibatch::gather(&batch, &adv, &raw_adv, &segments, chunk);
                let (out, mut grad) = ppo_lagrangian_loss(&self.policy, &mb, &state, &params)
                    .map_err(|_| nonfinite("actor loss"))?;
                clip_grad_norm(&mut grad, cfg.max_grad_norm);
                self.actor_opt.step(self.policy.params_mut(), &grad, cfg.lr_theta)?;
                self.policy.clamp_log_std();

                let (vloss, mut vgrad) =
                    critic_loss(&self.critic, &mb.obs, &mb.value_targets, cfg.value_coef)?;
                clip_grad_norm(&mut vgrad, cfg.max_grad_norm);
                self.critic_opt.step(&mut self.critic.params, &vgrad, cfg.lr_critic)?;

                surr_sum += out.surrogate;
                hinge_sum += out.hinge;
                vloss_sum += vloss;
                count += 1;
                epoch.push(chunk.to_vec());
            }
            schedule.push(epoch);
        }
        if self.policy.params().iter().any(|x| !x.is_finite()) {
            return Err(nonfinite("actor parameters"));
        }
        if self.critic.params.iter().any(|x| !x.is_finite()) {
            return Err(nonfinite("critic parameters"));
        }

        if !cfg.freeze_lambda {
            state = step_lambda(&state, &sample, alpha);
        }
        state = update_beta(&state, &sample, alpha);
        if !(state.eta.is_finite() && state.beta.is_finite() && state.lambda.is_finite()) {
            return Err(nonfinite("Lagrangian state"));
        }
        self.state = Some(state);

        self.curriculum = self.curriculum.advance(batch.mean_tracking);
        self.env.set_curriculum_bound(self.curriculum.bound);
        self.timesteps += batch.len() as u64;
        self.iteration += 1;

        let episodes = batch.finished.len();
        let (mean_return, failure_rate) = if episodes == 0 {
            (None, None)
        } else {
            let n = episodes as f64;
            (
                Some(batch.finished.iter().map(|e| e.undiscounted_return).sum::<f64>() / n),
                Some(batch.finished.iter().filter(|e| e.failed).count() as f64 / n),
            )
        };
        let c = count as f64;
        let metrics = IterationMetrics {
            iteration: it,
            timesteps: self.timesteps,
            episodes,
            mean_return,
            failure_rate,
            d_mean: sample.mean(),
            d_min: sample.min(),
            d_max: sample.max(),
            var,
            cvar,
            beta_before: state0.beta,
            eta: state.eta,
            lambda: state.lambda,
            beta: state.beta,
            surrogate: surr_sum / c,
            hinge: hinge_sum / c,
            value_loss: vloss_sum / c,
            curriculum_bound: self.curriculum.bound,
            mean_tracking: batch.mean_tracking,
        };
        Ok(IterationRecord {
            batch,
            schedule,
            state_before: state0,
            metrics,
        })
    }

    /// Runs the remaining iterations, calling `on_iteration` after each.
    pub fn run<F>(&mut self, mut on_iteration: F) -> Result<Vec<IterationMetrics>, TrainError>
    where
        F: FnMut(&Trainer, &IterationMetrics) -> Result<(), TrainError>,
    {
        let mut rows = Vec::new();
        while !self.is_finished() {
            let m = self.iterate()?;
            on_iteration(self, &m)?;
            rows.push(m);
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riskcore::RiskLevel;

    fn small(alpha: f64, seed: u64) -> Trainer {
        let mut cfg = TrainConfig::with_alpha(RiskLevel::new(alpha).unwrap());
        cfg.hidden = vec![8];
        cfg.rollout_len = 6;
        cfg.iterations = 3;
        cfg.epochs = 2;
        cfg.minibatches = 2;
        cfg.seed = seed;
        let env = EnvConfig {
            num_envs: 8,
            episode_len: 10,
            ..Default::default()
        };
        Trainer::new(cfg, env, RewardWeights::default()).unwrap()
    }

    #[test]
    fn runs_are_deterministic() {
        let a = small(0.25, 3).run(|_, _| Ok(())).unwrap();
        let b = small(0.25, 3).run(|_, _| Ok(())).unwrap();
        assert_eq!(a, b);
        let c = small(0.25, 4).run(|_, _| Ok(())).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn first_batch_sets_eta_and_beta_to_var() {
        let mut t = small(0.25, 1);
        let rec = t.iterate_recorded().unwrap();
        assert_eq!(rec.state_before.eta, rec.metrics.var);
        assert_eq!(rec.state_before.beta, rec.metrics.var);
        assert_eq!(rec.state_before.lambda, 0.0);
        let row = rec.metrics;
        assert!(row.cvar <= row.var);
        assert_eq!(row.beta, 0.3 * row.var + 0.7 * row.beta_before);
    }

    #[test]
    fn frozen_lambda_stays_zero() {
        let mut t = small(0.05, 2);
        t.config.freeze_lambda = true;
        t.config.iterations = 4;
        let rows = t.run(|_, _| Ok(())).unwrap();
        assert!(rows.iter().all(|r| r.lambda == 0.0 && r.hinge == 0.0));
    }

    #[test]
    fn lambda_stays_in_bounds() {
        let mut t = small(0.05, 5);
        t.config.lr_lambda = 50.0;
        t.config.lambda_max = 2.0;
        t.config.iterations = 6;
        for r in t.run(|_, _| Ok(())).unwrap() {
            assert!((0.0..=2.0).contains(&r.lambda));
        }
    }

    #[test]
    fn schedule_covers_every_env_each_epoch() {
        let mut t = small(0.5, 6);
        let rec = t.iterate_recorded().unwrap();
        assert_eq!(rec.schedule.len(), 2);
        for epoch in &rec.schedule {
            let mut all: Vec<usize> = epoch.concat();
            all.sort_unstable();
            assert_eq!(all, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn csv_row_matches_header() {
        let mut t = small(0.5, 7);
        let row = t.iterate().unwrap().csv_row();
        assert_eq!(
            row.split(',').count(),
            IterationMetrics::CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn nonfinite_update_restores_state() {
        let mut t = small(0.5, 8);
        t.iterate().unwrap();
        t.config.lr_theta = f64::INFINITY;
        let before = t.clone();
        assert!(matches!(t.iterate(), Err(TrainError::NonFinite { .. })));
        assert_eq!(t, before);
    }
}
