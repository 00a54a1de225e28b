//! Experiment configuration file: `[env]`, `[reward]`, `[train]`,
//! `[bandit]`, `[eval]`, `[sweep]` and `[perturbations.<name>]`.
//! Unknown keys are rejected everywhere.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::envsim::{default_suite, EnvConfig, PerturbationSuite, RewardWeights};
use crate::riskcore::RiskLevel;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Which importance ratio multiplies a trajectory's hinge `(η − D̃)⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HingeRatio {
    /// Ratio at the trajectory's first state-action pair.
    #[default]
    FirstStep,
    /// Every step of the trajectory carries its own hinge sample.
    PerStep,
    /// Product of the per-step ratios along the trajectory.
    Product,
}

/// How the hinge term bounds its importance ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HingeClip {
    /// `min(r̄·h, g(δ, h))`: caps the penalty value from above.
    #[default]
    Cap,
    /// `max(r̄·h, clip(r̄, 1−δ, 1+δ)·h)`: the pessimistic bound for a cost,
    /// which stops the gradient once `r̄` leaves the trust region.
    TrustRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: RiskLevel,
    #[serde(default = "d::epsilon")]
    pub epsilon: f64,
    #[serde(default = "d::delta_clip")]
    pub delta_clip: f64,
    #[serde(default = "d::lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "d::lr_eta")]
    pub lr_eta: f64,
    #[serde(default = "d::lr_theta")]
    pub lr_theta: f64,
    #[serde(default = "d::lr_critic")]
    pub lr_critic: f64,
    #[serde(default = "d::lr_lambda")]
    pub lr_lambda: f64,
    /// Steps per environment per iteration (T).
    #[serde(default = "d::rollout_len")]
    pub rollout_len: usize,
    #[serde(default = "d::iterations")]
    pub iterations: usize,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default = "d::minibatches")]
    pub minibatches: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d::gamma")]
    pub gamma: f64,
    #[serde(default = "d::gae_lambda")]
    pub gae_lambda: f64,
    #[serde(default = "d::value_coef")]
    pub value_coef: f64,
    #[serde(default = "d::yes")]
    pub normalize_advantages: bool,
    #[serde(default)]
    pub hinge_ratio: HingeRatio,
    #[serde(default)]
    pub hinge_clip: HingeClip,
    /// Subtract the minibatch mean shortfall before weighting by the ratio.
    #[serde(default)]
    pub hinge_baseline: bool,
    /// Keep λ at 0 for the whole run (plain PPO).
    #[serde(default)]
    pub freeze_lambda: bool,
    #[serde(default = "d::hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d::init_log_std")]
    pub init_log_std: f64,
    #[serde(default = "d::actor_output_gain")]
    pub actor_output_gain: f64,
    #[serde(default = "d::max_grad_norm")]
    pub max_grad_norm: f64,
    /// Iterations between checkpoints; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

mod d {
    pub fn epsilon() -> f64 {
        0.2
    }
    pub fn delta_clip() -> f64 {
        0.2
    }
    pub fn lambda_max() -> f64 {
        10.0
    }
    pub fn lr_eta() -> f64 {
        0.5
    }
    pub fn lr_theta() -> f64 {
        3e-4
    }
    pub fn lr_critic() -> f64 {
        1e-3
    }
    pub fn lr_lambda() -> f64 {
        0.05
    }
    pub fn rollout_len() -> usize {
        24
    }
    pub fn iterations() -> usize {
        300
    }
    pub fn epochs() -> usize {
        5
    }
    pub fn minibatches() -> usize {
        4
    }
    pub fn gamma() -> f64 {
        0.99
    }
    pub fn gae_lambda() -> f64 {
        0.95
    }
    pub fn value_coef() -> f64 {
        0.5
    }
    pub fn yes() -> bool {
        true
    }
    pub fn hidden() -> Vec<usize> {
        vec![256, 256, 256]
    }
    pub fn init_log_std() -> f64 {
        -0.5
    }
    pub fn actor_output_gain() -> f64 {
        0.01
    }
    pub fn max_grad_norm() -> f64 {
        1.0
    }
}

impl TrainConfig {
    /// Defaults for everything except `alpha`.
    pub fn with_alpha(alpha: RiskLevel) -> Self {
        Self {
            alpha,
            epsilon: d::epsilon(),
            delta_clip: d::delta_clip(),
            lambda_max: d::lambda_max(),
            lr_eta: d::lr_eta(),
            lr_theta: d::lr_theta(),
            lr_critic: d::lr_critic(),
            lr_lambda: d::lr_lambda(),
            rollout_len: d::rollout_len(),
            iterations: d::iterations(),
            epochs: d::epochs(),
            minibatches: d::minibatches(),
            seed: 0,
            gamma: d::gamma(),
            gae_lambda: d::gae_lambda(),
            value_coef: d::value_coef(),
            normalize_advantages: true,
            hinge_ratio: HingeRatio::FirstStep,
            hinge_clip: HingeClip::Cap,
            hinge_baseline: false,
            freeze_lambda: false,
            hidden: d::hidden(),
            init_log_std: d::init_log_std(),
            actor_output_gain: d::actor_output_gain(),
            max_grad_norm: d::max_grad_norm(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit_open = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must lie in (0, 1), got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        unit_open("train.epsilon", self.epsilon)?;
        unit_open("train.delta_clip", self.delta_clip)?;
        positive("train.lambda_max", self.lambda_max)?;
        positive("train.lr_eta", self.lr_eta)?;
        positive("train.lr_theta", self.lr_theta)?;
        positive("train.lr_critic", self.lr_critic)?;
        positive("train.lr_lambda", self.lr_lambda)?;
        positive("train.value_coef", self.value_coef)?;
        positive("train.max_grad_norm", self.max_grad_norm)?;
        positive("train.actor_output_gain", self.actor_output_gain)?;
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("train.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(invalid("train.gae_lambda", "must lie in [0, 1]"));
        }
        for (name, v) in [
            ("train.rollout_len", self.rollout_len),
            ("train.iterations", self.iterations),
            ("train.epochs", self.epochs),
            ("train.minibatches", self.minibatches),
        ] {
            if v == 0 {
                return Err(invalid(name, "must be at least 1"));
            }
        }
        if self.hidden.contains(&0) {
            return Err(invalid("train.hidden", "layer widths must be positive"));
        }
        if !self.init_log_std.is_finite() {
            return Err(invalid("train.init_log_std", "must be finite"));
        }
        Ok(())
    }
}

/// One bandit arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ArmSpec {
    Gaussian {
        mean: f64,
        std: f64,
    },
    /// Returns replayed in order, cycling.
    FixedTrace {
        returns: Vec<f64>,
    },
    /// A trained policy run for one episode per pull.
    LivePolicy {
        checkpoint: PathBuf,
        #[serde(default = "none_name")]
        perturbation: String,
    },
}

fn none_name() -> String {
    "none".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BanditSection {
    pub horizon: usize,
    pub delta_conf: f64,
    /// Steps per episode; `None` uses `env.episode_len`.
    pub episode_len: Option<u32>,
    /// Overrides the range derived from the reward interval.
    pub reward_range: Option<f64>,
    /// Episodes per row of the selection-frequency summary.
    pub window: usize,
    pub arms: Vec<ArmSpec>,
}

impl Default for BanditSection {
    fn default() -> Self {
        Self {
            horizon: 500,
            delta_conf: 0.1,
            episode_len: None,
            reward_range: None,
            window: 125,
            arms: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub num_envs: usize,
    pub alphas: Vec<f64>,
    pub perturbations: Vec<String>,
    /// Command-magnitude bound during evaluation; unset uses each
    /// checkpoint's final curriculum bound.
    pub command_bound: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            // Each of the 20 simulators runs 6000 steps, resetting every 100.
            episodes: 1200,
            num_envs: 20,
            alphas: vec![0.05, 0.1, 0.25, 0.5, 0.75],
            perturbations: default_suite().into_keys().collect(),
            command_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    /// Add a λ-frozen PPO run.
    pub include_ppo: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.1, 0.25, 0.5, 0.75],
            include_ppo: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub reward: RewardWeights,
    pub train: TrainConfig,
    #[serde(default)]
    pub bandit: BanditSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Merged over the built-in suite; entries here override by name.
    #[serde(default)]
    pub perturbations: PerturbationSuite,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Built-in suite with the file's entries layered on top.
    pub fn suite(&self) -> PerturbationSuite {
        let mut s = default_suite();
        s.extend(self.perturbations.clone());
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| invalid("env", e.to_string()))?;
        self.reward.validate().map_err(|e| invalid("reward", e.to_string()))?;
        self.train.validate()?;
        for (name, p) in &self.perturbations {
            p.validate()
                .map_err(|e| invalid(&format!("perturbations.{name}"), e.to_string()))?;
        }
        let b = &self.bandit;
        if !(b.delta_conf > 0.0 && b.delta_conf < 1.0) {
            return Err(invalid("bandit.delta_conf", "must lie in (0, 1)"));
        }
        if let Some(r) = b.reward_range {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid("bandit.reward_range", "must be positive"));
            }
        }
        if b.window == 0 {
            return Err(invalid("bandit.window", "must be at least 1"));
        }
        if let Some(b) = self.eval.command_bound {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(invalid("eval.command_bound", "must be finite and non-negative"));
            }
        }
        if self.eval.num_envs == 0 {
            return Err(invalid("eval.num_envs", "must be at least 1"));
        }
        for &a in self.eval.alphas.iter().chain(&self.sweep.alphas) {
            RiskLevel::new(a).map_err(|e| invalid("alphas", e.to_string()))?;
        }
        let suite = self.suite();
        for name in &self.eval.perturbations {
            crate::envsim::resolve_perturbation(&suite, name)
                .map_err(|e| invalid("eval.perturbations", e.to_string()))?;
        }
        Ok(())
    }

    /// Bandit range: episodic span from the per-step reward interval unless
    /// overridden.
    pub fn bandit_reward_range(&self) -> f64 {
        self.bandit.reward_range.unwrap_or_else(|| {
            let steps = self.bandit.episode_len.unwrap_or(self.env.episode_len);
            self.env.return_range(&self.reward, steps)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::PerturbationSpec;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse("[train]\nalpha = 0.25\n").unwrap();
        assert_eq!(cfg.train, TrainConfig::with_alpha(RiskLevel::new(0.25).unwrap()));
        assert_eq!(cfg.env, EnvConfig::default());
        assert_eq!(cfg.suite(), default_suite());
    }

    #[test]
    fn missing_alpha_names_the_field() {
        let err = ExperimentConfig::parse("[train]\nepsilon = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "[train]\nalpha = 0.5\nalhpa = 0.2\n",
            "[train]\nalpha = 0.5\n[env]\nnum_env = 3\n",
            "[train]\nalpha = 0.5\n[reward]\nsigmaa = 1.0\n",
            "[train]\nalpha = 0.5\n[extra]\n",
            "[train]\nalpha = 0.5\n[perturbations.x]\nkind = \"delay\"\nseconds = 0.1\nfoo = 1\n",
        ] {
            assert!(ExperimentConfig::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn out_of_range_values_name_the_field() {
        let err = ExperimentConfig::parse("[train]\nalpha = 0.5\nepsilon = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("train.epsilon"), "{err}");
        assert!(ExperimentConfig::parse("[train]\nalpha = 0.0\n").is_err());
        assert!(ExperimentConfig::parse("[train]\nalpha = 0.5\n[eval]\nperturbations = [\"wind\"]\n").is_err());
    }

    #[test]
    fn perturbation_overrides_merge() {
        let text = "[train]\nalpha = 0.5\n[perturbations.delay]\nkind = \"delay\"\nseconds = 0.1\n\
                    [perturbations.slow]\nkind = \"gain\"\nrange = [5.0, 6.0]\n";
        let suite = ExperimentConfig::parse(text).unwrap().suite();
        assert_eq!(suite["delay"], PerturbationSpec::Delay { seconds: 0.1 });
        assert_eq!(suite["slow"], PerturbationSpec::Gain { range: [5.0, 6.0] });
        assert_eq!(suite.len(), default_suite().len() + 1);
    }

    #[test]
    fn arms_parse() {
        let text = "[train]\nalpha = 0.5\n\
            [[bandit.arms]]\nfamily = \"gaussian\"\nmean = 1.0\nstd = 0.5\n\
            [[bandit.arms]]\nfamily = \"fixed-trace\"\nreturns = [1.0, 2.0]\n\
            [[bandit.arms]]\nfamily = \"live-policy\"\ncheckpoint = \"a.json\"\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.bandit.arms.len(), 3);
        assert_eq!(
            cfg.bandit.arms[2],
            ArmSpec::LivePolicy {
                checkpoint: "a.json".into(),
                perturbation: "none".into()
            }
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::parse("[train]\nalpha = 0.1\n").unwrap();
        cfg.bandit.arms.push(ArmSpec::Gaussian { mean: 1.0, std: 2.0 });
        cfg.perturbations.insert("delay".into(), PerturbationSpec::Delay { seconds: 0.2 });
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn derived_reward_range_spans_the_episode() {
        let cfg = ExperimentConfig::parse("[train]\nalpha = 0.5\n").unwrap();
        let (lo, hi) = cfg.env.reward_bounds(&cfg.reward);
        let expected = (hi - lo) * cfg.env.episode_len as f64;
        assert!((cfg.bandit_reward_range() - expected).abs() < 1e-9);
    }
}
