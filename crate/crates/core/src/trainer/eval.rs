use serde::{Deserialize, Serialize};

use super::Checkpoint;
use crate::envsim::{EnvConfig, PerturbationSpec, RewardWeights, VecEnv, ACT_DIM};
use crate::error::TrainError;
use crate::policynet::GaussianPolicy;
use crate::riskcore::{cvar_estimate, var_estimate, ReturnSample, RiskLevel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub alpha: f64,
    pub var: f64,
    pub cvar: f64,
}

/// Distribution of undiscounted episodic returns under one perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean: f64,
    pub failure_rate: f64,
    pub mean_length: f64,
    pub tails: Vec<TailStats>,
    /// Returns ordered by environment, then by episode.
    pub returns: Vec<f64>,
}

/// Runs the mean action of `policy` until `episodes` episodes have ended.
///
/// Environment `e` contributes its first `episodes/n` episodes (one more for
/// the first `episodes % n` envs), so short failing episodes are not
/// over-represented.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    policy: &GaussianPolicy,
    env_config: &EnvConfig,
    reward: &RewardWeights,
    curriculum_bound: f64,
    perturbation: &PerturbationSpec,
    episodes: usize,
    alphas: &[RiskLevel],
    seed: u64,
    num_envs: usize,
) -> Result<EvalSummary, TrainError> {
    if episodes == 0 {
        return Err(TrainError::NoEpisodes);
    }
    let n = num_envs.clamp(1, episodes);
    let cfg = EnvConfig {
        num_envs: n,
        ..env_config.clone()
    };
    let mut env = VecEnv::new(cfg, reward.clone(), perturbation.clone(), curriculum_bound, seed)?;
    let mut obs = env.reset(seed);
    let quota: Vec<usize> = (0..n).map(|e| episodes / n + usize::from(e < episodes % n)).collect();
    let mut per_env: Vec<Vec<(f64, u32, bool)>> = vec![Vec::new(); n];
    while per_env.iter().zip(&quota).any(|(v, &q)| v.len() < q) {
        let actions = policy.mean_batch(&obs)?;
        debug_assert_eq!(actions.len(), n * ACT_DIM);
        let out = env.step(&actions)?;
        for end in &out.finished {
            if per_env[end.env].len() < quota[end.env] {
                per_env[end.env].push((end.undiscounted_return, end.length, end.failed));
            }
        }
        obs = out.obs;
    }
    let all: Vec<(f64, u32, bool)> = per_env.into_iter().flatten().collect();
    let returns: Vec<f64> = all.iter().map(|x| x.0).collect();
    let sample = ReturnSample::new(returns.clone()).map_err(TrainError::Risk)?;
    let k = all.len() as f64;
    Ok(EvalSummary {
        episodes: all.len(),
        mean: sample.mean(),
        failure_rate: all.iter().filter(|x| x.2).count() as f64 / k,
        mean_length: all.iter().map(|x| x.1 as f64).sum::<f64>() / k,
        tails: alphas
            .iter()
            .map(|&a| TailStats {
                alpha: a.value(),
                var: var_estimate(&sample, a),
                cvar: cvar_estimate(&sample, a),
            })
            .collect(),
        returns,
    })
}

/// [`evaluate_policy`] with the environment and reward stored in the
/// checkpoint. Commands are drawn within `command_bound`, or within the
/// checkpoint's final curriculum bound when `None`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    checkpoint: &Checkpoint,
    perturbation: &PerturbationSpec,
    episodes: usize,
    alphas: &[RiskLevel],
    seed: u64,
    num_envs: usize,
    command_bound: Option<f64>,
) -> Result<EvalSummary, TrainError> {
    let t = &checkpoint.trainer;
    evaluate_policy(
        &t.policy,
        t.env.config(),
        t.env.weights(),
        command_bound.unwrap_or(t.curriculum.bound),
        perturbation,
        episodes,
        alphas,
        seed,
        num_envs,
    )
}
