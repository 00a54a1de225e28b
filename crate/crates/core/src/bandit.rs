//! Online policy selection with an empirical-Bernstein UCB.
//!
//! Each arm is a fixed policy; pulling it means running the policy for one
//! episode of `T` steps and observing the undiscounted return. The score of
//! arm `k` at episode `e` is
//!
//! ```text
//! μ̂_k + sqrt(2·σ̂²_k·ln(3/δ_e)/N_k) + 3·R·ln(3/δ_e)/N_k,   δ_e = δ/(K·e²)
//! ```
//!
//! with `σ̂²_k` the unbiased sample variance (0 below two pulls).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::envsim::{EnvConfig, PerturbationSpec, RewardWeights, VecEnv};
use crate::error::BanditError;
use crate::policynet::GaussianPolicy;

/// Streaming mean and variance of one arm's returns (Welford).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmStats {
    pulls: u64,
    mean: f64,
    m2: f64,
}

impl ArmStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_returns(returns: &[f64]) -> Self {
        let mut s = Self::new();
        for &x in returns {
            s.push(x);
        }
        s
    }

    pub fn push(&mut self, x: f64) {
        self.pulls += 1;
        let d = x - self.mean;
        self.mean += d / self.pulls as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn pulls(&self) -> u64 {
        self.pulls
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 with fewer than two pulls.
    pub fn variance(&self) -> f64 {
        if self.pulls < 2 {
            0.0
        } else {
            (self.m2 / (self.pulls - 1) as f64).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub num_arms: usize,
    /// Steps per episode.
    pub episode_len: u32,
    /// Number of episodes.
    pub horizon: usize,
    pub delta_conf: f64,
    /// Known span of episodic returns.
    pub reward_range: f64,
}

impl BanditConfig {
    pub fn validate(&self) -> Result<(), BanditError> {
        if self.num_arms < 2 {
            return Err(BanditError::Config(format!(
                "need at least 2 arms, got {}",
                self.num_arms
            )));
        }
        if self.horizon < self.num_arms {
            return Err(BanditError::Config(format!(
                "horizon {} is shorter than the warm start ({} arms)",
                self.horizon, self.num_arms
            )));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf < 1.0) {
            return Err(BanditError::Config("delta_conf must lie in (0, 1)".into()));
        }
        if !(self.reward_range > 0.0 && self.reward_range.is_finite()) {
            return Err(BanditError::Config("reward_range must be positive".into()));
        }
        Ok(())
    }

    /// Confidence budget of episode `e` (1-based).
    pub fn delta_e(&self, e: usize) -> f64 {
        self.delta_conf / (self.num_arms as f64 * (e as f64) * (e as f64))
    }
}

/// Empirical-Bernstein upper confidence bound for one arm at episode `e`.
pub fn ucb_score(stats: &ArmStats, e: usize, cfg: &BanditConfig) -> Result<f64, BanditError> {
    ucb_from_log(stats, (3.0 / cfg.delta_e(e.max(1))).ln(), cfg.reward_range)
        .ok_or(BanditError::UnpulledArm(0))
}

/// The same bound with `ln(3/δ_e)` supplied directly.
pub fn ucb_from_log(stats: &ArmStats, log_term: f64, reward_range: f64) -> Option<f64> {
    if stats.pulls == 0 {
        return None;
    }
    let n = stats.pulls as f64;
    Some(stats.mean + (2.0 * stats.variance() * log_term / n).sqrt() + 3.0 * reward_range * log_term / n)
}

/// Scores of every arm; fails on the first arm that has never been pulled.
pub fn ucb_scores(stats: &[ArmStats], e: usize, cfg: &BanditConfig) -> Result<Vec<f64>, BanditError> {
    stats
        .iter()
        .enumerate()
        .map(|(k, s)| ucb_score(s, e, cfg).map_err(|_| BanditError::UnpulledArm(k)))
        .collect()
}

/// `argmax_k UCB_k`, lowest index on ties.
pub fn select_arm(stats: &[ArmStats], e: usize, cfg: &BanditConfig) -> Result<usize, BanditError> {
    if let Some(k) = stats.iter().position(|s| s.pulls == 0) {
        return Err(BanditError::WarmStartIncomplete(k));
    }
    let scores = ucb_scores(stats, e, cfg)?;
    Ok(argmax_lowest(&scores))
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// Something that produces one episodic return per pull.
pub trait ArmSource {
    fn num_arms(&self) -> usize;
    fn pull(&mut self, arm: usize, rng: &mut ChaCha8Rng) -> f64;
    /// True means, when known (simulated arms only).
    fn true_means(&self) -> Option<Vec<f64>> {
        None
    }
}

/// Independent Gaussian arms.
#[derive(Debug, Clone)]
pub struct GaussianArms {
    arms: Vec<Normal<f64>>,
    means: Vec<f64>,
}

impl GaussianArms {
    pub fn new(params: &[(f64, f64)]) -> Result<Self, BanditError> {
        let arms = params
            .iter()
            .enumerate()
            .map(|(k, &(m, s))| {
                Normal::new(m, s).map_err(|e| BanditError::ArmLoad {
                    arm: k,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            arms,
            means: params.iter().map(|p| p.0).collect(),
        })
    }
}

impl ArmSource for GaussianArms {
    fn num_arms(&self) -> usize {
        self.arms.len()
    }

    fn pull(&mut self, arm: usize, rng: &mut ChaCha8Rng) -> f64 {
        self.arms[arm].sample(rng)
    }

    fn true_means(&self) -> Option<Vec<f64>> {
        Some(self.means.clone())
    }
}

/// Arms with returns drawn uniformly from `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct UniformArms {
    pub ranges: Vec<(f64, f64)>,
}

impl ArmSource for UniformArms {
    fn num_arms(&self) -> usize {
        self.ranges.len()
    }

    fn pull(&mut self, arm: usize, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.ranges[arm];
        rng.gen_range(lo..=hi)
    }

    fn true_means(&self) -> Option<Vec<f64>> {
        Some(self.ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect())
    }
}

/// Replays recorded returns per arm, cycling when a trace runs out.
#[derive(Debug, Clone)]
pub struct TraceArms {
    traces: Vec<Vec<f64>>,
    cursor: Vec<usize>,
}

impl TraceArms {
    pub fn new(traces: Vec<Vec<f64>>) -> Result<Self, BanditError> {
        if let Some(k) = traces.iter().position(|t| t.is_empty()) {
            return Err(BanditError::ArmLoad {
                arm: k,
                reason: "empty return trace".into(),
            });
        }
        let cursor = vec![0; traces.len()];
        Ok(Self { traces, cursor })
    }
}

impl ArmSource for TraceArms {
    fn num_arms(&self) -> usize {
        self.traces.len()
    }

    fn pull(&mut self, arm: usize, _rng: &mut ChaCha8Rng) -> f64 {
        let t = &self.traces[arm];
        let x = t[self.cursor[arm] % t.len()];
        self.cursor[arm] += 1;
        x
    }
}

/// Trained policies, each run with its mean action for one full episode per
/// pull in its own single-environment simulator.
#[derive(Debug, Clone)]
pub struct PolicyArms {
    arms: Vec<(GaussianPolicy, VecEnv, Vec<f64>)>,
}

impl PolicyArms {
    pub fn new(
        policies: Vec<GaussianPolicy>,
        env: &EnvConfig,
        reward: &RewardWeights,
        perturbation: &PerturbationSpec,
        command_bound: f64,
        seed: u64,
    ) -> Result<Self, BanditError> {
        let cfg = EnvConfig {
            num_envs: 1,
            ..env.clone()
        };
        let arms = policies
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                let s = seed.wrapping_add(k as u64);
                let mut env = VecEnv::new(cfg.clone(), reward.clone(), perturbation.clone(), command_bound, s)
                    .map_err(|e| BanditError::ArmLoad {
                        arm: k,
                        reason: e.to_string(),
                    })?;
                let obs = env.reset(s);
                Ok((p, env, obs))
            })
            .collect::<Result<Vec<_>, BanditError>>()?;
        Ok(Self { arms })
    }
}

impl ArmSource for PolicyArms {
    fn num_arms(&self) -> usize {
        self.arms.len()
    }

    fn pull(&mut self, arm: usize, _rng: &mut ChaCha8Rng) -> f64 {
        let (policy, env, obs) = &mut self.arms[arm];
        loop {
            let action = policy.mean(obs).expect("policy matches the environment");
            let out = env.step(&action).expect("action has the environment's shape");
            *obs = out.obs;
            if let Some(end) = out.finished.first() {
                return end.undiscounted_return;
            }
        }
    }
}

impl<T: ArmSource + ?Sized> ArmSource for Box<T> {
    fn num_arms(&self) -> usize {
        (**self).num_arms()
    }

    fn pull(&mut self, arm: usize, rng: &mut ChaCha8Rng) -> f64 {
        (**self).pull(arm, rng)
    }

    fn true_means(&self) -> Option<Vec<f64>> {
        (**self).true_means()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    pub arm: usize,
    pub episodic_return: f64,
    /// Scores used to pick the arm; `None` during the warm start.
    pub ucb: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditRun {
    pub records: Vec<EpisodeRecord>,
    pub stats: Vec<ArmStats>,
    pub true_means: Option<Vec<f64>>,
}

impl BanditRun {
    pub fn selections(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.arm).collect()
    }

    /// `e·μ* − Σ_{l≤e} X_l` with `μ*` the true best mean.
    pub fn realized_regret(&self) -> Option<Vec<f64>> {
        let best = self.true_means.as_ref()?.iter().copied().fold(f64::MIN, f64::max);
        Some(regret_curve(&self.records, best))
    }

    /// `Σ_{l≤e} (μ* − μ_{k_l})`, simulation only.
    pub fn pseudo_regret(&self) -> Option<Vec<f64>> {
        let means = self.true_means.as_ref()?;
        let best = means.iter().copied().fold(f64::MIN, f64::max);
        let mut acc = 0.0;
        Some(
            self.records
                .iter()
                .map(|r| {
                    acc += best - means[r.arm];
                    acc
                })
                .collect(),
        )
    }

    /// Regret against the best empirical mean at the end of the run.
    pub fn empirical_regret(&self) -> Vec<f64> {
        let best = self
            .stats
            .iter()
            .filter(|s| s.pulls() > 0)
            .map(|s| s.mean())
            .fold(f64::MIN, f64::max);
        regret_curve(&self.records, best)
    }

    /// Fraction of selections of each arm within consecutive windows of
    /// `window` episodes. Rows are windows, columns arms.
    pub fn selection_frequencies(&self, window: usize) -> Vec<Vec<f64>> {
        let k = self.stats.len();
        self.records
            .chunks(window.max(1))
            .map(|chunk| {
                let mut counts = vec![0.0; k];
                for r in chunk {
                    counts[r.arm] += 1.0;
                }
                counts.iter().map(|c| c / chunk.len() as f64).collect()
            })
            .collect()
    }
}

fn regret_curve(records: &[EpisodeRecord], best_mean: f64) -> Vec<f64> {
    let mut total = 0.0;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            total += r.episodic_return;
            (i + 1) as f64 * best_mean - total
        })
        .collect()
}

/// Warm start (one pull per arm, in order) followed by `H − K` UCB rounds.
pub fn run_bandit<S: ArmSource + ?Sized>(
    source: &mut S,
    cfg: &BanditConfig,
    seed: u64,
) -> Result<BanditRun, BanditError> {
    cfg.validate()?;
    if source.num_arms() != cfg.num_arms {
        return Err(BanditError::Config(format!(
            "config has {} arms but the source provides {}",
            cfg.num_arms,
            source.num_arms()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = vec![ArmStats::new(); cfg.num_arms];
    let mut records = Vec::with_capacity(cfg.horizon);
    for e in 1..=cfg.horizon {
        let (arm, ucb) = if e <= cfg.num_arms {
            (e - 1, None)
        } else {
            let scores = ucb_scores(&stats, e, cfg)?;
            (argmax_lowest(&scores), Some(scores))
        };
        let x = source.pull(arm, &mut rng);
        stats[arm].push(x);
        records.push(EpisodeRecord {
            episode: e,
            arm,
            episodic_return: x,
            ucb,
        });
    }
    Ok(BanditRun {
        records,
        stats,
        true_means: source.true_means(),
    })
}
