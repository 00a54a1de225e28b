//! On-policy trajectory collection, GAE, and bootstrapped window returns.
//!
//! Batches are laid out time-major: the entry for step `t` of environment
//! `e` lives at index `t * num_envs + e`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::envsim::{EpisodeEnd, VecEnv, ACT_DIM, OBS_DIM};
use crate::error::TrainError;
use crate::policynet::{gaussian_log_prob, GaussianPolicy, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub num_steps: usize,
    pub num_envs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    /// `log π_θold(a|s)`.
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `V(s_t)`.
    pub values: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    /// Value that bootstraps the step's successor: `V(s_{t+1})` inside an
    /// episode, `V(s_T)` at the window edge, `V(s_final)` at a time limit and
    /// 0 after a failure.
    pub next_values: Vec<f64>,
    pub finished: Vec<EpisodeEnd>,
    /// Mean normalized tracking reward over the batch.
    pub mean_tracking: f64,
}

/// A maximal run of steps of one environment that does not cross an
/// episode boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub env: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// `Σ_{t<L} γ^t r_t + γ^L V_boot`, discounted from the segment start.
    pub bootstrapped_return: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.num_steps * self.num_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, t: usize, env: usize) -> usize {
        t * self.num_envs + env
    }

    pub fn done(&self, i: usize) -> bool {
        self.terminated[i] || self.truncated[i]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.len();
        let ok = self.obs.len() == n * OBS_DIM
            && self.actions.len() == n * ACT_DIM
            && [
                self.log_probs.len(),
                self.rewards.len(),
                self.values.len(),
                self.next_values.len(),
                self.terminated.len(),
                self.truncated.len(),
            ]
            .iter()
            .all(|&l| l == n);
        if !ok {
            return Err(TrainError::Config("rollout batch tensors disagree in shape".into()));
        }
        if self.log_probs.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "rollout log-probability",
                iteration: 0,
            });
        }
        Ok(())
    }
}

/// Backward GAE recursion
/// `A_t = δ_t + γλ(1 − done_t)·A_{t+1}` with `δ_t = r_t + γ·V_next − V_t`.
pub fn gae_advantages(batch: &RolloutBatch) -> Vec<f64> {
    let (t_len, n) = (batch.num_steps, batch.num_envs);
    let mut adv = vec![0.0; t_len * n];
    let gl = batch.gamma * batch.gae_lambda;
    for e in 0..n {
        let mut next = 0.0;
        for t in (0..t_len).rev() {
            let i = batch.index(t, e);
            if batch.done(i) {
                next = 0.0;
            }
            let delta = batch.rewards[i] + batch.gamma * batch.next_values[i] - batch.values[i];
            next = delta + gl * next;
            adv[i] = next;
        }
    }
    adv
}

/// Shifts and scales to zero mean and unit (population) variance.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return Vec::new();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mean) / std).collect()
}

/// Per-segment bootstrapped returns, ordered by environment then start.
///
/// Without episode boundaries inside the window this is one value per
/// environment, `Σ_{t<T} γ^t r_t + γ^T V(s_T)`.
pub fn bootstrapped_returns(batch: &RolloutBatch) -> Vec<Segment> {
    let mut out = Vec::new();
    for e in 0..batch.num_envs {
        let mut start = 0;
        while start < batch.num_steps {
            let mut end = start;
            loop {
                let i = batch.index(end, e);
                end += 1;
                if batch.done(i) || end == batch.num_steps {
                    break;
                }
            }
            // Horner from the back: G = r_t + γ·G.
            let last = batch.index(end - 1, e);
            let mut g = batch.next_values[last];
            for t in (start..end).rev() {
                g = batch.rewards[batch.index(t, e)] + batch.gamma * g;
            }
            out.push(Segment {
                env: e,
                start,
                end,
                bootstrapped_return: g,
            });
            start = end;
        }
    }
    out
}

/// For every step, the index of the segment containing it.
pub fn segment_index_per_step(batch: &RolloutBatch, segments: &[Segment]) -> Vec<usize> {
    let mut map = vec![usize::MAX; batch.len()];
    for (k, s) in segments.iter().enumerate() {
        for t in s.start..s.end {
            map[batch.index(t, s.env)] = k;
        }
    }
    map
}

fn batch_values(critic: &Mlp, obs: &[f64]) -> Result<Vec<f64>, TrainError> {
    Ok(critic.forward_batch(obs)?.output().to_vec())
}

/// Runs the stochastic policy for `num_steps` steps on every environment.
///
/// `obs` holds the current observations and is advanced in place.
#[allow(clippy::too_many_arguments)]
pub fn collect<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    critic: &Mlp,
    env: &mut VecEnv,
    obs: &mut Vec<f64>,
    num_steps: usize,
    gamma: f64,
    gae_lambda: f64,
    rng: &mut R,
) -> Result<RolloutBatch, TrainError> {
    if num_steps == 0 {
        return Err(TrainError::Config("rollout length must be at least 1".into()));
    }
    let n = env.num_envs();
    let total = num_steps * n;
    let mut batch = RolloutBatch {
        num_steps,
        num_envs: n,
        gamma,
        gae_lambda,
        obs: Vec::with_capacity(total * OBS_DIM),
        actions: Vec::with_capacity(total * ACT_DIM),
        log_probs: Vec::with_capacity(total),
        rewards: Vec::with_capacity(total),
        values: Vec::with_capacity(total),
        terminated: Vec::with_capacity(total),
        truncated: Vec::with_capacity(total),
        next_values: vec![0.0; total],
        finished: Vec::new(),
        mean_tracking: 0.0,
    };
    let log_std = policy.log_std().to_vec();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let mut tracking_sum = 0.0;
    // (flat index, env) of time-limit ends needing V(s_final).
    let mut truncations: Vec<(usize, Vec<f64>)> = Vec::new();
    for _ in 0..num_steps {
        let means = policy.mean_batch(obs)?;
        batch.values.extend(batch_values(critic, obs)?);
        let mut actions = Vec::with_capacity(n * ACT_DIM);
        for e in 0..n {
            let m = &means[e * ACT_DIM..(e + 1) * ACT_DIM];
            let a: Vec<f64> = m
                .iter()
                .zip(&std)
                .map(|(&mu, &s)| {
                    let z: f64 = StandardNormal.sample(rng);
                    mu + s * z
                })
                .collect();
            batch.log_probs.push(gaussian_log_prob(&a, m, &log_std));
            actions.extend(a);
        }
        let out = env.step(&actions)?;
        batch.obs.extend_from_slice(obs);
        batch.actions.extend(actions);
        let base = batch.rewards.len();
        batch.rewards.extend(&out.rewards);
        batch.terminated.extend(&out.terminated);
        batch.truncated.extend(&out.truncated);
        tracking_sum += out.tracking.iter().sum::<f64>();
        for e in 0..n {
            if out.truncated[e] {
                truncations.push((base + e, out.final_obs[e * OBS_DIM..(e + 1) * OBS_DIM].to_vec()));
            }
        }
        batch.finished.extend(out.finished);
        *obs = out.obs;
    }
    let bootstrap = batch_values(critic, obs)?;
    for t in 0..num_steps {
        for e in 0..n {
            let i = t * n + e;
            batch.next_values[i] = if batch.terminated[i] || batch.truncated[i] {
                0.0
            } else if t + 1 == num_steps {
                bootstrap[e]
            } else {
                batch.values[i + n]
            };
        }
    }
    if !truncations.is_empty() {
        let finals: Vec<f64> = truncations.iter().flat_map(|(_, o)| o.iter().copied()).collect();
        let v = batch_values(critic, &finals)?;
        for ((i, _), v) in truncations.iter().zip(v) {
            batch.next_values[*i] = v;
        }
    }
    batch.mean_tracking = tracking_sum / total as f64;
    batch.validate()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{EnvConfig, PerturbationSpec, RewardWeights};
    use crate::policynet::MlpLayout;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Batch with OBS/ACT tensors zero-filled; only the scalar streams matter.
    pub(crate) fn scalar_batch(
        num_steps: usize,
        num_envs: usize,
        gamma: f64,
        lam: f64,
        rewards: Vec<f64>,
        values: Vec<f64>,
        next_values: Vec<f64>,
        terminated: Vec<bool>,
    ) -> RolloutBatch {
        let n = num_steps * num_envs;
        RolloutBatch {
            num_steps,
            num_envs,
            gamma,
            gae_lambda: lam,
            obs: vec![0.0; n * OBS_DIM],
            actions: vec![0.0; n * ACT_DIM],
            log_probs: vec![0.0; n],
            rewards,
            values,
            truncated: vec![false; n],
            terminated,
            next_values,
            finished: Vec::new(),
            mean_tracking: 0.0,
        }
    }

    /// Successor values from a `(T+1)`-long value stream, zeroed at dones.
    fn successors(values: &[f64], dones: &[bool]) -> Vec<f64> {
        (0..dones.len())
            .map(|t| if dones[t] { 0.0 } else { values[t + 1] })
            .collect()
    }

    /// Explicit double sum `A_t = Σ_l (γλ)^l δ_{t+l}` stopping after the
    /// first done at or after `t`.
    fn gae_double_sum(b: &RolloutBatch) -> Vec<f64> {
        let mut out = vec![0.0; b.len()];
        for e in 0..b.num_envs {
            for t in 0..b.num_steps {
                let mut acc = 0.0;
                for l in 0..(b.num_steps - t) {
                    let i = b.index(t + l, e);
                    let delta = b.rewards[i] + b.gamma * b.next_values[i] - b.values[i];
                    acc += (b.gamma * b.gae_lambda).powi(l as i32) * delta;
                    if b.done(i) {
                        break;
                    }
                }
                out[b.index(t, e)] = acc;
            }
        }
        out
    }

    #[test]
    fn td_residual_when_lambda_zero() {
        let v = [0.5, 1.0, -0.25, 2.0];
        let dones = [false, false, false];
        let b = scalar_batch(
            3,
            1,
            0.9,
            0.0,
            vec![1.0, 2.0, 3.0],
            v[..3].to_vec(),
            successors(&v, &dones),
            dones.to_vec(),
        );
        let a = gae_advantages(&b);
        for t in 0..3 {
            assert_eq!(a[t], b.rewards[t] + 0.9 * v[t + 1] - v[t]);
        }
    }

    #[test]
    fn monte_carlo_limit() {
        let r = vec![1.0, -2.0, 0.5, 4.0];
        let b = scalar_batch(4, 1, 1.0, 1.0, r.clone(), vec![0.0; 4], vec![0.0; 4], vec![false; 4]);
        let a = gae_advantages(&b);
        assert_eq!(a, vec![3.5, 2.5, 4.5, 4.0]);
    }

    #[test]
    fn random_three_step_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = 3;
            let v: Vec<f64> = (0..=n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let b = scalar_batch(
                n,
                1,
                0.97,
                0.9,
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                v[..n].to_vec(),
                successors(&v, &dones),
                dones,
            );
            for (x, y) in gae_advantages(&b).iter().zip(gae_double_sum(&b)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_bootstrap() {
        let b = scalar_batch(1, 2, 0.99, 0.95, vec![1.0, 2.0], vec![0.0; 2], vec![3.0, -1.0], vec![false; 2]);
        let segs = bootstrapped_returns(&b);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].bootstrapped_return, 1.0 + 0.99 * 3.0);
        assert_eq!(segs[1].bootstrapped_return, 2.0 + 0.99 * -1.0);
    }

    #[test]
    fn undiscounted_sum_without_critic() {
        let b = scalar_batch(4, 1, 1.0, 0.95, vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4], vec![0.0; 4], vec![false; 4]);
        assert_eq!(bootstrapped_returns(&b)[0].bootstrapped_return, 10.0);
    }

    #[test]
    fn scripted_three_step_return() {
        let (r, v_t, g) = ([0.5, -1.0, 2.0], 4.0, 0.99f64);
        let b = scalar_batch(3, 1, g, 0.95, r.to_vec(), vec![0.0; 3], vec![9.0, 9.0, v_t], vec![false; 3]);
        let expected = r[0] + g * r[1] + g * g * r[2] + g.powi(3) * v_t;
        assert!((bootstrapped_returns(&b)[0].bootstrapped_return - expected).abs() < 1e-12);
    }

    #[test]
    fn termination_splits_segments_without_leakage() {
        // Env 0 fails at t = 1; rewards after it must not reach segment 0.
        let b = scalar_batch(
            4,
            1,
            0.9,
            0.95,
            vec![1.0, 1.0, 100.0, 100.0],
            vec![0.0, 0.0, 50.0, 50.0],
            vec![0.0, 0.0, 50.0, 7.0],
            vec![false, true, false, false],
        );
        let segs = bootstrapped_returns(&b);
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].start, segs[0].end), (0, 2));
        assert_eq!(segs[0].bootstrapped_return, 1.0 + 0.9 * 1.0);
        assert_eq!((segs[1].start, segs[1].end), (2, 4));
        let a = gae_advantages(&b);
        assert_eq!(a[1], 1.0);
        assert!((a[0] - (1.0 + 0.9 * 0.95 * 1.0)).abs() < 1e-12);
        assert_eq!(segment_index_per_step(&b, &segs), vec![0, 0, 1, 1]);
    }

    #[test]
    fn normalization_moments() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0, 10.0]);
        let mean = a.iter().sum::<f64>() / 4.0;
        let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    fn small_setup(seed: u64, log_std: f64) -> (GaussianPolicy, Mlp, VecEnv, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = GaussianPolicy::new(MlpLayout::with_hidden(OBS_DIM, &[8], ACT_DIM), log_std, 0.1, &mut rng);
        let critic = Mlp::new(MlpLayout::with_hidden(OBS_DIM, &[8], 1), &mut rng, 1.0);
        let cfg = EnvConfig {
            num_envs: 3,
            ..Default::default()
        };
        let mut env = VecEnv::new(cfg, RewardWeights::default(), PerturbationSpec::None, 1.0, seed).unwrap();
        let obs = env.reset(seed);
        (policy, critic, env, obs)
    }

    #[test]
    fn collect_single_step_shapes() {
        let (p, c, mut env, mut obs) = small_setup(1, -0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = collect(&p, &c, &mut env, &mut obs, 1, 0.99, 0.95, &mut rng).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.obs.len(), 3 * OBS_DIM);
        assert_eq!(bootstrapped_returns(&b).len(), 3);
        assert!(collect(&p, &c, &mut env, &mut obs, 0, 0.99, 0.95, &mut rng).is_err());
    }

    #[test]
    fn collect_is_deterministic() {
        let run = || {
            let (p, c, mut env, mut obs) = small_setup(4, -5.0);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            collect(&p, &c, &mut env, &mut obs, 130, 0.99, 0.95, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        // 130 steps cross the 100-step time limit on every env.
        assert!(a.truncated.iter().filter(|&&d| d).count() >= 3);
        let segs = bootstrapped_returns(&a);
        assert!(segs.len() >= 6);
        assert!(segs.iter().all(|s| s.bootstrapped_return.is_finite()));
    }
}
