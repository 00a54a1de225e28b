//! Fast internal consistency checks: estimator oracles, gradient checks
//! and the GAE double sum.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bandit::ArmStats;
use crate::config::{HingeClip, HingeRatio};
use crate::policynet::{GaussianPolicy, Mlp, MlpLayout};
use crate::riskcore::{
    cvar_estimate, grad_eta, grad_lambda, var_estimate, LagrangianState, ReturnSample, RiskLevel,
};
use crate::rollout::{gae_advantages, RolloutBatch};
use crate::trainer::{critic_loss, ppo_lagrangian_loss, ppo_lagrangian_loss_value, LossParams, Minibatch, Trajectory};

pub type GradFn = fn(&ReturnSample, &LagrangianState, RiskLevel) -> f64;

/// Functions under test; replaced by fixtures to confirm the checks bite.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub grad_eta: GradFn,
    pub grad_lambda: GradFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Self { grad_eta, grad_lambda }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, failures: Vec<String>, cases: usize) -> CheckResult {
    CheckResult {
        name,
        passed: failures.is_empty(),
        detail: match failures.first() {
            None => format!("{cases} cases"),
            Some(f) => format!("{} of {cases} failed; first: {f}", failures.len()),
        },
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

const ALPHAS: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0];

/// Samples whose size makes `α·N` integral.
fn random_sample(rng: &mut ChaCha8Rng) -> (Vec<f64>, RiskLevel) {
    let alpha = ALPHAS[rng.gen_range(0..ALPHAS.len())];
    let unit = (1..=20usize)
        .find(|&u| {
            let x = alpha * u as f64;
            (x - x.round()).abs() < 1e-9
        })
        .unwrap();
    let k = rng.gen_range(1..=(64 / unit).max(1));
    let n = (k * unit).min(64);
    let xs = (0..n)
        .map(|_| {
            // Mix in repeated values to exercise ties.
            if rng.gen_bool(0.2) {
                rng.gen_range(-3..3) as f64
            } else {
                rng.gen_range(-10.0..10.0)
            }
        })
        .collect();
    (xs, RiskLevel::new(alpha).unwrap())
}

/// `max_η η − E[(η − R)⁺]/α`, searched over the sample points.
fn dual_by_search(xs: &[f64], alpha: f64) -> f64 {
    let n = xs.len() as f64;
    xs.iter()
        .map(|&eta| eta - xs.iter().map(|&x| (eta - x).max(0.0)).sum::<f64>() / (n * alpha))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn check_cvar_dual(seed: u64, cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for c in 0..cases {
        let (xs, alpha) = random_sample(&mut rng);
        let s = ReturnSample::from_slice(&xs).unwrap();
        let cvar = cvar_estimate(&s, alpha);
        let var = var_estimate(&s, alpha);
        let dual = dual_by_search(&xs, alpha.value());
        if (cvar - dual).abs() > 1e-9 * dual.abs().max(1.0) || !(cvar <= var && var <= s.max()) {
            failures.push(format!("case {c}: cvar {cvar}, dual {dual}, var {var}"));
        }
    }
    result("cvar-dual", failures, cases)
}

/// `L(η, λ) = λ·(β − η + E[(η − D)⁺]/α)`, the part of the Lagrangian that
/// depends on η and λ.
fn lagrangian(xs: &[f64], eta: f64, lambda: f64, beta: f64, alpha: f64) -> f64 {
    let n = xs.len() as f64;
    lambda * (beta - eta + xs.iter().map(|&x| (eta - x).max(0.0)).sum::<f64>() / (n * alpha))
}

pub fn check_multiplier_gradients(hooks: Hooks, seed: u64, cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let h = 1e-6;
    for c in 0..cases {
        let (xs, alpha) = random_sample(&mut rng);
        let s = ReturnSample::from_slice(&xs).unwrap();
        // η off every sample point so the hinge is differentiable.
        let mut eta = rng.gen_range(-8.0..8.0);
        while xs.iter().any(|&x| (x - eta).abs() < 1e-3) {
            eta += 0.01;
        }
        let state = LagrangianState {
            eta,
            lambda: rng.gen_range(0.1..5.0),
            beta: rng.gen_range(-5.0..5.0),
            lambda_max: 10.0,
            lr_eta: 0.1,
            lr_lambda: 0.1,
        };
        let a = alpha.value();
        let l = |eta: f64, lambda: f64| lagrangian(&xs, eta, lambda, state.beta, a);
        let fd_lambda = (l(eta, state.lambda + h) - l(eta, state.lambda - h)) / (2.0 * h);
        let fd_eta = (l(eta + h, state.lambda) - l(eta - h, state.lambda)) / (2.0 * h);
        let gl = (hooks.grad_lambda)(&s, &state, alpha);
        let ge = (hooks.grad_eta)(&s, &state, alpha);
        if rel_err(gl, fd_lambda) > 1e-6 && (gl - fd_lambda).abs() > 1e-7 {
            failures.push(format!("case {c}: grad_lambda {gl} vs {fd_lambda}"));
        } else if rel_err(ge, fd_eta) > 1e-6 && (ge - fd_eta).abs() > 1e-7 {
            failures.push(format!("case {c}: grad_eta {ge} vs {fd_eta}"));
        }
    }
    result("multiplier-gradients", failures, cases)
}

pub fn check_network_gradients(seed: u64, cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    let h = 1e-6;
    let fd = |f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize| {
        let mut p = x.to_vec();
        p[i] += h;
        let up = f(&p);
        p[i] -= 2.0 * h;
        (up - f(&p)) / (2.0 * h)
    };
    for c in 0..cases {
        let layout = MlpLayout::with_hidden(3, &[8], 2);
        let policy = GaussianPolicy::new(layout.clone(), -0.3, 1.0, &mut rng);
        let critic = Mlp::new(MlpLayout::with_hidden(3, &[8], 1), &mut rng, 1.0);
        let n = 16;
        let obs: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let actions: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lp = policy.log_prob_batch(&obs, &actions).unwrap().log_probs;
        let mb = Minibatch {
            old_log_probs: lp.iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect(),
            advantages: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            value_targets: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            trajectories: (0..4)
                .map(|k| Trajectory {
                    steps: (4 * k..4 * k + 4).collect(),
                    bootstrapped_return: rng.gen_range(-1.0..1.0),
                })
                .collect(),
            obs,
            actions,
        };
        let state = LagrangianState {
            eta: 0.3,
            lambda: 1.5,
            beta: 0.0,
            lambda_max: 10.0,
            lr_eta: 0.1,
            lr_lambda: 0.1,
        };
        let params = LossParams {
            alpha: RiskLevel::new(0.25).unwrap(),
            epsilon: 0.2,
            delta_clip: 0.2,
            hinge_ratio: HingeRatio::FirstStep,
            hinge_clip: HingeClip::Cap,
            hinge_baseline: false,
            hinge_scale: 1.0,
        };
        let (_, g) = ppo_lagrangian_loss(&policy, &mb, &state, &params).unwrap();
        let actor_f = |p: &[f64]| {
            let q = GaussianPolicy::from_params(layout.clone(), p.to_vec()).unwrap();
            ppo_lagrangian_loss_value(&q, &mb, &state, &params).unwrap()
        };
        for i in 0..g.len() {
            let f = fd(&actor_f, policy.params(), i);
            if rel_err(g[i], f) > 1e-4 && (g[i] - f).abs() > 1e-8 {
                failures.push(format!("case {c}: actor param {i}: {} vs {f}", g[i]));
                break;
            }
        }
        let (_, vg) = critic_loss(&critic, &mb.obs, &mb.value_targets, 0.5).unwrap();
        let critic_f = |p: &[f64]| {
            let m = Mlp {
                layout: critic.layout.clone(),
                params: p.to_vec(),
            };
            critic_loss(&m, &mb.obs, &mb.value_targets, 0.5).unwrap().0
        };
        for i in 0..vg.len() {
            let f = fd(&critic_f, &critic.params, i);
            if rel_err(vg[i], f) > 1e-4 && (vg[i] - f).abs() > 1e-8 {
                failures.push(format!("case {c}: critic param {i}: {} vs {f}", vg[i]));
                break;
            }
        }
    }
    result("network-gradients", failures, cases)
}

/// A batch with one scalar per step and random episode ends.
pub fn random_scalar_batch(rng: &mut ChaCha8Rng, num_steps: usize, num_envs: usize) -> RolloutBatch {
    let n = num_steps * num_envs;
    let terminated: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
    let truncated: Vec<bool> = terminated.iter().map(|&t| !t && rng.gen_bool(0.1)).collect();
    let next_values = terminated
        .iter()
        .map(|&t| if t { 0.0 } else { rng.gen_range(-2.0..2.0) })
        .collect();
    RolloutBatch {
        num_steps,
        num_envs,
        gamma: rng.gen_range(0.5..1.0),
        gae_lambda: rng.gen_range(0.0..1.0),
        obs: vec![0.0; n],
        actions: vec![0.0; n],
        log_probs: vec![0.0; n],
        rewards: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        values: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        terminated,
        truncated,
        next_values,
        finished: Vec::new(),
        mean_tracking: 0.0,
    }
}

/// `A_t = Σ_l (γλ)^l·Π_{j<l}(1 − done_{t+j})·δ_{t+l}`, summed directly.
pub fn gae_double_sum(b: &RolloutBatch) -> Vec<f64> {
    let mut out = vec![0.0; b.len()];
    for e in 0..b.num_envs {
        for t in 0..b.num_steps {
            let mut total = 0.0;
            for l in 0..b.num_steps - t {
                let mut alive = 1.0;
                for j in 0..l {
                    if b.done(b.index(t + j, e)) {
                        alive = 0.0;
                    }
                }
                let i = b.index(t + l, e);
                let delta = b.rewards[i] + b.gamma * b.next_values[i] - b.values[i];
                total += (b.gamma * b.gae_lambda).powi(l as i32) * alive * delta;
            }
            out[b.index(t, e)] = total;
        }
    }
    out
}

pub fn check_gae(seed: u64, cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for c in 0..cases {
        let t = rng.gen_range(1..=8);
        let e = rng.gen_range(1..=3);
        let b = random_scalar_batch(&mut rng, t, e);
        let fast = gae_advantages(&b);
        let slow = gae_double_sum(&b);
        if let Some((i, (x, y))) = fast.iter().zip(&slow).enumerate().find(|(_, (x, y))| (*x - *y).abs() > 1e-12) {
            failures.push(format!("case {c} step {i}: {x} vs {y}"));
        }
    }
    result("gae-double-sum", failures, cases)
}

pub fn check_arm_stats(seed: u64, cases: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for c in 0..cases {
        let n = rng.gen_range(1..50);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let s = ArmStats::from_returns(&xs);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n < 2 {
            0.0
        } else {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        if (s.mean() - mean).abs() > 1e-9 || (s.variance() - var).abs() > 1e-9 * var.max(1.0) {
            failures.push(format!("case {c}: ({}, {}) vs ({mean}, {var})", s.mean(), s.variance()));
        }
    }
    result("arm-statistics", failures, cases)
}

pub fn run_selftest(hooks: Hooks, seed: u64) -> Vec<CheckResult> {
    vec![
        check_cvar_dual(seed, 500),
        check_multiplier_gradients(hooks, seed, 200),
        check_network_gradients(seed, 20),
        check_gae(seed, 500),
        check_arm_stats(seed, 200),
    ]
}
