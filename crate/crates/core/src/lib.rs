//! CVaR-constrained PPO-Lagrangian training and empirical-Bernstein policy
//! selection on a perturbable planar point-mass.

pub mod bandit;
pub mod config;
pub mod envsim;
pub mod error;
pub mod policynet;
pub mod riskcore;
pub mod rollout;
pub mod selftest;
pub mod trainer;
