use serde::{Deserialize, Serialize};

use crate::error::EnvError;

/// Weights of the per-step reward terms.
///
/// The two tracking terms use `exp(−err²/σ)`; the penalty terms take the
/// place of the joint-space smoothness terms of a legged robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub track_lin_vel_xy: f64,
    pub track_ang_vel_yaw: f64,
    /// Multiplies `‖a_t − a_{t−1}‖²`.
    pub action_rate: f64,
    /// Multiplies `‖a_t‖²`.
    pub action_magnitude: f64,
    /// Tracking kernel width σ.
    pub sigma: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            track_lin_vel_xy: 1.5,
            track_ang_vel_yaw: 0.75,
            action_rate: -0.05,
            action_magnitude: -0.01,
            sigma: 0.25,
        }
    }
}

/// Per-term contributions (already weighted) of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardTerms {
    pub track_lin: f64,
    pub track_yaw: f64,
    pub action_rate: f64,
    pub action_magnitude: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.track_lin + self.track_yaw + self.action_rate + self.action_magnitude
    }

    pub fn tracking(&self) -> f64 {
        self.track_lin + self.track_yaw
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.track_lin_vel_xy > 0.0 && self.track_ang_vel_yaw > 0.0) {
            return Err(EnvError::Config("tracking weights must be positive".into()));
        }
        if self.action_rate > 0.0 || self.action_magnitude > 0.0 {
            return Err(EnvError::Config("penalty weights must be <= 0".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(EnvError::Config("reward sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn terms(
        &self,
        velocity: [f64; 2],
        yaw_rate: f64,
        command: [f64; 3],
        action: &[f64],
        prev_action: &[f64],
    ) -> RewardTerms {
        let ex = command[0] - velocity[0];
        let ey = command[1] - velocity[1];
        let ew = command[2] - yaw_rate;
        let rate: f64 = action
            .iter()
            .zip(prev_action)
            .map(|(a, p)| (a - p) * (a - p))
            .sum();
        let mag: f64 = action.iter().map(|a| a * a).sum();
        RewardTerms {
            track_lin: self.track_lin_vel_xy * (-(ex * ex + ey * ey) / self.sigma).exp(),
            track_yaw: self.track_ang_vel_yaw * (-(ew * ew) / self.sigma).exp(),
            action_rate: self.action_rate * rate,
            action_magnitude: self.action_magnitude * mag,
        }
    }

    /// Closed interval containing every per-step reward when actions lie in
    /// the box `[-action_limit, action_limit]^act_dim`.
    pub fn bounds(&self, action_limit: f64, act_dim: usize) -> (f64, f64) {
        let d = act_dim as f64;
        let max_rate = d * (2.0 * action_limit).powi(2);
        let max_mag = d * action_limit * action_limit;
        let lo = self.action_rate * max_rate + self.action_magnitude * max_mag;
        let hi = self.track_lin_vel_xy + self.track_ang_vel_yaw;
        (lo, hi)
    }

    pub fn max_tracking(&self) -> f64 {
        self.track_lin_vel_xy + self.track_ang_vel_yaw
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking_attains_weights() {
        let w = RewardWeights::default();
        let t = w.terms([0.4, -0.2], 0.3, [0.4, -0.2, 0.3], &[0.0; 3], &[0.0; 3]);
        assert_eq!(t.track_lin, 1.5);
        assert_eq!(t.track_yaw, 0.75);
        assert_eq!(t.total(), 2.25);
    }

    #[test]
    fn tracking_terms_positive_and_below_weight_off_target() {
        let w = RewardWeights::default();
        for err in [0.01, 0.5, 3.0, 10.0] {
            let t = w.terms([err, 0.0], err, [0.0; 3], &[0.0; 3], &[0.0; 3]);
            assert!(t.track_lin > 0.0 && t.track_lin < 1.5);
            assert!(t.track_yaw > 0.0 && t.track_yaw < 0.75);
        }
    }

    #[test]
    fn bounds_contain_extremes() {
        let w = RewardWeights::default();
        let (lo, hi) = w.bounds(1.0, 3);
        let worst = w.terms([50.0, 0.0], 50.0, [0.0; 3], &[1.0, 1.0, 1.0], &[-1.0, -1.0, -1.0]);
        assert!(worst.total() >= lo);
        assert!((worst.total() - lo).abs() < 1e-9);
        assert_eq!(hi, 2.25);
    }

    #[test]
    fn validation() {
        let mut w = RewardWeights::default();
        assert!(w.validate().is_ok());
        w.action_rate = 0.1;
        assert!(w.validate().is_err());
        let w = RewardWeights {
            track_lin_vel_xy: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
