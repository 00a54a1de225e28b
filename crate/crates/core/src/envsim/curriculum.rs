use serde::{Deserialize, Serialize};

use crate::error::EnvError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// Command-magnitude bound at the start of training (m/s).
    pub initial: f64,
    pub max: f64,
    pub increment: f64,
    /// Normalized tracking reward (in `[0, 1]`) that must be exceeded to
    /// raise the bound.
    pub threshold: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            initial: 1.0,
            max: 3.0,
            increment: 0.25,
            threshold: 0.7,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.initial >= 0.0 && self.max >= self.initial && self.increment >= 0.0) {
            return Err(EnvError::Config(
                "curriculum needs 0 <= initial <= max and increment >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curriculum {
    pub bound: f64,
    pub config: CurriculumConfig,
}

impl Curriculum {
    pub fn new(config: CurriculumConfig) -> Self {
        Self {
            bound: config.initial,
            config,
        }
    }

    pub fn fixed(bound: f64) -> Self {
        Self {
            bound,
            config: CurriculumConfig {
                initial: bound,
                max: bound,
                increment: 0.0,
                threshold: f64::INFINITY,
            },
        }
    }

    /// Raises the bound by one increment when `mean_tracking` exceeds the
    /// threshold, saturating at the configured maximum.
    pub fn advance(&self, mean_tracking: f64) -> Self {
        let mut next = self.clone();
        if mean_tracking > self.config.threshold {
            next.bound = (self.bound + self.config.increment).min(self.config.max);
        }
        next
    }
}
