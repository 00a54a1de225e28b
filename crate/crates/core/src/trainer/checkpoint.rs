use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Trainer;
use crate::error::TrainError;
use crate::policynet::GaussianPolicy;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Full trainer state; resuming from it continues bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub trainer: Trainer,
}

impl Checkpoint {
    pub fn policy(&self) -> &GaussianPolicy {
        &self.trainer.policy
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        serde_json::to_string(self).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header =
            serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            trainer: self.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        ck.trainer
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::envsim::{EnvConfig, RewardWeights};
    use crate::riskcore::RiskLevel;

    fn trainer() -> Trainer {
        let mut cfg = TrainConfig::with_alpha(RiskLevel::new(0.25).unwrap());
        cfg.hidden = vec![6];
        cfg.rollout_len = 5;
        cfg.iterations = 6;
        cfg.epochs = 2;
        cfg.minibatches = 2;
        let env = EnvConfig {
            num_envs: 6,
            episode_len: 8,
            ..Default::default()
        };
        Trainer::new(cfg, env, RewardWeights::default()).unwrap()
    }

    #[test]
    fn resume_is_bit_identical() {
        let mut straight = trainer();
        let all = straight.run(|_, _| Ok(())).unwrap();

        let mut first = trainer();
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.push(first.iterate().unwrap());
        }
        let json = first.checkpoint().to_json().unwrap();
        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_json(&json).unwrap());
        assert_eq!(resumed, first);
        rows.extend(resumed.run(|_, _| Ok(())).unwrap());
        assert_eq!(rows, all);
        assert_eq!(resumed, straight);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut ck = trainer().checkpoint();
        ck.version = 99;
        let json = serde_json::to_string(&ck).unwrap();
        let err = Checkpoint::from_json(&json).unwrap_err();
        assert!(err.to_string().contains("version 99"));
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
