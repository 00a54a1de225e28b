use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("return sample is empty")]
    EmptySample,
    #[error("return sample has non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("risk level alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("invalid Lagrangian state: {what} = {value}")]
    InvalidState { what: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("backward called without a recorded forward pass")]
    NoForwardPass,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("action batch has {actual} values, expected {expected}")]
    ActionShape { expected: usize, actual: usize },
    #[error("invalid environment configuration: {0}")]
    Config(String),
    #[error("unknown perturbation {name:?}; valid names: {valid}")]
    UnknownPerturbation { name: String, valid: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BanditError {
    #[error("arm {0} has not been pulled yet")]
    UnpulledArm(usize),
    #[error("warm start incomplete: arm {0} has no pulls")]
    WarmStartIncomplete(usize),
    #[error("invalid bandit configuration: {0}")]
    Config(String),
    #[error("arm {arm} failed to load: {reason}")]
    ArmLoad { arm: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation requested zero episodes")]
    NoEpisodes,
}
