//! Actor and critic networks with hand-written reverse-mode gradients.

mod adam;
mod gaussian;
mod mlp;

pub use adam::{clip_grad_norm, Adam};
pub use gaussian::{
    gaussian_log_prob, GaussianAction, GaussianPolicy, LogProbBatch, LOG_STD_MAX, LOG_STD_MIN,
};
pub use mlp::{critic_forward, Mlp, MlpLayout, Trace};
