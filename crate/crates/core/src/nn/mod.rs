//! Dense neural-network kernel: MLPs with exact reverse-mode gradients, the
//! squashed Gaussian actor, the dual-path critic, Adam, compute accounting
//! and checkpoints.

mod adam;
pub mod checkpoint;
pub mod cost;
mod critic;
mod linalg;
mod mlp;
mod policy;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Precision};
pub use cost::{estimated_time_us, inference_flops, param_count, DSP_THROUGHPUT_MFLOPS};
pub use critic::{CriticCache, CriticGrads, CriticNet, CriticSpec};
pub use mlp::{Activation, Mlp, MlpCache, MlpGrads, MlpSpec};
pub use policy::{sigmoid, softplus, squashed_gaussian_log_prob, GaussianPolicyNet, PolicySample, STD_FLOOR};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("checkpoint shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deployed policy: a plain MLP whose output is squashed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedPolicy {
    net: Mlp,
}

impl DeployedPolicy {
    pub fn new(net: Mlp) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn into_net(self) -> Mlp {
        self.net
    }

    pub fn act(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.net.predict(obs)?.into_iter().map(f64::tanh).collect())
    }
}
