//! Mask-and-replace discrete diffusion over token sequences.
//!
//! Each forward step keeps a token with probability `α_t`, resamples it
//! uniformly (`β_t` per token) or replaces it by the absorbing MASK symbol
//! (`γ_t`). The denoiser predicts `x̃_0`, and the reverse step marginalizes the
//! exact posterior `q(x_{t−1} | x_t, x_0)` against that prediction.

mod denoiser;
mod posterior;
mod sampler;
mod schedule;

use serde::{Deserialize, Serialize};

pub use denoiser::{loss_graph, Denoiser, DenoiserConfig, LossNodes};
pub use posterior::{mean_kl, one_hot, prior_kl, q_posterior, q_sample, q_step, LOG_FLOOR};
pub use sampler::{
    diffusion_loss, loss_terms, p_sample, reverse_distribution, sample, DiffusionLoss,
    OracleDenoiser, UniformDenoiser, X0Predictor,
};
pub use schedule::{build_schedule, DiffusionSchedule, ScheduleKind};

use crate::error::{Error, Result};

/// Chain and loss settings shared by training and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Weight of the auxiliary `−log p̃(x_0)` term.
    pub lambda: f64,
    pub denoiser: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 100,
            schedule: ScheduleKind::default(),
            lambda: 1e-3,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        self.denoiser.validate()?;
        match self.schedule {
            // custom arrays depend on K and are checked when the schedule is built
            ScheduleKind::Custom { .. } => Ok(()),
            ScheduleKind::Linear { .. } => build_schedule(self.steps, 2, &self.schedule).map(|_| ()),
        }
    }

    pub fn build(&self, vocab: usize) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, vocab, &self.schedule)
    }
}
