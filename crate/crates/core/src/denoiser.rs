//! The noise-prediction interface shared by the analytic and learned models.

use crate::diffusion::{LatentState, NoiseSchedule};
use crate::error::Result;
use crate::tensor::Grid;
use crate::transfer::TransferPayload;

/// A condition id, or the null condition `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Class(usize),
}

/// What to do with the model's transferable internals during a prediction.
#[derive(Debug, Clone, Copy)]
pub enum Control<'a> {
    /// Only the noise prediction is needed.
    Plain,
    /// Return the model's own transferable internals alongside the prediction.
    Record,
    /// Replace the model's internals with the given payload.
    Inject(&'a TransferPayload),
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: Grid,
    /// Present in [`Control::Record`] mode.
    pub recorded: Option<TransferPayload>,
}

/// `ε_θ(z_t, t, c)` with optional capture or injection of transferred information.
pub trait Denoiser: Sync {
    fn latent_shape(&self) -> (usize, usize);

    /// Number of non-null condition ids.
    fn num_conditions(&self) -> usize;

    fn predict(
        &self,
        z: &LatentState,
        sched: &NoiseSchedule,
        cond: Condition,
        control: Control<'_>,
    ) -> Result<Prediction>;
}
