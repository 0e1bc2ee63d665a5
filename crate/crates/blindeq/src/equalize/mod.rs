//! Adaptive and reference equalizers.

mod adam;
mod butterfly;
mod cma;
mod cpe;
mod loss;
mod mmse;
mod vae;

pub use adam::{adam_update, lr_schedule, AdamState};
pub use butterfly::{complex_conv, ButterflyFilter, CVar, TapeFilter};
pub use cma::{cma_batch_step, cma_run, cma_step, CmaSettings, SINGULARITY_THRESHOLD};
pub use cpe::{viterbi_viterbi_cpe, viterbi_viterbi_phase, CPE_WINDOW};
pub use loss::{vae_loss, LossLayout, LossTerms, C_FLOOR};
pub use mmse::{mmse_baseline, MmseSolution, RIDGE};
pub use vae::{vae_le, Encoded, Encoder, LinearEncoder, NnEncoder, StepReport, VaeSettings, VaeTrainer};

use crate::sigproc::ComplexSignal;

/// Equalized stream plus training diagnostics.
#[derive(Debug, Clone, Default)]
pub struct EqualizerOutput {
    /// One symbol-rate signal per polarization.
    pub symbols: Vec<ComplexSignal>,
    /// `(batch start symbol, σ̂²)` after every update (VAE only).
    pub sigma2: Vec<(usize, f64)>,
    /// Learned channel model (VAE only).
    pub channel: Option<ButterflyFilter>,
    pub updates: usize,
    pub diverged: Option<String>,
    /// CMA converged to a collapsed solution.
    pub singular: bool,
    /// The distortion term hit its floor at least once.
    pub clamped: bool,
}
