//! Multiscale affine-coupling normalizing flow with exact log-determinants.
//!
//! Each level squeezes the spatial grid by 2 into 4x the channels, applies
//! `steps_per_level` steps of actnorm, LU-parameterized 1x1 channel mixing
//! and affine coupling, and (except at the last level) factors half of the
//! channels out into the latent vector.

mod arch;
mod conv;
mod grad;
mod layers;
mod model;

pub use arch::FlowArchitecture;
pub use grad::{batch_nll_and_gradient, nll_and_gradient, parameter_gradient};
pub use model::{gaussian_log_density, FlowModel, FlowOutput, LatentState};
