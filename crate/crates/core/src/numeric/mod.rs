//! Deterministic low-level kernels shared by every other module.

pub mod fd;
mod fourier;
mod gradient;
mod grid;
mod ncc;

pub use fourier::{dft2, idft2, Spectrum};
pub use gradient::{
    edge_mask, masked_tv, masked_tv_subgradient, spatial_gradient, EdgeMask, GradientField,
};
pub use grid::{mean_image, minmax_normalize, ImageGrid};
pub use ncc::{ncc, ncc_gradient};
