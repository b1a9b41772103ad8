//! Blind intensity harmonization of MR slices.
//!
//! A normalizing flow is trained on target-domain images only; images from
//! unseen source domains are then harmonized by alternating latent
//! shrinkage with image-domain steps that keep the result correlated with,
//! and edge-consistent to, the source.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod flow;
pub mod harmonize;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
pub use numeric::ImageGrid;
