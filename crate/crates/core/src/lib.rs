//! Registration-based dimensionality reduction for convection-dominated data.
//!
//! Snapshot data that travels through the domain (shocks, pulses, rotating
//! images) has a slowly decaying singular spectrum on a fixed grid. This crate
//! learns a low-rank, step-varying grid on which the same data becomes
//! low-rank, and provides the interpolation maps between the fixed grid and the
//! learned one.
//!
//! Module map:
//!
//! * [`lowrank`]: snapshot matrices, truncated SVD and Frobenius metrics.
//! * [`grid`]: reference grids, the low-rank moving grid and cell volumes.
//! * [`mapping`]: the forward/inverse interpolation maps and difference operators.
//! * [`registration`]: the penalized objective and the training loop.
//! * [`datagen`]: generators for the rotated glyph, Burgers, wave and
//!   advecting-Gaussian datasets.
//! * [`forecast`]: grid extension, autoregressive latent models and decoding.
//! * [`io`]: the binary matrix format and CSV export.

pub mod datagen;
mod stencil;
pub mod error;
pub mod forecast;
pub mod grid;
pub mod io;
pub mod lowrank;
pub mod mapping;
pub mod registration;

pub use error::{Error, Result};
pub use grid::{GridLayout, MovingGrid, ReferenceGrid, VolumeReport};
pub use lowrank::{LowRankFactors, SnapshotMatrix};
pub use mapping::{DifferenceOperator, InterpConfig};
pub use registration::{RegistrationProblem, RegistrationResult};
