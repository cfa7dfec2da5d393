//! The chapters of the guide under `book/src`, included as doc comments so
//! that `cargo test` runs every listing. mdbook cannot resolve crate
//! dependencies when testing, and this way each chapter compiles against the
//! workspace as it is.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/snapshots.md")]
pub mod snapshots {}
#[doc = include_str!("../../../book/src/moving-grids.md")]
pub mod moving_grids {}
#[doc = include_str!("../../../book/src/maps.md")]
pub mod maps {}
#[doc = include_str!("../../../book/src/registration.md")]
pub mod registration {}
#[doc = include_str!("../../../book/src/forecasting.md")]
pub mod forecasting {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
