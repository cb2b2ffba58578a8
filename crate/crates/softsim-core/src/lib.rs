//! Differentiable XPBD soft-body simulation with a real-to-sim residual
//! mapping and online per-particle stiffness identification.
//!
//! The crate is split along the pipeline:
//!
//! - [`geometry`]: thin-shell and volumetric particle meshes
//! - [`constraints`]: distance / volume / shape-matching constraints and
//!   the per-particle stiffness field
//! - [`solver`]: the forward XPBD step
//! - [`autodiff`]: scalar reverse-mode tape plus a finite-difference oracle
//! - [`mapping`]: Chamfer-based non-rigid residual registration
//! - [`online`]: gap / history / smoothness losses and the Adam update
//! - [`twin`]: synthetic hidden-parameter ground truth and observations
//! - [`metrics`]: future-gap and future-keypoint prediction metrics
//! - [`harness`]: the per-frame experiment loop
//!
//! Everything is `no_std`-compatible (with `alloc`); IO, file formats and
//! the CLI live in the companion `softsim-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod constraints;
pub mod geometry;
pub mod harness;
pub mod mapping;
pub mod math;
pub mod metrics;
pub mod online;
pub mod solver;
pub mod twin;

pub use geometry::{DeformableMesh, MeshKind, PointCloud};
pub use math::{Vec3, V3};
