//! Camera-based semantic scene completion with a dense-sparse-dense network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`], [`params`]: a small reverse-mode
//!   differentiation core over dense arrays.
//! - [`camera`], [`voxel`], [`vgrid`]: projection geometry, grids and the
//!   binary grid format.
//! - [`sparse`], [`proposal`], [`guidance`], [`diffusion`]: the network blocks.
//! - [`losses`], [`metrics`]: training objectives and evaluation.
//! - [`synth`], [`dataset`]: synthetic scenes and their on-disk layout.
//! - [`model`], [`train`], [`checkpoint`], [`gradcheck`]: assembly, training
//!   and verification.

pub mod autodiff;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod proposal;
pub mod rng;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vgrid;
pub mod voxel;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
