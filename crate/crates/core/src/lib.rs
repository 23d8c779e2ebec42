//! Lidar-camera fusion mechanics at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: coordinate frames, pinhole projection, feature-map sampling.
//! - [`augment`]: the lidar augmentation pipeline with recorded parameters and
//!   its exact inverse, used to map augmented key points back to the sensor
//!   frame before projecting them into the camera.
//! - [`voxel`]: dynamic pillar voxelization and the point-wise MLP pillar encoder.
//! - [`align`]: single-head cross-attention between a pillar feature and the
//!   camera features it projects onto, with a hand-written backward pass.
//! - [`fusion`]: input, late and deep fusion pipelines plus input corruptions.
//! - [`harness`]: synthetic scenes with exact correspondences and the
//!   reprojection-error study.
//! - [`io`]: file formats shared by the command-line tool.

pub mod align;
pub mod augment;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod voxel;

pub use error::{Error, Result};
