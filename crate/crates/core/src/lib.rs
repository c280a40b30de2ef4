//! Vertical-slice scene representation for camera-based 3D semantic
//! occupancy prediction.
//!
//! A scene is cut into `S` horizontal slabs. Each slab is described by a
//! pair of planar token grids, one on its floor face and one on its ceiling
//! face. The decoder refines those planes with deformable cross-attention,
//! first between the two planes of a slab and then against multi-view image
//! features through projected pillar reference points. Voxel features are
//! recovered by interpolating between the planes of each slab and decoded
//! into per-voxel class probabilities by a small 3D convolutional head.

pub mod attention;
pub mod checks;
pub mod error;
pub mod geometry;
pub mod head;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
