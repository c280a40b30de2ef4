//! Command-line driver for sliceocc: configuration files, the voxel grid
//! format, checkpoints, scene files, and the commands behind the binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod grid_io;
pub mod scene_io;
