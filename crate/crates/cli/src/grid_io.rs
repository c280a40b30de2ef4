//! Binary voxel-grid format with a JSON sidecar.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `SOCC`                   |
//! | 2     | version, `u16` = 1             |
//! | 12    | `u32` W, L, H_v                |
//! | W·L·H_v | `u8` class index per voxel, x-major, z-minor |
//!
//! The class count and names live in the sidecar, so the header is exactly
//! 18 bytes. Probability grids are exported as their argmax labels.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sliceocc::head::{default_class_names, VoxelGrid};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"SOCC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GridFormatError {
    #[error("file truncated in {section}: needs {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        section: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("{0} classes exceed the u8 format limit of 255")]
    TooManyClasses(usize),
    #[error("voxel {index} has label {label} but the grid has {classes} classes")]
    LabelOutOfRange { index: usize, label: u32, classes: usize },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(usize),
    #[error("grid dimensions {0:?} overflow")]
    Overflow((u32, u32, u32)),
    #[error("{0}")]
    Grid(String),
}

/// Serializes a grid.
pub fn encode_grid(grid: &VoxelGrid) -> Result<Vec<u8>, GridFormatError> {
    let c = grid.num_classes();
    if c > 255 {
        return Err(GridFormatError::TooManyClasses(c));
    }
    let (w, l, h) = grid.dims;
    let labels = grid.labels();
    let mut out = Vec::with_capacity(HEADER_LEN + labels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [w, l, h] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (index, &label) in labels.iter().enumerate() {
        if label as usize >= c {
            return Err(GridFormatError::LabelOutOfRange { index, label, classes: c });
        }
        out.push(label as u8);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, section: &'static str, n: usize) -> Result<&'a [u8], GridFormatError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(GridFormatError::Truncated {
                section,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32, GridFormatError> {
        Ok(u32::from_le_bytes(self.take(section, 4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a grid. Without class names the class count is taken as one
/// past the largest label.
pub fn decode_grid(bytes: &[u8], class_names: Option<Vec<String>>) -> Result<VoxelGrid, GridFormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take("magic", 4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(GridFormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take("version", 2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(GridFormatError::UnsupportedVersion(version));
    }
    let (w, l, h) = (r.u32("dimensions")?, r.u32("dimensions")?, r.u32("dimensions")?);
    let n = (w as usize)
        .checked_mul(l as usize)
        .and_then(|x| x.checked_mul(h as usize))
        .ok_or(GridFormatError::Overflow((w, l, h)))?;
    let payload = r.take("payload", n)?;
    if r.pos != bytes.len() {
        return Err(GridFormatError::TrailingBytes(bytes.len() - r.pos));
    }
    let labels: Vec<u32> = payload.iter().map(|&b| b as u32).collect();
    let names = match class_names {
        Some(names) => {
            if names.len() > 255 {
                return Err(GridFormatError::TooManyClasses(names.len()));
            }
            if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= names.len()) {
                return Err(GridFormatError::LabelOutOfRange { index, label, classes: names.len() });
            }
            names
        }
        None => default_class_names(labels.iter().max().map_or(1, |&m| m as usize + 1)),
    };
    VoxelGrid::from_indices((w as usize, l as usize, h as usize), names, labels).map_err(|e| GridFormatError::Grid(e.to_string()))
}

/// JSON document written next to every exported grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u16,
    pub dims: (usize, usize, usize),
    pub class_names: Vec<String>,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub run_config: RunConfig,
}

impl Sidecar {
    pub fn new(grid: &VoxelGrid, cfg: &RunConfig) -> Self {
        Self {
            format: "SOCC".into(),
            version: VERSION,
            dims: grid.dims,
            class_names: grid.class_names.clone(),
            x_range: cfg.scene.x_range,
            y_range: cfg.scene.y_range,
            z_range: cfg.scene.z_range,
            run_config: cfg.clone(),
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the grid and its sidecar.
pub fn export_grid(grid: &VoxelGrid, path: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    let bytes = encode_grid(grid)?;
    std::fs::write(path, bytes)?;
    let sidecar = serde_json::to_string_pretty(&Sidecar::new(grid, cfg))?;
    std::fs::write(sidecar_path(path), sidecar + "\n")?;
    Ok(())
}

/// Reads a grid, taking class names from the sidecar when one exists.
pub fn import_grid(path: &Path) -> anyhow::Result<VoxelGrid> {
    let bytes = std::fs::read(path)?;
    let side = sidecar_path(path);
    let names = if side.exists() {
        let s: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
        Some(s.class_names)
    } else {
        None
    };
    Ok(decode_grid(&bytes, names)?)
}
