//! Scene lattice, pinhole cameras, anchors, and reference points.
//!
//! World frame is z-up. Camera frame is x right, y down, z forward; pixel
//! centers sit at integer coordinates, so an image of width `w` spans
//! `[0, w - 1]` in pixel-center units.
//!
//! Plane tokens are laid out row-major with rows along y and columns along x:
//! token `iy * W + ix` covers cell `(ix, iy)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Below this camera-frame depth a point is treated as degenerate.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// Slice resolution along x.
    pub slice_w: usize,
    /// Slice resolution along y.
    pub slice_l: usize,
    /// Number of vertical slabs.
    pub num_slices: usize,
    /// Pillar reference points per query token.
    pub pillar_points: usize,
    /// Class count including "empty" at index 0.
    pub num_classes: usize,
    pub layers: usize,
    pub num_views: usize,
    /// Output voxel lattice; x/y default to the slice resolution.
    pub voxel_w: usize,
    pub voxel_l: usize,
    pub voxel_h: usize,
    /// Vertical extent of one pillar. `None` uses half a slab.
    pub pillar_span: Option<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            x_range: (-3.2, 3.2),
            y_range: (-3.2, 3.2),
            z_range: (-1.28, 1.28),
            slice_w: 40,
            slice_l: 40,
            num_slices: 16,
            pillar_points: 4,
            num_classes: 81,
            layers: 3,
            num_views: 20,
            voxel_w: 40,
            voxel_l: 40,
            voxel_h: 16,
            pillar_span: None,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, (lo, hi)) in [("x_range", self.x_range), ("y_range", self.y_range), ("z_range", self.z_range)] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return bad(format!("{name} must be finite with max > min, got ({lo}, {hi})"));
            }
        }
        for (name, v) in [
            ("W", self.slice_w),
            ("L", self.slice_l),
            ("S", self.num_slices),
            ("N_r3d", self.pillar_points),
            ("layers", self.layers),
            ("num_views", self.num_views),
            ("voxel_w", self.voxel_w),
            ("voxel_l", self.voxel_l),
            ("H_v", self.voxel_h),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("C must be >= 2, got {}", self.num_classes));
        }
        if self.voxel_h % self.num_slices != 0 {
            return bad(format!("H_v={} is not divisible by S={}", self.voxel_h, self.num_slices));
        }
        if let Some(span) = self.pillar_span {
            if !(span.is_finite() && span > 0.0) {
                return bad(format!("pillar_span must be positive, got {span}"));
            }
        }
        Ok(())
    }

    /// Total scene height `H`.
    pub fn height(&self) -> f64 {
        self.z_range.1 - self.z_range.0
    }

    pub fn slab_height(&self) -> f64 {
        self.height() / self.num_slices as f64
    }

    pub fn tokens_per_plane(&self) -> usize {
        self.slice_w * self.slice_l
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_w * self.voxel_l * self.voxel_h
    }

    /// Metric cell size `(dx, dy)` of the slice planes.
    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.x_range.1 - self.x_range.0) / self.slice_w as f64,
            (self.y_range.1 - self.y_range.0) / self.slice_l as f64,
        )
    }

    pub fn voxel_size(&self) -> Vec3 {
        [
            (self.x_range.1 - self.x_range.0) / self.voxel_w as f64,
            (self.y_range.1 - self.y_range.0) / self.voxel_l as f64,
            self.height() / self.voxel_h as f64,
        ]
    }

    /// World position of the center of voxel `(ix, iy, iz)`.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let s = self.voxel_size();
        [
            self.x_range.0 + (ix as f64 + 0.5) * s[0],
            self.y_range.0 + (iy as f64 + 0.5) * s[1],
            self.z_range.0 + (iz as f64 + 0.5) * s[2],
        ]
    }

    /// Vertical extent of one pillar and the spacing between its points.
    pub fn pillar_span(&self) -> f64 {
        self.pillar_span.unwrap_or(self.slab_height() / 2.0)
    }

    /// World-space center of plane cell `(ix, iy)`.
    fn cell_center_xy(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (dx, dy) = self.cell_size();
        (self.x_range.0 + (ix as f64 + 0.5) * dx, self.y_range.0 + (iy as f64 + 0.5) * dy)
    }
}

/// Which face of a slab a plane represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlaneRole {
    Floor,
    Ceiling,
}

impl PlaneRole {
    pub const BOTH: [PlaneRole; 2] = [PlaneRole::Floor, PlaneRole::Ceiling];

    /// Offset of the half-slab in units of a slab height.
    pub fn beta(self) -> f64 {
        match self {
            PlaneRole::Floor => 0.0,
            PlaneRole::Ceiling => 0.5,
        }
    }

    pub fn index(self) -> usize {
        match self {
            PlaneRole::Floor => 0,
            PlaneRole::Ceiling => 1,
        }
    }
}

/// Pinhole camera with world-to-camera extrinsics `p_cam = R p + T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

/// Result of projecting one world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub hit: bool,
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn det3(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

impl CameraParams {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, image_size: (usize, usize)) -> Result<Self> {
        let cam = Self { k, r, t, image_size };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` looking at `target` with world z as up.
    /// Intrinsics put the principal point at the image center.
    pub fn look_at(position: Vec3, target: Vec3, fov_x_deg: f64, image_size: (usize, usize)) -> Result<Self> {
        let forward = normalize([target[0] - position[0], target[1] - position[1], target[2] - position[2]]);
        let side = cross(forward, [0.0, 0.0, 1.0]);
        if dot(side, side) < 1e-12 {
            return Err(Error::InvalidConfig("look_at: view direction parallel to up axis".into()));
        }
        let right = normalize(side);
        let down = cross(forward, right);
        let r = [right, down, forward];
        let rp = mat_vec(&r, position);
        let t = [-rp[0], -rp[1], -rp[2]];
        let (w, h) = image_size;
        let f = (w as f64 / 2.0) / (fov_x_deg.to_radians() / 2.0).tan();
        let k = [[f, 0.0, (w as f64 - 1.0) / 2.0], [0.0, f, (h as f64 - 1.0) / 2.0], [0.0, 0.0, 1.0]];
        Self::new(k, r, t, image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("camera: {m}")));
        let k = &self.k;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return bad("K must be upper-triangular");
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return bad("focal lengths must be positive");
        }
        if (k[2][2] - 1.0).abs() > 1e-12 {
            return bad("K[2][2] must be 1");
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(self.r[i], self.r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return bad("R must be orthonormal");
                }
            }
        }
        if (det3(&self.r) - 1.0).abs() > 1e-9 {
            return bad("R must have determinant +1");
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return bad("image size must be positive");
        }
        if self.k.iter().flatten().chain(self.r.iter().flatten()).chain(&self.t).any(|v| !v.is_finite()) {
            return bad("parameters must be finite");
        }
        Ok(())
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let rp = mat_vec(&self.r, p);
        [rp[0] + self.t[0], rp[1] + self.t[1], rp[2] + self.t[2]]
    }

    /// Camera center in world coordinates, `-R^T T`.
    pub fn center(&self) -> Vec3 {
        let c = mat_t_vec(&self.r, self.t);
        [-c[0], -c[1], -c[2]]
    }

    pub fn in_bounds(&self, pixel: [f64; 2]) -> bool {
        let (w, h) = self.image_size;
        pixel[0] >= 0.0 && pixel[0] <= (w - 1) as f64 && pixel[1] >= 0.0 && pixel[1] <= (h - 1) as f64
    }

    pub fn project_point(&self, p: Vec3) -> Projection {
        let pc = self.to_camera(p);
        let depth = pc[2];
        if depth.abs() < MIN_DEPTH {
            return Projection {
                pixel: [f64::NAN, f64::NAN],
                depth,
                hit: false,
            };
        }
        let q = mat_vec(&self.k, pc);
        let pixel = [q[0] / q[2], q[1] / q[2]];
        let hit = depth > MIN_DEPTH && self.in_bounds(pixel);
        Projection { pixel, depth, hit }
    }

    /// Unit-free direction in camera frame through a pixel, with z = 1.
    fn pixel_to_camera_dir(&self, pixel: [f64; 2]) -> Vec3 {
        let k = &self.k;
        let y = (pixel[1] - k[1][2]) / k[1][1];
        let x = (pixel[0] - k[0][2] - k[0][1] * y) / k[0][0];
        [x, y, 1.0]
    }

    /// World point at camera-frame depth `depth` along the ray through `pixel`.
    pub fn backproject(&self, pixel: [f64; 2], depth: f64) -> Vec3 {
        let d = self.pixel_to_camera_dir(pixel);
        let pc = [d[0] * depth - self.t[0], d[1] * depth - self.t[1], depth - self.t[2]];
        mat_t_vec(&self.r, pc)
    }

    /// World-space ray `(origin, unit direction)` through a pixel.
    pub fn ray(&self, pixel: [f64; 2]) -> (Vec3, Vec3) {
        let d = mat_t_vec(&self.r, self.pixel_to_camera_dir(pixel));
        (self.center(), normalize(d))
    }
}

/// Projects `[P, 3]` world points: pixels `[P, 2]`, depths `[P]`, hit mask.
/// Degenerate points report NaN-free zero pixels with `hit = false`.
pub fn project(points: &Tensor, cam: &CameraParams) -> Result<(Tensor, Tensor, Vec<bool>)> {
    points.expect_rank("project", 2)?;
    if points.dim(1) != 3 {
        return Err(crate::error::shape_err("project", "points [P, 3]", format!("{:?}", points.shape())));
    }
    let n = points.dim(0);
    let mut pix = Vec::with_capacity(2 * n);
    let mut depth = Vec::with_capacity(n);
    let mut hit = Vec::with_capacity(n);
    for p in points.data().chunks_exact(3) {
        let pr = cam.project_point([p[0], p[1], p[2]]);
        if pr.pixel[0].is_finite() && pr.pixel[1].is_finite() {
            pix.extend_from_slice(&pr.pixel);
        } else {
            pix.extend_from_slice(&[0.0, 0.0]);
        }
        depth.push(pr.depth);
        hit.push(pr.hit);
    }
    Ok((Tensor::new(vec![n, 2], pix)?, Tensor::new(vec![n], depth)?, hit))
}

/// Normalized cell-center grid `[W*L, 2]` shared by floor and ceiling planes.
pub fn make_planar_refs(cfg: &SceneConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (w, l) = (cfg.slice_w, cfg.slice_l);
    let mut data = Vec::with_capacity(2 * w * l);
    for iy in 0..l {
        for ix in 0..w {
            data.push((ix as f64 + 0.5) / w as f64);
            data.push((iy as f64 + 0.5) / l as f64);
        }
    }
    Tensor::new(vec![w * l, 2], data)
}

/// Heights of the pillar points of slab `slice` (1-based), measured from the
/// scene bottom.
pub fn pillar_heights(cfg: &SceneConfig, slice: usize, role: PlaneRole) -> Result<Vec<f64>> {
    if slice == 0 || slice > cfg.num_slices {
        return Err(Error::SliceIndex {
            index: slice,
            count: cfg.num_slices,
        });
    }
    let slab = cfg.slab_height();
    let step = cfg.pillar_span() / cfg.pillar_points as f64;
    let base = (slice as f64 - 1.0 + role.beta()) * slab;
    Ok((1..=cfg.pillar_points).map(|n| base + n as f64 * step).collect())
}

/// World-space pillar reference points `[W*L, N_r3d, 3]` for one plane.
pub fn make_pillar_refs(cfg: &SceneConfig, slice: usize, role: PlaneRole) -> Result<Tensor> {
    cfg.validate()?;
    let zs = pillar_heights(cfg, slice, role)?;
    let (w, l, n) = (cfg.slice_w, cfg.slice_l, cfg.pillar_points);
    let mut data = Vec::with_capacity(w * l * n * 3);
    for iy in 0..l {
        for ix in 0..w {
            let (x, y) = cfg.cell_center_xy(ix, iy);
            for &z in &zs {
                data.extend_from_slice(&[x, y, cfg.z_range.0 + z]);
            }
        }
    }
    Tensor::new(vec![w * l, n, 3], data)
}

/// One anchor per plane cell per slab, at the cell center and slab mid-height.
pub fn make_anchor_grid(cfg: &SceneConfig) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let slab = cfg.slab_height();
    (0..cfg.num_slices)
        .map(|i| {
            let z = cfg.z_range.0 + (i as f64 + 0.5) * slab;
            let mut data = Vec::with_capacity(cfg.tokens_per_plane() * 3);
            for iy in 0..cfg.slice_l {
                for ix in 0..cfg.slice_w {
                    let (x, y) = cfg.cell_center_xy(ix, iy);
                    data.extend_from_slice(&[x, y, z]);
                }
            }
            Tensor::new(vec![cfg.tokens_per_plane(), 3], data)
        })
        .collect()
}

/// Pillar points of one plane projected into one view.
#[derive(Clone, Debug)]
pub struct PillarProjection {
    /// `[W*L, N_r3d, 2]` pixel coordinates (zero where degenerate).
    pub pixels: Tensor,
    /// `[W*L * N_r3d]` membership of each point in the view's hit set.
    pub hits: Vec<bool>,
}

/// Planar and pillar reference points for every slab, role, and view.
#[derive(Clone, Debug)]
pub struct ReferencePointSet {
    pub ref2d: Tensor,
    /// `ref3d[slice][role]`, `[W*L, N_r3d, 3]`.
    pub ref3d: Vec<[Tensor; 2]>,
    /// `projections[slice][role][view]`.
    pub projections: Vec<[Vec<PillarProjection>; 2]>,
}

impl ReferencePointSet {
    pub fn build(cfg: &SceneConfig, cams: &[CameraParams]) -> Result<Self> {
        cfg.validate()?;
        let ref2d = make_planar_refs(cfg)?;
        let n = cfg.pillar_points;
        let mut ref3d = Vec::with_capacity(cfg.num_slices);
        let mut projections = Vec::with_capacity(cfg.num_slices);
        for i in 1..=cfg.num_slices {
            let floor = make_pillar_refs(cfg, i, PlaneRole::Floor)?;
            let ceiling = make_pillar_refs(cfg, i, PlaneRole::Ceiling)?;
            let proj = |pts: &Tensor| -> Result<Vec<PillarProjection>> {
                let flat = pts.clone().reshape(vec![cfg.tokens_per_plane() * n, 3])?;
                cams.iter()
                    .map(|cam| {
                        let (pix, _, hits) = project(&flat, cam)?;
                        Ok(PillarProjection {
                            pixels: pix.reshape(vec![cfg.tokens_per_plane(), n, 2])?,
                            hits,
                        })
                    })
                    .collect()
            };
            projections.push([proj(&floor)?, proj(&ceiling)?]);
            ref3d.push([floor, ceiling]);
        }
        Ok(Self {
            ref2d,
            ref3d,
            projections,
        })
    }

    /// Whether any pillar point of `token` lands in `view`.
    pub fn token_hits_view(&self, slice: usize, role: PlaneRole, view: usize, token: usize, n: usize) -> bool {
        self.projections[slice][role.index()][view].hits[token * n..(token + 1) * n]
            .iter()
            .any(|&h| h)
    }
}
