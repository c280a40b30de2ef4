use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, SceneConfig, Vec3};
use crate::head::{default_class_names, VoxelGrid};
use crate::numerics::Rng;

/// Axis-aligned box with inclusive bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub min: Vec3,
    pub max: Vec3,
    pub class: u32,
}

impl BoxObject {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn center(&self) -> Vec3 {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }
}

/// Knobs of the scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Number of footprints; each carries a tower of `stacking` boxes.
    pub num_objects: usize,
    pub stacking: usize,
    /// `(width, height)` of rendered images.
    pub image_size: (usize, usize),
    /// Ring radius around the room center, meters.
    pub camera_radius: f64,
    /// Absolute camera height, meters.
    pub camera_height: f64,
    /// Height of the point the ring looks at, meters.
    pub target_height: f64,
    pub fov_deg: f64,
    /// Footprint side length range, meters.
    pub footprint: (f64, f64),
    /// Tower height range as a fraction of the scene height.
    pub tower_height: (f64, f64),
    /// Minimum gap between footprints, meters.
    pub gap: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_objects: 3,
            stacking: 1,
            image_size: (32, 24),
            camera_radius: 4.0,
            camera_height: 0.6,
            target_height: -0.5,
            fov_deg: 90.0,
            footprint: (1.0, 1.8),
            tower_height: (0.55, 0.9),
            gap: 0.3,
            max_attempts: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub objects: Vec<BoxObject>,
    pub cameras: Vec<CameraParams>,
    pub gt: VoxelGrid,
}

/// `n` cameras evenly spaced in azimuth, all looking at the room center.
pub fn camera_ring(cfg: &SceneConfig, spec: &SceneSpec, n: usize) -> Result<Vec<CameraParams>> {
    let cx = 0.5 * (cfg.x_range.0 + cfg.x_range.1);
    let cy = 0.5 * (cfg.y_range.0 + cfg.y_range.1);
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let pos = [cx + spec.camera_radius * a.cos(), cy + spec.camera_radius * a.sin(), spec.camera_height];
            CameraParams::look_at(pos, [cx, cy, spec.target_height], spec.fov_deg, spec.image_size)
        })
        .collect()
}

/// Labels every voxel center with the last-placed box covering it.
pub fn gt_occupancy(cfg: &SceneConfig, objects: &[BoxObject]) -> Result<VoxelGrid> {
    let dims = (cfg.voxel_w, cfg.voxel_l, cfg.voxel_h);
    let mut labels = Vec::with_capacity(cfg.num_voxels());
    for ix in 0..dims.0 {
        for iy in 0..dims.1 {
            for iz in 0..dims.2 {
                let c = cfg.voxel_center(ix, iy, iz);
                labels.push(objects.iter().rev().find(|o| o.contains(c)).map_or(0, |o| o.class));
            }
        }
    }
    VoxelGrid::from_indices(dims, default_class_names(cfg.num_classes), labels)
}

fn overlaps(a: &(f64, f64, f64, f64), b: &(f64, f64, f64, f64), gap: f64) -> bool {
    a.0 < b.2 + gap && b.0 < a.2 + gap && a.1 < b.3 + gap && b.1 < a.3 + gap
}

/// Places `num_objects` non-overlapping footprints, each a floor-standing
/// tower of `max(stacking, 1)` boxes with distinct classes, and a camera
/// ring of `cfg.num_views` views.
pub fn generate_scene(cfg: &SceneConfig, spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let per_tower = spec.stacking.max(1);
    if spec.num_objects == 0 {
        return Err(Error::InvalidConfig("num_objects must be >= 1".into()));
    }
    if per_tower > cfg.num_classes - 1 {
        return Err(Error::InvalidConfig(format!(
            "stacking {per_tower} needs that many object classes, C={} has {}",
            cfg.num_classes,
            cfg.num_classes - 1
        )));
    }
    let (lo, hi) = spec.footprint;
    if !(lo > 0.0 && hi >= lo) || !(spec.tower_height.0 > 0.0 && spec.tower_height.1 <= 1.0 && spec.tower_height.1 >= spec.tower_height.0) {
        return Err(Error::InvalidConfig("footprint and tower height ranges must be positive and ordered".into()));
    }
    let cameras = camera_ring(cfg, spec, cfg.num_views)?;
    let mut rng = Rng::new(seed);
    let mut footprints: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while footprints.len() < spec.num_objects {
        attempts += 1;
        if attempts > spec.max_attempts {
            return Err(Error::Placement {
                attempts: spec.max_attempts,
                reason: format!("placed {} of {} footprints", footprints.len(), spec.num_objects),
            });
        }
        let sx = rng.uniform(lo, hi);
        let sy = rng.uniform(lo, hi);
        let (x0, x1) = (cfg.x_range.0, cfg.x_range.1 - sx);
        let (y0, y1) = (cfg.y_range.0, cfg.y_range.1 - sy);
        if x1 <= x0 || y1 <= y0 {
            continue;
        }
        let x = rng.uniform(x0, x1);
        let y = rng.uniform(y0, y1);
        let fp = (x, y, x + sx, y + sy);
        if footprints.iter().any(|o| overlaps(o, &fp, spec.gap)) {
            continue;
        }
        footprints.push(fp);
    }

    let h = cfg.height();
    let mut classes: Vec<u32> = (1..cfg.num_classes as u32).collect();
    let mut objects = Vec::new();
    for fp in &footprints {
        let total = h * rng.uniform(spec.tower_height.0, spec.tower_height.1);
        rng.shuffle(&mut classes);
        let mut z = cfg.z_range.0;
        for (j, &class) in classes.iter().take(per_tower).enumerate() {
            let share = total / per_tower as f64;
            let top = if j + 1 == per_tower { cfg.z_range.0 + total } else { z + share * rng.uniform(0.8, 1.2) };
            objects.push(BoxObject {
                min: [fp.0, fp.1, z],
                max: [fp.2, fp.3, top],
                class,
            });
            z = top;
        }
    }

    for (v, cam) in cameras.iter().enumerate() {
        if !objects.iter().any(|o| cam.project_point(o.center()).hit) {
            return Err(Error::Placement {
                attempts,
                reason: format!("camera {v} sees no object center"),
            });
        }
    }
    let gt = gt_occupancy(cfg, &objects)?;
    Ok(SyntheticScene {
        config: cfg.clone(),
        objects,
        cameras,
        gt,
    })
}
