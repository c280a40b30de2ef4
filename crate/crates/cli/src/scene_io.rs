//! Scene JSON: room bounds and lattice, boxes, and cameras. Ground truth is
//! recomputed from the boxes on load.
//!
//! ```json
//! {
//!   "config": { "x_range": [-3.2, 3.2], "slice_w": 20, ... },
//!   "objects": [ { "min": [x, y, z], "max": [x, y, z], "class": 2 } ],
//!   "cameras": [ { "k": [[fx, 0, cx], [0, fy, cy], [0, 0, 1]],
//!                  "r": [[...], [...], [...]], "t": [tx, ty, tz],
//!                  "image_size": [w, h] } ]
//! }
//! ```

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sliceocc::geometry::{CameraParams, SceneConfig};
use sliceocc::synth::{gt_occupancy, BoxObject, SyntheticScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub config: SceneConfig,
    pub objects: Vec<BoxObject>,
    pub cameras: Vec<CameraParams>,
}

impl SceneFile {
    pub fn from_scene(s: &SyntheticScene) -> Self {
        Self {
            config: s.config.clone(),
            objects: s.objects.clone(),
            cameras: s.cameras.clone(),
        }
    }

    pub fn into_scene(self) -> anyhow::Result<SyntheticScene> {
        self.config.validate()?;
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate().with_context(|| format!("camera {i}"))?;
        }
        let gt = gt_occupancy(&self.config, &self.objects)?;
        Ok(SyntheticScene {
            config: self.config,
            objects: self.objects,
            cameras: self.cameras,
            gt,
        })
    }
}

pub fn save_scene(scene: &SyntheticScene, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&SceneFile::from_scene(scene))?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn load_scene(path: &Path) -> anyhow::Result<SyntheticScene> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: SceneFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    file.into_scene()
}
