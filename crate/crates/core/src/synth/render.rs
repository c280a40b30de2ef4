use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Vec3};
use crate::numerics::Tensor;
use crate::synth::scene::BoxObject;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RendererMode {
    /// `C` channels: one-hot class of the first surface hit, channel 0 when
    /// the ray escapes.
    #[default]
    SemanticOnehot,
    /// One channel: `1 / (1 + t)` at the first hit, 0 when the ray escapes.
    Depth,
    /// Three channels: a fixed color per class, for models that learn their
    /// own per-pixel encoder.
    LearnedToyEncoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRenderer {
    pub mode: RendererMode,
    /// Pyramid levels; level `l + 1` is a 2x average pool of level `l`.
    pub levels: usize,
}

impl Default for FeatureRenderer {
    fn default() -> Self {
        Self {
            mode: RendererMode::SemanticOnehot,
            levels: 1,
        }
    }
}

impl FeatureRenderer {
    pub fn channels(&self, num_classes: usize) -> usize {
        match self.mode {
            RendererMode::SemanticOnehot => num_classes,
            RendererMode::Depth => 1,
            RendererMode::LearnedToyEncoder => 3,
        }
    }
}

/// One pyramid level of one view: `[height * width, channels]`, pixel
/// `(u, v)` at row `v * width + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedMap {
    pub width: usize,
    pub height: usize,
    pub data: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedViews {
    pub channels: usize,
    /// `views[v][level]`.
    pub views: Vec<Vec<RenderedMap>>,
}

/// Fixed color of a class; background is black.
pub fn palette_color(class: u32) -> [f64; 3] {
    if class == 0 {
        return [0.0; 3];
    }
    let c = class as f64;
    [(c * 0.618_034).fract(), (c * 0.414_214 + 0.3).fract(), (c * 0.732_051 + 0.6).fract()]
}

/// Index of the first box along the ray and its distance, if any.
pub fn cast_ray(objects: &[BoxObject], origin: Vec3, dir: Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in objects.iter().enumerate() {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        let mut ok = true;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < o.min[a] || origin[a] > o.max[a] {
                    ok = false;
                    break;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut lo, mut hi) = ((o.min[a] - origin[a]) * inv, (o.max[a] - origin[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                ok = false;
                break;
            }
        }
        // ties go to the later box, matching the voxel labels
        if ok && best.map_or(true, |(_, t)| t0 <= t) {
            best = Some((i, t0));
        }
    }
    best
}

fn pool2(map: &RenderedMap, channels: usize) -> Result<RenderedMap> {
    let (w, h) = (map.width / 2, map.height / 2);
    if w == 0 || h == 0 {
        return Err(Error::InvalidConfig(format!("image {}x{} too small for another pyramid level", map.width, map.height)));
    }
    let src = map.data.data();
    let mut out = vec![0.0; w * h * channels];
    for v in 0..h {
        for u in 0..w {
            let dst = &mut out[(v * w + u) * channels..(v * w + u + 1) * channels];
            for (dv, du) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * v + dv) * map.width + 2 * u + du) * channels;
                for (d, x) in dst.iter_mut().zip(&src[s..s + channels]) {
                    *d += 0.25 * x;
                }
            }
        }
    }
    Ok(RenderedMap {
        width: w,
        height: h,
        data: Tensor::new(vec![w * h, channels], out)?,
    })
}

/// Ray-casts every pixel center of every camera.
pub fn render_views(objects: &[BoxObject], cams: &[CameraParams], renderer: &FeatureRenderer, num_classes: usize) -> Result<RenderedViews> {
    if renderer.levels == 0 {
        return Err(Error::InvalidConfig("renderer needs at least one level".into()));
    }
    let ch = renderer.channels(num_classes);
    let mut views = Vec::with_capacity(cams.len());
    for cam in cams {
        let (w, h) = cam.image_size;
        let mut data = vec![0.0; w * h * ch];
        for v in 0..h {
            for u in 0..w {
                let (origin, dir) = cam.ray([u as f64, v as f64]);
                let hit = cast_ray(objects, origin, dir);
                let px = &mut data[(v * w + u) * ch..(v * w + u + 1) * ch];
                match renderer.mode {
                    RendererMode::SemanticOnehot => {
                        let class = hit.map_or(0, |(i, _)| objects[i].class as usize);
                        if class >= ch {
                            return Err(Error::InvalidConfig(format!("object class {class} out of range for C={ch}")));
                        }
                        px[class] = 1.0;
                    }
                    RendererMode::Depth => px[0] = hit.map_or(0.0, |(_, t)| 1.0 / (1.0 + t)),
                    RendererMode::LearnedToyEncoder => {
                        px.copy_from_slice(&palette_color(hit.map_or(0, |(i, _)| objects[i].class)));
                    }
                }
            }
        }
        let mut levels = vec![RenderedMap {
            width: w,
            height: h,
            data: Tensor::new(vec![w * h, ch], data)?,
        }];
        for _ in 1..renderer.levels {
            let next = pool2(levels.last().expect("non-empty"), ch)?;
            levels.push(next);
        }
        views.push(levels);
    }
    Ok(RenderedViews { channels: ch, views })
}
