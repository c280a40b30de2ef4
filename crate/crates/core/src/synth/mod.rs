//! Procedural box scenes with exact voxel labels, inward-facing camera rings,
//! and a ray-cast feature renderer that stands in for an image encoder.

mod render;
mod scene;

pub use render::{cast_ray, palette_color, render_views, FeatureRenderer, RenderedMap, RenderedViews, RendererMode};
pub use scene::{camera_ring, generate_scene, gt_occupancy, BoxObject, SceneSpec, SyntheticScene};
