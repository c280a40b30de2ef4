//! Slice queries and the two cross-attention blocks that refine them.
//!
//! Both blocks are multi-head deformable attention: every head predicts a few
//! sampling offsets around reference points plus softmax weights, and
//! aggregates bilinearly sampled values. Planar attention samples the
//! opposite plane of the same slab. Spatial attention samples image features
//! around the projections of a vertical pillar of 3D points.

mod deform;
mod layer;
pub mod ops;
mod pca;
mod queries;
mod ssca;

pub use deform::{deformable_attention, AttnOutput, DeformAttn};
pub use layer::{sliceocc_layer, AttentionConfig, BlockOrder, Ffn, SliceOccLayer};
pub use ops::{MapView, SamplerShape, SamplingPlan, ValueSource};
pub use pca::{planar_plan, PlanarCrossAttention};
pub use queries::{anchor_sampling, init_queries, AnchorSampling, ImageFeatureSet, QueryEmbedding, SliceQuerySet};
pub use ssca::{SlicedSpatialCrossAttention, SscaPlan};

/// Pixel coordinates to the normalized `[0, 1]` image frame.
pub fn normalize_pixel(pixel: [f64; 2], image_size: (usize, usize)) -> [f64; 2] {
    let (w, h) = image_size;
    let nx = if w > 1 { pixel[0] / (w - 1) as f64 } else { 0.0 };
    let ny = if h > 1 { pixel[1] / (h - 1) as f64 } else { 0.0 };
    [nx, ny]
}
