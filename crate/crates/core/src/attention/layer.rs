use serde::{Deserialize, Serialize};

use crate::attention::ops::SamplerShape;
use crate::attention::pca::PlanarCrossAttention;
use crate::attention::queries::{ImageFeatureSet, SliceQuerySet};
use crate::attention::ssca::{SlicedSpatialCrossAttention, SscaPlan};
use crate::error::{Error, Result};
use crate::geometry::SceneConfig;
use crate::numerics::{Graph, LayerNorm, LinearLayer, ParamStore, Rng};

/// Order of the two attention blocks inside a layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockOrder {
    #[default]
    PlanarFirst,
    SpatialFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Sampling points per head for planar attention.
    pub planar_points: usize,
    /// Sampling points per head and level for spatial attention.
    pub spatial_points: usize,
    pub image_levels: usize,
    pub ffn_hidden: usize,
    pub block_order: BlockOrder,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            planar_points: 4,
            spatial_points: 4,
            image_levels: 1,
            ffn_hidden: 128,
            block_order: BlockOrder::PlanarFirst,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("D must be a positive multiple of the head count");
        }
        if self.planar_points == 0 || self.spatial_points == 0 || self.image_levels == 0 || self.ffn_hidden == 0 {
            return bad("points, levels and FFN width must be positive");
        }
        Ok(())
    }
}

/// Two-layer GELU feed-forward shared by both plane roles.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub norm_floor: LayerNorm,
    pub norm_ceiling: LayerNorm,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, hidden: usize) -> Self {
        Self {
            fc1: LinearLayer::new(store, rng, &format!("{name}.fc1"), d_model, hidden),
            fc2: LinearLayer::new(store, rng, &format!("{name}.fc2"), hidden, d_model),
            norm_floor: LayerNorm::new(store, &format!("{name}.norm_floor"), d_model),
            norm_ceiling: LayerNorm::new(store, &format!("{name}.norm_ceiling"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, q: SliceQuerySet) -> Result<SliceQuerySet> {
        let rows = q.num_slices * q.tokens;
        let f = self.norm_floor.forward(g, q.floor)?;
        let c = self.norm_ceiling.forward(g, q.ceiling)?;
        let x = g.tape.concat_rows(&[f, c])?;
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h)?;
        let y = self.fc2.forward(g, h)?;
        let df = g.tape.slice_rows(y, 0, rows)?;
        let dc = g.tape.slice_rows(y, rows, rows)?;
        let floor = g.tape.add(q.floor, df)?;
        let ceiling = g.tape.add(q.ceiling, dc)?;
        Ok(SliceQuerySet { floor, ceiling, ..q })
    }
}

/// One refinement layer: planar and spatial attention, then the FFN.
#[derive(Clone, Debug)]
pub struct SliceOccLayer {
    pub pca: PlanarCrossAttention,
    pub ssca: SlicedSpatialCrossAttention,
    pub ffn: Ffn,
}

impl SliceOccLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let spatial = SamplerShape {
            heads: cfg.heads,
            levels: cfg.image_levels,
            points: cfg.spatial_points,
        };
        Ok(Self {
            pca: PlanarCrossAttention::new(store, rng, &format!("{name}.pca"), cfg.d_model, cfg.heads, cfg.planar_points)?,
            ssca: SlicedSpatialCrossAttention::new(store, rng, &format!("{name}.ssca"), cfg.d_model, spatial)?,
            ffn: Ffn::new(store, rng, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_hidden),
        })
    }
}

/// Applies one layer to all query planes.
pub fn sliceocc_layer(
    g: &mut Graph<'_>,
    layer: &SliceOccLayer,
    scene: &SceneConfig,
    q: SliceQuerySet,
    feats: &ImageFeatureSet,
    plan: &SscaPlan,
    order: BlockOrder,
) -> Result<SliceQuerySet> {
    let q = match order {
        BlockOrder::PlanarFirst => {
            let q = layer.pca.forward(g, scene, q)?;
            layer.ssca.forward(g, q, feats, plan)?
        }
        BlockOrder::SpatialFirst => {
            let q = layer.ssca.forward(g, q, feats, plan)?;
            layer.pca.forward(g, scene, q)?
        }
    };
    layer.ffn.forward(g, q)
}
