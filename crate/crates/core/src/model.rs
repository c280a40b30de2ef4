//! The full network: input encoder, slice queries, decoder layers, voxel
//! assembly, and the occupancy head.

use serde::{Deserialize, Serialize};

use crate::attention::{
    anchor_sampling, init_queries, sliceocc_layer, AnchorSampling, AttentionConfig, ImageFeatureSet, MapView,
    QueryEmbedding, SliceOccLayer, SliceQuerySet, SscaPlan,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraParams, PlaneRole, ReferencePointSet, SceneConfig};
use crate::head::{assemble_voxels, decode, Dims, FcnHead};
use crate::numerics::{Graph, LayerNorm, LinearLayer, ParamStore, Rng, Tensor, Var};
use crate::synth::{FeatureRenderer, RenderedViews, RendererMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scene: SceneConfig,
    pub attention: AttentionConfig,
    pub renderer: FeatureRenderer,
    /// Channel width of the hidden head convolutions.
    pub head_width: usize,
    /// Number of hidden kernel-3 convolutions before the classifier.
    pub head_stages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let attention = AttentionConfig::default();
        Self {
            scene: SceneConfig::default(),
            head_width: attention.d_model,
            attention,
            renderer: FeatureRenderer::default(),
            head_stages: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.attention.validate()?;
        if self.attention.image_levels != self.renderer.levels {
            return Err(Error::InvalidConfig(format!(
                "attention reads {} image levels but the renderer produces {}",
                self.attention.image_levels, self.renderer.levels
            )));
        }
        if self.head_width == 0 {
            return Err(Error::InvalidConfig("head width must be positive".into()));
        }
        Ok(())
    }

    pub fn voxel_dims(&self) -> Dims {
        (self.scene.voxel_w, self.scene.voxel_l, self.scene.voxel_h)
    }
}

/// Per-pixel projection of rendered channels to the model width.
#[derive(Clone, Debug)]
pub enum InputEncoder {
    Linear(LinearLayer),
    /// Two linear layers with a GELU in between.
    Mlp(LinearLayer, LinearLayer),
}

impl InputEncoder {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Linear(l) => l.forward(g, x),
            Self::Mlp(a, b) => {
                let h = a.forward(g, x)?;
                let h = g.tape.gelu(h)?;
                b.forward(g, h)
            }
        }
    }
}

/// Everything derived from a scene's cameras and renders that does not
/// depend on parameters.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub rendered: RenderedViews,
    pub anchors: AnchorSampling,
    pub ssca: SscaPlan,
    /// All pyramid levels of all views stacked as `[pixels, channels]`.
    stacked: Tensor,
    /// `(view, level) -> (row offset, height, width)`.
    layout: Vec<Vec<(usize, usize, usize)>>,
}

impl SceneInputs {
    pub fn prepare(cfg: &SceneConfig, cameras: &[CameraParams], rendered: RenderedViews) -> Result<Self> {
        if cameras.len() != rendered.views.len() {
            return Err(Error::InvalidConfig(format!("{} cameras but {} rendered views", cameras.len(), rendered.views.len())));
        }
        let refs = ReferencePointSet::build(cfg, cameras)?;
        let ssca = SscaPlan::build(cfg, cameras, &refs)?;
        let anchors = anchor_sampling(cfg, cameras)?;
        let mut data = Vec::new();
        let mut layout = Vec::with_capacity(rendered.views.len());
        let mut row = 0;
        for levels in &rendered.views {
            let mut lv = Vec::with_capacity(levels.len());
            for m in levels {
                lv.push((row, m.height, m.width));
                row += m.height * m.width;
                data.extend_from_slice(m.data.data());
            }
            layout.push(lv);
        }
        let stacked = Tensor::new(vec![row, rendered.channels], data)?;
        Ok(Self {
            rendered,
            anchors,
            ssca,
            stacked,
            layout,
        })
    }

    pub fn num_views(&self) -> usize {
        self.layout.len()
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardOutput {
    pub probs: Var,
    pub queries: SliceQuerySet,
    pub voxel_features: Var,
    /// Anchors that no view sees; their content query is zero.
    pub unseen_anchors: usize,
}

#[derive(Clone, Debug)]
pub struct SliceOccModel {
    pub config: ModelConfig,
    pub encoder: InputEncoder,
    pub query: QueryEmbedding,
    pub layers: Vec<SliceOccLayer>,
    pub final_norm_floor: LayerNorm,
    pub final_norm_ceiling: LayerNorm,
    pub head: FcnHead,
}

impl SliceOccModel {
    /// Registers all parameters in `store`. Initialization draws from
    /// `rng` in a fixed order.
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.attention.d_model;
        let c_in = config.renderer.channels(config.scene.num_classes);
        let encoder = match config.renderer.mode {
            RendererMode::LearnedToyEncoder => InputEncoder::Mlp(
                LinearLayer::new(store, rng, "encoder.fc1", c_in, d),
                LinearLayer::new(store, rng, "encoder.fc2", d, d),
            ),
            _ => InputEncoder::Linear(LinearLayer::new(store, rng, "encoder.proj", c_in, d)),
        };
        let query = QueryEmbedding::new(store, rng, config.scene.num_slices, d);
        let layers = (0..config.scene.layers)
            .map(|i| SliceOccLayer::new(store, rng, &format!("layer{i}"), &config.attention))
            .collect::<Result<Vec<_>>>()?;
        let final_norm_floor = LayerNorm::new(store, "final_norm_floor", d);
        let final_norm_ceiling = LayerNorm::new(store, "final_norm_ceiling", d);
        let head = FcnHead::new(store, rng, d, config.head_width, config.scene.num_classes, config.head_stages);
        Ok(Self {
            config,
            encoder,
            query,
            layers,
            final_norm_floor,
            final_norm_ceiling,
            head,
        })
    }

    /// Encodes the rendered views into tape-resident feature maps.
    pub fn encode(&self, g: &mut Graph<'_>, inputs: &SceneInputs) -> Result<ImageFeatureSet> {
        let raw = g.tape.constant(inputs.stacked.clone())?;
        let feat = self.encoder.forward(g, raw)?;
        let views = inputs
            .layout
            .iter()
            .map(|levels| {
                levels
                    .iter()
                    .map(|&(row_offset, height, width)| MapView {
                        var: feat,
                        row_offset,
                        height,
                        width,
                    })
                    .collect()
            })
            .collect();
        Ok(ImageFeatureSet {
            views,
            channels: self.config.attention.d_model,
        })
    }

    /// Refined slab planes after all layers and the final normalization.
    pub fn queries(&self, g: &mut Graph<'_>, inputs: &SceneInputs) -> Result<(SliceQuerySet, usize)> {
        let scene = &self.config.scene;
        let feats = self.encode(g, inputs)?;
        let (mut q, unseen) = init_queries(g, scene, &self.query, &feats, &inputs.anchors)?;
        for layer in &self.layers {
            q = sliceocc_layer(g, layer, scene, q, &feats, &inputs.ssca, self.config.attention.block_order)?;
        }
        let floor = self.final_norm_floor.forward(g, q.plane(PlaneRole::Floor))?;
        let ceiling = self.final_norm_ceiling.forward(g, q.plane(PlaneRole::Ceiling))?;
        Ok((SliceQuerySet { floor, ceiling, ..q }, unseen))
    }

    pub fn forward(&self, g: &mut Graph<'_>, inputs: &SceneInputs) -> Result<ForwardOutput> {
        let (queries, unseen_anchors) = self.queries(g, inputs)?;
        let voxel_features = assemble_voxels(&mut g.tape, &queries, &self.config.scene)?;
        let probs = decode(g, voxel_features, self.config.voxel_dims(), &self.head)?;
        Ok(ForwardOutput {
            probs,
            queries,
            voxel_features,
            unseen_anchors,
        })
    }
}
