use crate::attention::deform::DeformAttn;
use crate::attention::normalize_pixel;
use crate::attention::ops::{SamplerShape, SamplingPlan, ValueSource};
use crate::attention::queries::{ImageFeatureSet, SliceQuerySet};
use crate::error::{shape_err, Result};
use crate::geometry::{CameraParams, PlaneRole, ReferencePointSet, SceneConfig};
use crate::numerics::{Graph, LayerNorm, ParamStore, Rng};

/// Pillar references of every plane in every view, for queries ordered
/// `[floor slabs..., ceiling slabs...]`.
#[derive(Clone, Debug)]
pub struct SscaPlan {
    /// `[2 * S * W * L, V, N_r3d, 2]` normalized image coordinates.
    pub refs: Vec<f64>,
    /// `[2 * S * W * L, V, N_r3d]`.
    pub hits: Vec<bool>,
    pub num_views: usize,
    pub pillar_points: usize,
}

impl SscaPlan {
    pub fn build(cfg: &SceneConfig, cams: &[CameraParams], points: &ReferencePointSet) -> Result<Self> {
        let (np, nv, nr) = (cfg.tokens_per_plane(), cams.len(), cfg.pillar_points);
        let nq = 2 * cfg.num_slices * np;
        let mut refs = vec![0.0; nq * nv * nr * 2];
        let mut hits = vec![false; nq * nv * nr];
        for role in PlaneRole::BOTH {
            for i in 0..cfg.num_slices {
                for (v, cam) in cams.iter().enumerate() {
                    let proj = &points.projections[i][role.index()][v];
                    let px = proj.pixels.data();
                    for t in 0..np {
                        let n = (role.index() * cfg.num_slices + i) * np + t;
                        for k in 0..nr {
                            let src = t * nr + k;
                            let dst = (n * nv + v) * nr + k;
                            if proj.hits[src] {
                                let p = normalize_pixel([px[2 * src], px[2 * src + 1]], cam.image_size);
                                refs[2 * dst] = p[0];
                                refs[2 * dst + 1] = p[1];
                                hits[dst] = true;
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            refs,
            hits,
            num_views: nv,
            pillar_points: nr,
        })
    }

    /// Per query row, whether any view sees any of its pillar points.
    pub fn row_has_hit(&self) -> Vec<bool> {
        let per = self.num_views * self.pillar_points;
        self.hits.chunks_exact(per).map(|c| c.iter().any(|&h| h)).collect()
    }

    pub fn to_sampling_plan(&self, feats: &ImageFeatureSet) -> Result<SamplingPlan> {
        if feats.num_views() != self.num_views {
            return Err(shape_err("SscaPlan", self.num_views, feats.num_views()));
        }
        Ok(SamplingPlan {
            sources: feats.views.iter().map(|levels| ValueSource { levels: levels.clone() }).collect(),
            refs_per_source: self.pillar_points,
            refs: self.refs.clone(),
            hits: self.hits.clone(),
        })
    }
}

/// Image-to-slice attention around projected pillars. One parameter set
/// serves every slab and both plane roles.
#[derive(Clone, Debug)]
pub struct SlicedSpatialCrossAttention {
    pub attn: DeformAttn,
    pub norm_floor: LayerNorm,
    pub norm_ceiling: LayerNorm,
}

impl SlicedSpatialCrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, shape: SamplerShape) -> Result<Self> {
        Ok(Self {
            attn: DeformAttn::new(store, rng, &format!("{name}.attn"), d_model, shape)?,
            norm_floor: LayerNorm::new(store, &format!("{name}.norm_floor"), d_model),
            norm_ceiling: LayerNorm::new(store, &format!("{name}.norm_ceiling"), d_model),
        })
    }

    /// Tokens that no view sees are returned unchanged.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        q: SliceQuerySet,
        feats: &ImageFeatureSet,
        plan: &SscaPlan,
    ) -> Result<SliceQuerySet> {
        let rows = q.num_slices * q.tokens;
        let f_n = self.norm_floor.forward(g, q.floor)?;
        let c_n = self.norm_ceiling.forward(g, q.ceiling)?;
        let both = g.tape.concat_rows(&[f_n, c_n])?;
        let res = self.attn.forward(g, both, plan.to_sampling_plan(feats)?, false)?;
        let mask = res.has_hit.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        let delta = g.tape.mul_rows(res.out, mask)?;
        let df = g.tape.slice_rows(delta, 0, rows)?;
        let dc = g.tape.slice_rows(delta, rows, rows)?;
        let floor = g.tape.add(q.floor, df)?;
        let ceiling = g.tape.add(q.ceiling, dc)?;
        Ok(SliceQuerySet { floor, ceiling, ..q })
    }
}
