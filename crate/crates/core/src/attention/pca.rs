use crate::attention::deform::DeformAttn;
use crate::attention::ops::{MapView, SamplerShape, SamplingPlan, ValueSource};
use crate::attention::queries::SliceQuerySet;
use crate::error::Result;
use crate::geometry::SceneConfig;
use crate::numerics::sample::cell_to_texel;
use crate::numerics::{Graph, LayerNorm, ParamStore, Rng, Var};

/// Floor/ceiling exchange within each slab: the floor attends the ceiling,
/// then the ceiling attends the updated floor.
#[derive(Clone, Debug)]
pub struct PlanarCrossAttention {
    pub floor_from_ceiling: DeformAttn,
    pub ceiling_from_floor: DeformAttn,
    pub norm_floor: LayerNorm,
    pub norm_ceiling: LayerNorm,
}

/// Sampling plan for `S * W * L` queries over the `S` planes stored in
/// `source`: query `n` of slab `i` uses only plane `i`, referenced at its own
/// cell center.
pub fn planar_plan(cfg: &SceneConfig, source: Var) -> SamplingPlan {
    let (w, l, s) = (cfg.slice_w, cfg.slice_l, cfg.num_slices);
    let np = w * l;
    let sources = (0..s)
        .map(|i| ValueSource {
            levels: vec![MapView {
                var: source,
                row_offset: i * np,
                height: l,
                width: w,
            }],
        })
        .collect();
    let mut refs = Vec::with_capacity(s * np * s * 2);
    let mut hits = Vec::with_capacity(s * np * s);
    for slab in 0..s {
        for iy in 0..l {
            for ix in 0..w {
                let u = cell_to_texel((ix as f64 + 0.5) / w as f64, w);
                let v = cell_to_texel((iy as f64 + 0.5) / l as f64, l);
                for src in 0..s {
                    refs.extend_from_slice(&[u, v]);
                    hits.push(src == slab);
                }
            }
        }
    }
    SamplingPlan {
        sources,
        refs_per_source: 1,
        refs,
        hits,
    }
}

impl PlanarCrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, heads: usize, points: usize) -> Result<Self> {
        let shape = SamplerShape { heads, levels: 1, points };
        Ok(Self {
            floor_from_ceiling: DeformAttn::new(store, rng, &format!("{name}.floor_from_ceiling"), d_model, shape)?,
            ceiling_from_floor: DeformAttn::new(store, rng, &format!("{name}.ceiling_from_floor"), d_model, shape)?,
            norm_floor: LayerNorm::new(store, &format!("{name}.norm_floor"), d_model),
            norm_ceiling: LayerNorm::new(store, &format!("{name}.norm_ceiling"), d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, cfg: &SceneConfig, q: SliceQuerySet) -> Result<SliceQuerySet> {
        let f_n = self.norm_floor.forward(g, q.floor)?;
        let c_n = self.norm_ceiling.forward(g, q.ceiling)?;
        let d1 = self.floor_from_ceiling.forward(g, f_n, planar_plan(cfg, c_n), false)?.out;
        let floor = g.tape.add(q.floor, d1)?;

        let f_n2 = self.norm_floor.forward(g, floor)?;
        let d2 = self.ceiling_from_floor.forward(g, c_n, planar_plan(cfg, f_n2), false)?.out;
        let ceiling = g.tape.add(q.ceiling, d2)?;
        Ok(SliceQuerySet { floor, ceiling, ..q })
    }
}
