use std::collections::BTreeMap;

use crate::attention::ops::{deform_aggregate, MapView, SamplerShape, SamplingPlan, ValueSource};
use crate::error::{shape_err, Result};
use crate::numerics::{Graph, LinearLayer, ParamStore, Rng, Tensor, Var};

/// Parameters of one multi-head deformable attention.
///
/// Offsets start at zero so that an untrained layer samples exactly at its
/// reference points.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub shape: SamplerShape,
    pub offset: LinearLayer,
    pub weight: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
}

pub struct AttnOutput {
    pub out: Var,
    pub has_hit: Vec<bool>,
    pub locations: Option<Vec<f64>>,
}

impl DeformAttn {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_model: usize, shape: SamplerShape) -> Result<Self> {
        if shape.heads == 0 || d_model % shape.heads != 0 {
            return Err(shape_err("DeformAttn", format!("D divisible by {} heads", shape.heads), d_model));
        }
        if shape.levels == 0 || shape.points == 0 {
            return Err(shape_err("DeformAttn", "levels, points >= 1", format!("{shape:?}")));
        }
        Ok(Self {
            shape,
            offset: LinearLayer::zeros(store, &format!("{name}.offset"), d_model, shape.offset_width()),
            weight: LinearLayer::new(store, rng, &format!("{name}.attn_weight"), d_model, shape.weight_width()),
            value: LinearLayer::new(store, rng, &format!("{name}.value"), d_model, d_model),
            output: LinearLayer::new(store, rng, &format!("{name}.output"), d_model, d_model),
        })
    }

    /// Attends `query` to the plan's sources. Every distinct source tensor
    /// goes through the value projection once before sampling.
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, mut plan: SamplingPlan, trace: bool) -> Result<AttnOutput> {
        let offsets = self.offset.forward(g, query)?;
        let logits = self.weight.forward(g, query)?;
        let mut projected: BTreeMap<Var, Var> = BTreeMap::new();
        for src in &mut plan.sources {
            for lv in &mut src.levels {
                lv.var = match projected.get(&lv.var) {
                    Some(&v) => v,
                    None => {
                        let v = self.value.forward(g, lv.var)?;
                        projected.insert(lv.var, v);
                        v
                    }
                };
            }
        }
        let agg = deform_aggregate(&mut g.tape, self.shape, plan, offsets, logits, trace)?;
        let out = self.output.forward(g, agg.out)?;
        Ok(AttnOutput {
            out,
            has_hit: agg.has_hit,
            locations: agg.locations,
        })
    }
}

/// Single-source deformable attention.
///
/// `query` is `[Nq, D]`, `refs` is `[Nq, R, 2]` in normalized map
/// coordinates and `values` holds one map per level. References outside the
/// unit square are masked; a query with no usable reference returns the
/// output bias only.
pub fn deformable_attention(
    g: &mut Graph<'_>,
    query: Var,
    refs: &Tensor,
    values: &[MapView],
    params: &DeformAttn,
) -> Result<Var> {
    refs.expect_rank("deformable_attention", 3)?;
    let (nq, r) = (refs.dim(0), refs.dim(1));
    if refs.dim(2) != 2 || g.tape.shape(query)[0] != nq {
        return Err(shape_err("deformable_attention", format!("refs [{}, R, 2]", g.tape.shape(query)[0]), format!("{:?}", refs.shape())));
    }
    let hits = refs
        .data()
        .chunks_exact(2)
        .map(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
        .collect();
    let plan = SamplingPlan {
        sources: vec![ValueSource { levels: values.to_vec() }],
        refs_per_source: r,
        refs: refs.data().to_vec(),
        hits,
    };
    Ok(params.forward(g, query, plan, false)?.out)
}
