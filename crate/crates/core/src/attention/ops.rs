//! Fused sampling ops behind deformable attention and query initialization.
//!
//! Value maps are channel-last: a map of `height x width` texels is a run of
//! `height * width` consecutive rows of a `[rows, D]` tape value, starting at
//! `row_offset`. Several maps may live in one tensor (all slab planes of a
//! role, for instance).

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::numerics::sample::{bilinear_taps, texel_step};
use crate::numerics::{Backward, BackwardCtx, Tape, Tensor, Var};

/// A `height x width` channel-last map stored inside a tape value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapView {
    pub var: Var,
    pub row_offset: usize,
    pub height: usize,
    pub width: usize,
}

impl MapView {
    pub fn whole(tape: &Tape, var: Var, height: usize, width: usize) -> Result<Self> {
        let rows = tape.shape(var)[0];
        if rows != height * width {
            return Err(shape_err("MapView", format!("{} rows", height * width), rows));
        }
        Ok(Self {
            var,
            row_offset: 0,
            height,
            width,
        })
    }

    fn check(&self, tape: &Tape, channels: usize) -> Result<()> {
        let s = tape.shape(self.var);
        if s.len() != 2 || s[1] != channels || s[0] < self.row_offset + self.height * self.width {
            return Err(shape_err(
                "MapView",
                format!("[>= {}, {channels}]", self.row_offset + self.height * self.width),
                format!("{s:?}"),
            ));
        }
        Ok(())
    }
}

/// One attended feature source (a view, or a plane) with its scale levels.
#[derive(Clone, Debug)]
pub struct ValueSource {
    pub levels: Vec<MapView>,
}

/// Where each query samples: per query and source, `refs_per_source`
/// normalized reference points and whether each reference is usable.
#[derive(Clone, Debug)]
pub struct SamplingPlan {
    pub sources: Vec<ValueSource>,
    pub refs_per_source: usize,
    /// `[Nq, Nsrc, R, 2]` normalized `(u, v)`.
    pub refs: Vec<f64>,
    /// `[Nq, Nsrc, R]`.
    pub hits: Vec<bool>,
}

impl SamplingPlan {
    pub fn num_queries(&self) -> usize {
        let per = self.sources.len() * self.refs_per_source;
        if per == 0 {
            0
        } else {
            self.hits.len() / per
        }
    }

    /// Sources with at least one usable reference for query `n`.
    pub fn hit_sources(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        let r = self.refs_per_source;
        let ns = self.sources.len();
        (0..ns).filter(move |&s| self.hits[(n * ns + s) * r..(n * ns + s + 1) * r].iter().any(|&h| h))
    }

    pub fn has_hit(&self, n: usize) -> bool {
        self.hit_sources(n).next().is_some()
    }
}

/// Head/level/point layout of a deformable sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerShape {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl SamplerShape {
    pub fn per_head(&self) -> usize {
        self.levels * self.points
    }

    pub fn offset_width(&self) -> usize {
        self.heads * self.per_head() * 2
    }

    pub fn weight_width(&self) -> usize {
        self.heads * self.per_head()
    }
}

struct DeformSaved {
    shape: SamplerShape,
    plan: SamplingPlan,
    offsets: Var,
    logits: Var,
    channels: usize,
    /// `[Nq, Nsrc, H, Lv*P]`, zero where masked.
    weights: Vec<f64>,
    /// `[Nq, Nsrc, H, Lv*P, 2]`.
    locations: Vec<f64>,
}

/// Per-point sampling bookkeeping shared by forward and backward.
#[inline]
fn point_ref(plan: &SamplingPlan, n: usize, s: usize, p: usize) -> (usize, bool) {
    let r = p % plan.refs_per_source;
    let ns = plan.sources.len();
    let idx = (n * ns + s) * plan.refs_per_source + r;
    (idx, plan.hits[idx])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Backward for DeformSaved {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let SamplerShape { heads, levels, points } = self.shape;
        let per_head = levels * points;
        let d = self.channels;
        let dh = d / heads;
        let ns = self.plan.sources.len();
        let nq = self.plan.num_queries();

        let mut map_grads: BTreeMap<Var, Vec<f64>> = BTreeMap::new();
        for src in &self.plan.sources {
            for lv in &src.levels {
                if ctx.requires_grad(lv.var) {
                    map_grads.entry(lv.var).or_insert_with(|| vec![0.0; ctx.value(lv.var).numel()]);
                }
            }
        }
        let mut g_off = vec![0.0; nq * self.shape.offset_width()];
        let mut g_logit = vec![0.0; nq * self.shape.weight_width()];
        let mut ga = vec![0.0; per_head];
        // per point and tap: d(out)/d(sample) contracted with the output grad
        let mut gm = vec![[0.0; 4]; per_head];

        for n in 0..nq {
            let hit: Vec<usize> = self.plan.hit_sources(n).collect();
            if hit.is_empty() {
                continue;
            }
            let inv = 1.0 / hit.len() as f64;
            for s in hit {
                let src = &self.plan.sources[s];
                for h in 0..heads {
                    let gh = &g[n * d + h * dh..n * d + (h + 1) * dh];
                    let wbase = ((n * ns + s) * heads + h) * per_head;
                    let mut wsum = 0.0;
                    for k in 0..per_head {
                        let a = self.weights[wbase + k];
                        ga[k] = 0.0;
                        if a == 0.0 {
                            continue;
                        }
                        let map = src.levels[k / points];
                        let md = ctx.value(map.var).data();
                        let loc = &self.locations[(wbase + k) * 2..(wbase + k) * 2 + 2];
                        let taps = bilinear_taps(loc[0], loc[1], map.height, map.width);
                        let mut acc = 0.0;
                        for (ti, t) in taps.iter().enumerate() {
                            let base = (map.row_offset + t.index) * d + h * dh;
                            let v = dot(&md[base..base + dh], gh);
                            gm[k][ti] = v;
                            acc += t.weight * v;
                        }
                        ga[k] = inv * acc;
                        wsum += a * ga[k];
                    }
                    for k in 0..per_head {
                        let a = self.weights[wbase + k];
                        if a == 0.0 {
                            continue;
                        }
                        g_logit[(n * heads + h) * per_head + k] += a * (ga[k] - wsum);
                        let (lvl, p) = (k / points, k % points);
                        let map = src.levels[lvl];
                        let loc = &self.locations[(wbase + k) * 2..(wbase + k) * 2 + 2];
                        let taps = bilinear_taps(loc[0], loc[1], map.height, map.width);
                        let coef = inv * a;
                        let mut dloc = [0.0; 2];
                        let mut buf = map_grads.get_mut(&map.var);
                        for (ti, t) in taps.iter().enumerate() {
                            dloc[0] += coef * t.dweight[0] * gm[k][ti];
                            dloc[1] += coef * t.dweight[1] * gm[k][ti];
                            if let Some(buf) = buf.as_deref_mut() {
                                let base = (map.row_offset + t.index) * d + h * dh;
                                let w = coef * t.weight;
                                for (dst, gv) in buf[base..base + dh].iter_mut().zip(gh) {
                                    *dst += w * gv;
                                }
                            }
                        }
                        let oi = (((n * heads + h) * levels + lvl) * points + p) * 2;
                        g_off[oi] += dloc[0] * texel_step(map.width);
                        g_off[oi + 1] += dloc[1] * texel_step(map.height);
                    }
                }
            }
        }

        for (var, buf) in map_grads {
            ctx.accumulate(var, &buf);
        }
        ctx.accumulate(self.offsets, &g_off);
        ctx.accumulate(self.logits, &g_logit);
    }
}

/// Output of [`deform_aggregate`].
pub struct DeformAggregate {
    /// `[Nq, D]`, head `h` filling channels `[h * D/H, (h + 1) * D/H)`.
    pub out: Var,
    /// Per query, whether any source was usable.
    pub has_hit: Vec<bool>,
    /// `[Nq, Nsrc, H, Lv*P, 2]` sampling locations (only when traced).
    pub locations: Option<Vec<f64>>,
}

/// Multi-head, multi-level deformable sampling of already projected maps.
///
/// For query `n`, head `h`, level `l`, point `p` and every usable source
/// `s`, the location is `ref[n, s, p mod R] + offset[n, h, l, p]` (offset in
/// texels of level `l`). Weights are a softmax of `logits[n, h, :]` over the
/// points whose reference is usable in `s`. Head `h` reads its own channel
/// block of the maps, and results are averaged over usable sources.
/// Queries without any usable source get a zero row.
pub fn deform_aggregate(
    tape: &mut Tape,
    shape: SamplerShape,
    plan: SamplingPlan,
    offsets: Var,
    logits: Var,
    trace: bool,
) -> Result<DeformAggregate> {
    let SamplerShape { heads, levels, points } = shape;
    let per_head = levels * points;
    let ns = plan.sources.len();
    let r = plan.refs_per_source;
    if r == 0 || ns == 0 {
        return Err(shape_err("deform_aggregate", "at least one source and reference", format!("{ns} x {r}")));
    }
    let nq = plan.hits.len() / (ns * r);
    if plan.hits.len() != nq * ns * r || plan.refs.len() != nq * ns * r * 2 {
        return Err(shape_err("deform_aggregate", format!("refs [{nq}, {ns}, {r}, 2]"), plan.refs.len()));
    }
    if tape.shape(offsets) != [nq, shape.offset_width()] {
        return Err(shape_err("deform_aggregate", format!("offsets [{nq}, {}]", shape.offset_width()), format!("{:?}", tape.shape(offsets))));
    }
    if tape.shape(logits) != [nq, shape.weight_width()] {
        return Err(shape_err("deform_aggregate", format!("logits [{nq}, {}]", shape.weight_width()), format!("{:?}", tape.shape(logits))));
    }
    let first = plan.sources[0].levels.first().ok_or_else(|| shape_err("deform_aggregate", "levels >= 1", 0))?;
    let d = tape.shape(first.var)[1];
    if d % heads != 0 {
        return Err(shape_err("deform_aggregate", format!("channels divisible by {heads} heads"), d));
    }
    let dh = d / heads;
    for src in &plan.sources {
        if src.levels.len() != levels {
            return Err(shape_err("deform_aggregate", format!("{levels} levels"), src.levels.len()));
        }
        for lv in &src.levels {
            lv.check(tape, d)?;
        }
    }

    let off = tape.data(offsets);
    let lg = tape.data(logits);
    let mut out = vec![0.0; nq * d];
    let mut weights = vec![0.0; nq * ns * heads * per_head];
    let mut locations = vec![0.0; nq * ns * heads * per_head * 2];
    let mut has_hit = vec![false; nq];
    let mut a = vec![0.0; per_head];

    for n in 0..nq {
        let hit: Vec<usize> = plan.hit_sources(n).collect();
        if hit.is_empty() {
            continue;
        }
        has_hit[n] = true;
        let inv = 1.0 / hit.len() as f64;
        for &s in &hit {
            let src = &plan.sources[s];
            for h in 0..heads {
                let lrow = &lg[(n * heads + h) * per_head..(n * heads + h + 1) * per_head];
                let mut m = f64::NEG_INFINITY;
                for k in 0..per_head {
                    if point_ref(&plan, n, s, k % points).1 {
                        m = m.max(lrow[k]);
                    }
                }
                if m == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for k in 0..per_head {
                    a[k] = if point_ref(&plan, n, s, k % points).1 { (lrow[k] - m).exp() } else { 0.0 };
                    z += a[k];
                }
                let wbase = ((n * ns + s) * heads + h) * per_head;
                let orow = &mut out[n * d + h * dh..n * d + (h + 1) * dh];
                for k in 0..per_head {
                    if a[k] == 0.0 {
                        continue;
                    }
                    let ak = a[k] / z;
                    weights[wbase + k] = ak;
                    let (lvl, p) = (k / points, k % points);
                    let (ridx, _) = point_ref(&plan, n, s, p);
                    let map = src.levels[lvl];
                    let oi = (((n * heads + h) * levels + lvl) * points + p) * 2;
                    let u = plan.refs[ridx * 2] + off[oi] * texel_step(map.width);
                    let v = plan.refs[ridx * 2 + 1] + off[oi + 1] * texel_step(map.height);
                    locations[(wbase + k) * 2] = u;
                    locations[(wbase + k) * 2 + 1] = v;
                    let md = tape.data(map.var);
                    let coef = inv * ak;
                    for t in bilinear_taps(u, v, map.height, map.width).iter() {
                        let w = coef * t.weight;
                        let base = (map.row_offset + t.index) * d + h * dh;
                        for (o, x) in orow.iter_mut().zip(&md[base..base + dh]) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
    }

    let value = Tensor::new(vec![nq, d], out)?;
    let traced = trace.then(|| locations.clone());
    let mut inputs: Vec<Var> = plan.sources.iter().flat_map(|s| s.levels.iter().map(|l| l.var)).collect();
    inputs.push(offsets);
    inputs.push(logits);
    let saved = DeformSaved {
        shape,
        plan,
        offsets,
        logits,
        channels: d,
        weights,
        locations,
    };
    let out = tape.push_op("deform_aggregate", value, &inputs, saved)?;
    Ok(DeformAggregate {
        out,
        has_hit,
        locations: traced,
    })
}

struct MultiViewOp {
    maps: Vec<MapView>,
    /// `[Na, V, 2]` normalized sample points.
    points: Vec<f64>,
    /// `[Na, V]`.
    hits: Vec<bool>,
    channels: usize,
}

impl Backward for MultiViewOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let nv = self.maps.len();
        let na = self.hits.len() / nv;
        let d = self.channels;
        let mut bufs: BTreeMap<Var, Vec<f64>> = BTreeMap::new();
        for m in &self.maps {
            if ctx.requires_grad(m.var) {
                bufs.entry(m.var).or_insert_with(|| vec![0.0; ctx.value(m.var).numel()]);
            }
        }
        if bufs.is_empty() {
            return;
        }
        for n in 0..na {
            let cnt = self.hits[n * nv..(n + 1) * nv].iter().filter(|&&h| h).count();
            if cnt == 0 {
                continue;
            }
            let inv = 1.0 / cnt as f64;
            for (v, map) in self.maps.iter().enumerate() {
                if !self.hits[n * nv + v] {
                    continue;
                }
                let Some(buf) = bufs.get_mut(&map.var) else { continue };
                let (u, vv) = (self.points[(n * nv + v) * 2], self.points[(n * nv + v) * 2 + 1]);
                for t in bilinear_taps(u, vv, map.height, map.width).iter() {
                    let base = (map.row_offset + t.index) * d;
                    let w = inv * t.weight;
                    for (dst, gv) in buf[base..base + d].iter_mut().zip(&g[n * d..(n + 1) * d]) {
                        *dst += w * gv;
                    }
                }
            }
        }
        for (var, buf) in bufs {
            ctx.accumulate(var, &buf);
        }
    }
}

/// Samples one map per view at per-view normalized points and averages over
/// the views that hit. Queries hit by no view get a zero row. Returns the
/// `[Na, D]` result and the number of all-miss queries.
pub fn multi_view_mean_sample(
    tape: &mut Tape,
    maps: Vec<MapView>,
    points: Vec<f64>,
    hits: Vec<bool>,
) -> Result<(Var, usize)> {
    let nv = maps.len();
    if nv == 0 || hits.len() % nv != 0 || points.len() != hits.len() * 2 {
        return Err(shape_err("multi_view_mean_sample", "points [Na, V, 2] and hits [Na, V]", points.len()));
    }
    let na = hits.len() / nv;
    let d = tape.shape(maps[0].var)[1];
    for m in &maps {
        m.check(tape, d)?;
    }
    let mut out = vec![0.0; na * d];
    let mut misses = 0;
    for n in 0..na {
        let cnt = hits[n * nv..(n + 1) * nv].iter().filter(|&&h| h).count();
        if cnt == 0 {
            misses += 1;
            continue;
        }
        let inv = 1.0 / cnt as f64;
        let row = &mut out[n * d..(n + 1) * d];
        for (v, map) in maps.iter().enumerate() {
            if !hits[n * nv + v] {
                continue;
            }
            let md = tape.data(map.var);
            let (u, vv) = (points[(n * nv + v) * 2], points[(n * nv + v) * 2 + 1]);
            for t in bilinear_taps(u, vv, map.height, map.width).iter() {
                let base = (map.row_offset + t.index) * d;
                let w = inv * t.weight;
                for (o, x) in row.iter_mut().zip(&md[base..base + d]) {
                    *o += w * x;
                }
            }
        }
    }
    let value = Tensor::new(vec![na, d], out)?;
    let inputs: Vec<Var> = maps.iter().map(|m| m.var).collect();
    let var = tape.push_op(
        "multi_view_mean_sample",
        value,
        &inputs,
        MultiViewOp {
            maps,
            points,
            hits,
            channels: d,
        },
    )?;
    Ok((var, misses))
}
