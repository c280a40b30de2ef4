//! Finite-difference gradient suites: small per-op graphs with tight
//! tolerances and a full forward pass on a toy scene.

use crate::attention::{AttentionConfig, DeformAttn, MapView, SamplerShape, SamplingPlan, SliceQuerySet, ValueSource};
use crate::error::Result;
use crate::geometry::SceneConfig;
use crate::head::{assemble_voxels, decode, FcnHead};
use crate::loss::{loss_ce, loss_scal, total_loss, ScalMode};
use crate::model::{ModelConfig, SceneInputs, SliceOccModel};
use crate::numerics::{grad_check, GradCheckOptions, GradReport, Graph, ParamStore, Rng, Tensor, Var};
use crate::synth::{generate_scene, render_views, SceneSpec, SyntheticScene};

/// Tolerance for the per-op suites.
pub const OP_TOL: f64 = 1e-6;
/// Tolerance for the full pipeline.
pub const PIPELINE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: &'static str,
    pub report: GradReport,
}

/// Weighted sum of `x` against a fixed random tensor, so every output
/// entry carries a distinct upstream gradient.
fn probe(g: &mut Graph<'_>, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.tape.constant(weights.clone())?;
    let m = g.tape.mul(x, w)?;
    g.tape.sum(m)
}

fn dense_ops(eps: f64) -> Result<GradReport> {
    let mut rng = Rng::new(9);
    let mut store = ParamStore::new();
    let x = store.add("x", rng.tensor_uniform(&[4, 6], 1.5));
    let w = store.add("w", rng.tensor_uniform(&[5, 6], 0.5));
    let b = store.add("b", rng.tensor_uniform(&[5], 0.5));
    let gamma = store.add("gamma", rng.tensor_uniform(&[5], 1.0));
    let beta = store.add("beta", rng.tensor_uniform(&[5], 1.0));
    let row = store.add("row", rng.tensor_uniform(&[5], 1.0));
    let weights = rng.tensor_uniform(&[4, 5], 1.0);
    let f = |g: &mut Graph<'_>| {
        let (x, w, b) = (g.param(x)?, g.param(w)?, g.param(b)?);
        let (gm, bt, row) = (g.param(gamma)?, g.param(beta)?, g.param(row)?);
        let h = g.tape.linear(x, w, Some(b))?;
        let h = g.tape.gelu(h)?;
        let h = g.tape.layer_norm(h, gm, bt)?;
        let h = g.tape.add_row(h, row)?;
        let h = g.tape.mul_rows(h, vec![1.0, 0.0, -2.0, 0.5])?;
        let s = g.tape.softmax(h)?;
        let s = g.tape.scale(s, 3.0)?;
        let sq = g.tape.mul(s, s)?;
        let sq = g.tape.sub(sq, h)?;
        probe(g, sq, &weights)
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

fn row_ops(eps: f64) -> Result<GradReport> {
    let mut rng = Rng::new(10);
    let mut store = ParamStore::new();
    let a = store.add("a", rng.tensor_uniform(&[3, 4], 1.0));
    let b = store.add("b", rng.tensor_uniform(&[2, 4], 1.0));
    let weights = rng.tensor_uniform(&[8, 4], 1.0);
    let f = |g: &mut Graph<'_>| {
        let (a, b) = (g.param(a)?, g.param(b)?);
        let r = g.tape.repeat_rows(b, 2)?;
        let s = g.tape.slice_rows(a, 1, 2)?;
        let c = g.tape.concat_rows(&[a, s])?;
        let c = g.tape.slice_rows(c, 0, 4)?;
        let c = g.tape.concat_rows(&[c, r])?;
        let c = g.tape.mul(c, c)?;
        probe(g, c, &weights)
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

fn bilinear(eps: f64) -> Result<GradReport> {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::new();
    let map = store.add("map", rng.tensor_uniform(&[3, 4, 5], 1.0));
    let pts = store.add("points", Tensor::new(vec![3, 2], vec![0.37, 0.21, 0.62, 0.83, 0.11, 0.52])?);
    let weights = rng.tensor_uniform(&[3, 3], 1.0);
    let f = |g: &mut Graph<'_>| {
        let (m, p) = (g.param(map)?, g.param(pts)?);
        let s = g.tape.bilinear_sample(m, p)?;
        probe(g, s, &weights)
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

fn trilinear(eps: f64) -> Result<GradReport> {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::new();
    let vol = store.add("volume", rng.tensor_uniform(&[2, 3, 4, 3], 1.0));
    let pts = store.add("points", Tensor::new(vec![2, 3], vec![0.37, 0.21, 0.66, 0.62, 0.83, 0.13])?);
    let weights = rng.tensor_uniform(&[2, 2], 1.0);
    let f = |g: &mut Graph<'_>| {
        let (v, p) = (g.param(vol)?, g.param(pts)?);
        let s = g.tape.trilinear_sample(v, p)?;
        probe(g, s, &weights)
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

fn deformable(eps: f64) -> Result<GradReport> {
    let (d, nq, r, nsrc) = (8, 6, 2, 2);
    let shape = SamplerShape { heads: 2, levels: 2, points: 2 };
    let sizes = [(5, 6), (3, 4)];
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut rng, "attn", d, shape)?;
    for id in [attn.offset.weight, attn.offset.bias] {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = rng.tensor_uniform(&s, 0.4);
    }
    let query = store.add("query", rng.tensor_uniform(&[nq, d], 1.0));
    let maps: Vec<Vec<_>> = (0..nsrc)
        .map(|s| {
            sizes
                .iter()
                .enumerate()
                .map(|(l, &(h, w))| (store.add(format!("map{s}.{l}"), rng.tensor_uniform(&[h * w, d], 1.0)), h, w))
                .collect()
        })
        .collect();
    let refs: Vec<f64> = (0..nq * nsrc * r * 2).map(|_| rng.uniform(0.05, 0.95)).collect();
    let hits: Vec<bool> = (0..nq * nsrc * r).map(|i| i % 3 != 1).collect();
    let weights = rng.tensor_uniform(&[nq, d], 1.0);
    let f = |g: &mut Graph<'_>| {
        let q = g.param(query)?;
        let mut sources = Vec::with_capacity(nsrc);
        for levels in &maps {
            let mut views = Vec::with_capacity(levels.len());
            for &(id, height, width) in levels {
                views.push(MapView { var: g.param(id)?, row_offset: 0, height, width });
            }
            sources.push(ValueSource { levels: views });
        }
        let plan = SamplingPlan { sources, refs_per_source: r, refs: refs.clone(), hits: hits.clone() };
        let out = attn.forward(g, q, plan, false)?.out;
        probe(g, out, &weights)
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

fn assemble_and_head(eps: f64) -> Result<GradReport> {
    let cfg = SceneConfig {
        slice_w: 3,
        slice_l: 2,
        num_slices: 2,
        voxel_w: 4,
        voxel_l: 3,
        voxel_h: 4,
        num_classes: 3,
        ..SceneConfig::default()
    };
    let d = 3;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let floor = store.add("floor", rng.tensor_uniform(&[12, d], 1.0));
    let ceiling = store.add("ceiling", rng.tensor_uniform(&[12, d], 1.0));
    let head = FcnHead::new(&mut store, &mut rng, d, 4, 3, 1);
    let weights = rng.tensor_uniform(&[48, 3], 1.0);
    let f = |g: &mut Graph<'_>| {
        let q = SliceQuerySet { floor: g.param(floor)?, ceiling: g.param(ceiling)?, num_slices: 2, tokens: 6 };
        let v = assemble_voxels(&mut g.tape, &q, &cfg)?;
        let p = decode(g, v, (4, 3, 4), &head)?;
        probe(g, p, &weights)
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

fn losses(eps: f64, which: usize) -> Result<GradReport> {
    let mut rng = Rng::new(3);
    let (n, c) = (12, 4);
    let mut store = ParamStore::new();
    let logits = store.add("logits", rng.tensor_uniform(&[n, c], 2.0));
    let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
    let f = |g: &mut Graph<'_>| {
        let x = g.param(logits)?;
        let p = g.tape.softmax(x)?;
        match which {
            0 => loss_ce(&mut g.tape, p, &labels),
            1 => Ok(loss_scal(&mut g.tape, p, &labels, ScalMode::Geometric)?.0),
            _ => Ok(loss_scal(&mut g.tape, p, &labels, ScalMode::Semantic)?.0),
        }
    };
    grad_check(f, &mut store, None, GradCheckOptions { eps, tol: OP_TOL, ..Default::default() })
}

/// Runs every per-op suite at step size `eps`.
pub fn op_suite(eps: f64) -> Result<Vec<NamedReport>> {
    let suites: [(&'static str, fn(f64) -> Result<GradReport>); 9] = [
        ("dense_ops", dense_ops),
        ("row_ops", row_ops),
        ("bilinear_sample", bilinear),
        ("trilinear_sample", trilinear),
        ("deformable_attention", deformable),
        ("assemble_and_head", assemble_and_head),
        ("loss_ce", |e| losses(e, 0)),
        ("loss_scal_geometric", |e| losses(e, 1)),
        ("loss_scal_semantic", |e| losses(e, 2)),
    ];
    suites
        .iter()
        .map(|&(name, run)| Ok(NamedReport { name, report: run(eps)? }))
        .collect()
}

/// One layer, two slabs of 4x4 tokens, two views, width 8, three classes.
pub fn toy_pipeline() -> Result<(ModelConfig, SceneSpec)> {
    let scene = SceneConfig {
        slice_w: 4,
        slice_l: 4,
        num_slices: 2,
        pillar_points: 2,
        num_classes: 3,
        layers: 1,
        num_views: 2,
        voxel_w: 4,
        voxel_l: 4,
        voxel_h: 4,
        ..SceneConfig::default()
    };
    let cfg = ModelConfig {
        scene,
        attention: AttentionConfig {
            d_model: 8,
            heads: 2,
            planar_points: 2,
            spatial_points: 2,
            ffn_hidden: 12,
            ..AttentionConfig::default()
        },
        head_width: 6,
        ..ModelConfig::default()
    };
    let spec = SceneSpec {
        num_objects: 2,
        image_size: (8, 6),
        ..SceneSpec::default()
    };
    cfg.validate()?;
    Ok((cfg, spec))
}

/// Model parameters and precomputed inputs for one scene.
pub fn build_model(cfg: &ModelConfig, scene: &SyntheticScene, seed: u64) -> Result<(ParamStore, SliceOccModel, SceneInputs)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(seed);
    let model = SliceOccModel::new(&mut store, &mut rng, cfg.clone())?;
    let rendered = render_views(&scene.objects, &scene.cameras, &cfg.renderer, cfg.scene.num_classes)?;
    let inputs = SceneInputs::prepare(&cfg.scene, &scene.cameras, rendered)?;
    Ok((store, model, inputs))
}

/// Replaces every sampling-offset parameter with uniform noise of the given
/// bound (in texels), so sampling points leave the texel centers where
/// bilinear interpolation has kinks.
pub fn randomize_offsets(store: &mut ParamStore, rng: &mut Rng, bound: f64) -> usize {
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| n.contains(".offset.")).map(|(id, _, _)| id).collect();
    for &id in &ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = rng.tensor_uniform(&shape, bound);
    }
    ids.len()
}

/// Total loss of a full forward pass against the scene labels, checked on up
/// to `entries_per_param` entries of every parameter.
pub fn pipeline_check(
    store: &mut ParamStore,
    model: &SliceOccModel,
    inputs: &SceneInputs,
    labels: &[u32],
    eps: f64,
    entries_per_param: Option<usize>,
) -> Result<GradReport> {
    let f = |g: &mut Graph<'_>| {
        let out = model.forward(g, inputs)?;
        Ok(total_loss(&mut g.tape, out.probs, labels)?.0)
    };
    let opts = GradCheckOptions {
        eps,
        tol: PIPELINE_TOL,
        max_entries_per_param: entries_per_param,
        ..Default::default()
    };
    grad_check(f, store, None, opts)
}

/// The toy pipeline check end to end: scene, model, randomized offsets.
pub fn toy_pipeline_check(seed: u64, eps: f64) -> Result<GradReport> {
    let (cfg, spec) = toy_pipeline()?;
    let scene = generate_scene(&cfg.scene, &spec, seed)?;
    let (mut store, model, inputs) = build_model(&cfg, &scene, seed)?;
    randomize_offsets(&mut store, &mut Rng::new(seed).fork(1), 0.4);
    pipeline_check(&mut store, &model, &inputs, &scene.gt.labels(), eps, None)
}
