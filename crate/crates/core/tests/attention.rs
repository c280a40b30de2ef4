use sliceocc::attention::{DeformAttn, MapView, SamplerShape, SamplingPlan, ValueSource};
use sliceocc::numerics::{grad_check, GradCheckOptions, Graph, ParamId, ParamStore, Rng, Tensor, Var};

struct Fixture {
    attn: DeformAttn,
    query: ParamId,
    maps: Vec<Vec<(ParamId, usize, usize)>>,
    refs: Vec<f64>,
    hits: Vec<bool>,
    nq: usize,
    r: usize,
    d: usize,
}

fn fixture(seed: u64, offset_scale: f64) -> (ParamStore, Fixture) {
    let (d, nq, r, nsrc) = (8, 7, 2, 3);
    let shape = SamplerShape { heads: 2, levels: 2, points: 3 };
    let sizes = [(5, 6), (3, 4)];
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut rng, "attn", d, shape).unwrap();
    let ow = store.get_mut(attn.offset.weight);
    *ow = rng.tensor_uniform(ow.shape(), offset_scale);
    let ob = store.get_mut(attn.offset.bias);
    *ob = rng.tensor_uniform(ob.shape(), offset_scale);
    let query = store.add("query", rng.tensor_uniform(&[nq, d], 1.0));
    let maps = (0..nsrc)
        .map(|s| {
            sizes
                .iter()
                .enumerate()
                .map(|(l, &(h, w))| (store.add(format!("map{s}.{l}"), rng.tensor_uniform(&[h * w, d], 1.0)), h, w))
                .collect()
        })
        .collect();
    let mut refs = Vec::new();
    let mut hits = Vec::new();
    for n in 0..nq {
        for _ in 0..nsrc {
            for _ in 0..r {
                refs.push(rng.uniform(0.0, 1.0));
                refs.push(rng.uniform(0.0, 1.0));
                // the last query is seen by no source
                hits.push(n + 1 < nq && rng.uniform(0.0, 1.0) < 0.6);
            }
        }
    }
    (store, Fixture { attn, query, maps, refs, hits, nq, r, d })
}

fn plan(f: &Fixture, g: &mut Graph<'_>) -> SamplingPlan {
    let sources = f
        .maps
        .iter()
        .map(|levels| ValueSource {
            levels: levels
                .iter()
                .map(|&(id, h, w)| MapView { var: g.param(id).unwrap(), row_offset: 0, height: h, width: w })
                .collect(),
        })
        .collect();
    SamplingPlan { sources, refs_per_source: f.r, refs: f.refs.clone(), hits: f.hits.clone() }
}

fn run(f: &Fixture, g: &mut Graph<'_>) -> Var {
    let q = g.param(f.query).unwrap();
    let p = plan(f, g);
    f.attn.forward(g, q, p, false).unwrap().out
}

fn linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.dim(0), w.dim(1));
    x.chunks_exact(i)
        .flat_map(|row| (0..o).map(move |k| b.data()[k] + (0..i).map(|j| w.data()[k * i + j] * row[j]).sum::<f64>()))
        .collect()
}

/// Project every map first, then sample it with a brute-force tent filter
/// over all texels (zero outside the lattice).
fn oracle(s: &ParamStore, f: &Fixture) -> Vec<f64> {
    let sh = f.attn.shape;
    let d = f.d;
    let dh = d / sh.heads;
    let q = s.get(f.query).data();
    let off = linear(q, s.get(f.attn.offset.weight), s.get(f.attn.offset.bias));
    let logit = linear(q, s.get(f.attn.weight.weight), s.get(f.attn.weight.bias));
    let projected: Vec<Vec<Vec<f64>>> = f
        .maps
        .iter()
        .map(|lv| lv.iter().map(|&(id, _, _)| linear(s.get(id).data(), s.get(f.attn.value.weight), s.get(f.attn.value.bias))).collect())
        .collect();
    let nsrc = f.maps.len();
    let mut agg = vec![0.0; f.nq * d];
    for n in 0..f.nq {
        let usable = |src: usize, r: usize| f.hits[(n * nsrc + src) * f.r + r];
        let hit: Vec<usize> = (0..nsrc).filter(|&src| (0..f.r).any(|r| usable(src, r))).collect();
        for &src in &hit {
            for h in 0..sh.heads {
                let ks: Vec<(usize, usize)> = (0..sh.levels)
                    .flat_map(|l| (0..sh.points).map(move |p| (l, p)))
                    .filter(|&(_, p)| usable(src, p % f.r))
                    .collect();
                let lg: Vec<f64> = ks.iter().map(|&(l, p)| logit[n * sh.weight_width() + h * sh.per_head() + l * sh.points + p]).collect();
                let m = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lg.iter().map(|x| (x - m).exp()).sum();
                for (&(l, p), &lv) in ks.iter().zip(&lg) {
                    let a = (lv - m).exp() / z;
                    let (_, hh, ww) = f.maps[src][l];
                    let ri = (n * nsrc + src) * f.r + p % f.r;
                    let oi = n * sh.offset_width() + ((h * sh.levels + l) * sh.points + p) * 2;
                    let x = f.refs[2 * ri] * (ww - 1) as f64 + off[oi];
                    let y = f.refs[2 * ri + 1] * (hh - 1) as f64 + off[oi + 1];
                    for i in 0..hh {
                        for j in 0..ww {
                            let t = (1.0 - (x - j as f64).abs()).max(0.0) * (1.0 - (y - i as f64).abs()).max(0.0);
                            for c in 0..dh {
                                agg[n * d + h * dh + c] += a * t * projected[src][l][(i * ww + j) * d + h * dh + c] / hit.len() as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    linear(&agg, s.get(f.attn.output.weight), s.get(f.attn.output.bias))
}

#[test]
fn fused_attention_matches_dense_oracle() {
    for seed in 0..4 {
        let (store, f) = fixture(seed, 3.0);
        let mut g = Graph::new(&store);
        let out = run(&f, &mut g);
        let got = g.tape.data(out);
        let want = oracle(&store, &f);
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
        }
        // the unseen query collapses to the output bias
        let bias = store.get(f.attn.output.bias).data();
        assert_eq!(&got[(f.nq - 1) * f.d..], bias);
    }
}

#[test]
fn zero_offsets_sample_at_references() {
    let (store, f) = fixture(9, 0.0);
    let mut g = Graph::new(&store);
    let q = g.param(f.query).unwrap();
    let p = plan(&f, &mut g);
    let res = f.attn.forward(&mut g, q, p, true).unwrap();
    let locs = res.locations.unwrap();
    let sh = f.attn.shape;
    let nsrc = f.maps.len();
    let mut checked = 0;
    for n in 0..f.nq {
        for s in 0..nsrc {
            for h in 0..sh.heads {
                for k in 0..sh.per_head() {
                    let ri = (n * nsrc + s) * f.r + (k % sh.points) % f.r;
                    if !f.hits[ri] || !res.has_hit[n] {
                        continue;
                    }
                    let li = (((n * nsrc + s) * sh.heads + h) * sh.per_head() + k) * 2;
                    assert_eq!(locs[li], f.refs[2 * ri]);
                    assert_eq!(locs[li + 1], f.refs[2 * ri + 1]);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (mut store, f) = fixture(3, 0.7);
    let weights = Rng::new(77).tensor_uniform(&[f.nq, f.d], 1.0);
    let loss = |g: &mut Graph<'_>| {
        let out = run(&f, g);
        let w = g.tape.constant(weights.clone())?;
        let m = g.tape.mul(out, w)?;
        g.tape.sum(m)
    };
    let report = grad_check(loss, &mut store, None, GradCheckOptions { tol: 1e-5, ..Default::default() }).unwrap();
    assert!(report.passed, "{report}");
}
