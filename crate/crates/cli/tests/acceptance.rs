//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//! Failures only change the exit status when `ACCEPTANCE_STRICT=1` is set,
//! so the report stays part of an ordinary `cargo test` run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use sliceocc::attention::{DeformAttn, MapView, SamplerShape, SamplingPlan, SliceQuerySet, ValueSource};
use sliceocc::checks::{op_suite, toy_pipeline_check, OP_TOL, PIPELINE_TOL};
use sliceocc::geometry::SceneConfig;
use sliceocc::head::{assemble_voxels, default_class_names, miou, voxel_index, VoxelGrid};
use sliceocc::loss::{loss_ce, loss_scal, total_loss, ScalMode};
use sliceocc::numerics::{Graph, ParamId, ParamStore, Rng, Tape, Tensor};
use sliceocc::synth::{generate_scene, SceneSpec};
use sliceocc_cli::commands::{run_overfit, run_sweep, SweepAxis};
use sliceocc_cli::config::RunConfig;
use sliceocc_cli::grid_io::{decode_grid, encode_grid, export_grid, import_grid, HEADER_LEN};

type Outcome = (bool, String);

fn config(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{e:#}"))
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let mut op_worst: f64 = 0.0;
    for r in op_suite(1e-5).unwrap() {
        op_worst = op_worst.max(r.report.max_rel_err);
    }
    let pipe = toy_pipeline_check(7, 1e-5).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = op_worst < OP_TOL && pipe.passed && pipe.max_rel_err < PIPELINE_TOL && secs < 300.0;
    (
        ok,
        format!(
            "pipeline max rel err {:.2e} over {} entries (< {PIPELINE_TOL:e}), per-op max {op_worst:.2e} (< {OP_TOL:e}), {secs:.1}s",
            pipe.max_rel_err, pipe.entries_checked
        ),
    )
}

struct AttnFixture {
    attn: DeformAttn,
    query: ParamId,
    maps: Vec<Vec<(ParamId, usize, usize)>>,
    refs: Vec<f64>,
    hits: Vec<bool>,
    nq: usize,
    r: usize,
    d: usize,
}

fn attn_fixture(seed: u64) -> (ParamStore, AttnFixture) {
    let (d, nq, r, nsrc) = (8, 9, 2, 3);
    let shape = SamplerShape { heads: 2, levels: 2, points: 3 };
    let sizes = [(5, 7), (3, 4)];
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let attn = DeformAttn::new(&mut store, &mut rng, "attn", d, shape).unwrap();
    for id in [attn.offset.weight, attn.offset.bias] {
        let s = store.get(id).shape().to_vec();
        *store.get_mut(id) = rng.tensor_uniform(&s, 2.5);
    }
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
    let refs = (0..nq * nsrc * r * 2).map(|_| rng.uniform(0.0, 1.0)).collect();
    let hits = (0..nq * nsrc * r).map(|i| i < (nq - 1) * nsrc * r && rng.uniform(0.0, 1.0) < 0.6).collect();
    (store, AttnFixture { attn, query, maps, refs, hits, nq, r, d })
}

fn dense_linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (o, i) = (w.dim(0), w.dim(1));
    x.chunks_exact(i)
        .flat_map(|row| (0..o).map(move |k| b.data()[k] + (0..i).map(|j| w.data()[k * i + j] * row[j]).sum::<f64>()))
        .collect()
}

/// Gathers every texel of every map with its tent weight; no sparse taps.
fn dense_gather_oracle(s: &ParamStore, f: &AttnFixture) -> Vec<f64> {
    let sh = f.attn.shape;
    let (d, dh) = (f.d, f.d / sh.heads);
    let q = s.get(f.query).data();
    let off = dense_linear(q, s.get(f.attn.offset.weight), s.get(f.attn.offset.bias));
    let logit = dense_linear(q, s.get(f.attn.weight.weight), s.get(f.attn.weight.bias));
    let values: Vec<Vec<Vec<f64>>> = f
        .maps
        .iter()
        .map(|lv| lv.iter().map(|&(id, _, _)| dense_linear(s.get(id).data(), s.get(f.attn.value.weight), s.get(f.attn.value.bias))).collect())
        .collect();
    let nsrc = f.maps.len();
    let mut agg = vec![0.0; f.nq * d];
    for n in 0..f.nq {
        let usable = |src: usize, r: usize| f.hits[(n * nsrc + src) * f.r + r];
        let seen: Vec<usize> = (0..nsrc).filter(|&src| (0..f.r).any(|r| usable(src, r))).collect();
        for &src in &seen {
            for h in 0..sh.heads {
                let taps: Vec<(usize, usize)> = (0..sh.levels).flat_map(|l| (0..sh.points).map(move |p| (l, p))).filter(|&(_, p)| usable(src, p % f.r)).collect();
                let lg: Vec<f64> = taps.iter().map(|&(l, p)| logit[n * sh.weight_width() + h * sh.per_head() + l * sh.points + p]).collect();
                let m = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lg.iter().map(|x| (x - m).exp()).sum();
                for (&(l, p), &lv) in taps.iter().zip(&lg) {
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
                                agg[n * d + h * dh + c] += a * t * values[src][l][(i * ww + j) * d + h * dh + c] / seen.len() as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    dense_linear(&agg, s.get(f.attn.output.weight), s.get(f.attn.output.bias))
}

fn confusion_miou(pred: &[u32], gt: &[u32], c: usize) -> f64 {
    let mut m = vec![vec![0u64; c]; c];
    for (&p, &t) in pred.iter().zip(gt) {
        m[t as usize][p as usize] += 1;
    }
    let mut ious = Vec::new();
    for k in 0..c {
        let tp = m[k][k];
        let row: u64 = m[k].iter().sum();
        let col: u64 = (0..c).map(|r| m[r][k]).sum();
        if row + col > 0 {
            ious.push(tp as f64 / (row + col - tp) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn oracle_equivalence() -> Outcome {
    let mut attn_err: f64 = 0.0;
    for seed in 0..6 {
        let (store, f) = attn_fixture(seed);
        let mut g = Graph::new(&store);
        let q = g.param(f.query).unwrap();
        let sources = f
            .maps
            .iter()
            .map(|lv| ValueSource {
                levels: lv.iter().map(|&(id, height, width)| MapView { var: g.param(id).unwrap(), row_offset: 0, height, width }).collect(),
            })
            .collect();
        let plan = SamplingPlan { sources, refs_per_source: f.r, refs: f.refs.clone(), hits: f.hits.clone() };
        let out = f.attn.forward(&mut g, q, plan, false).unwrap().out;
        let want = dense_gather_oracle(&store, &f);
        for (a, b) in g.tape.data(out).iter().zip(&want) {
            attn_err = attn_err.max((a - b).abs());
        }
    }

    let mut miou_err: f64 = 0.0;
    let mut rng = Rng::new(2024);
    let trials = 1000;
    for _ in 0..trials {
        let c = 2 + rng.index(15);
        let dims = (1 + rng.index(6), 1 + rng.index(6), 1 + rng.index(6));
        let n = dims.0 * dims.1 * dims.2;
        let gt: Vec<u32> = (0..n).map(|_| rng.index(c) as u32).collect();
        let pred: Vec<u32> = gt.iter().map(|&t| if rng.uniform(0.0, 1.0) < 0.4 { t } else { rng.index(c) as u32 }).collect();
        let got = miou(&pred, &gt, c).unwrap().miou;
        miou_err = miou_err.max((got - confusion_miou(&pred, &gt, c)).abs());
    }

    let cfg = SceneConfig { num_classes: 6, num_views: 4, voxel_w: 40, voxel_l: 40, voxel_h: 16, ..SceneConfig::default() };
    let mut gt_mismatch = 0usize;
    let mut scenes = 0;
    for seed in 0..10u64 {
        let spec = SceneSpec { stacking: (seed % 4) as usize, ..SceneSpec::default() };
        let Ok(scene) = generate_scene(&cfg, &spec, seed) else { continue };
        scenes += 1;
        let labels = scene.gt.labels();
        let s = cfg.voxel_size();
        for ix in 0..cfg.voxel_w {
            for iy in 0..cfg.voxel_l {
                for iz in 0..cfg.voxel_h {
                    let p = [
                        cfg.x_range.0 + (ix as f64 + 0.5) * s[0],
                        cfg.y_range.0 + (iy as f64 + 0.5) * s[1],
                        cfg.z_range.0 + (iz as f64 + 0.5) * s[2],
                    ];
                    let mut want = 0;
                    for b in &scene.objects {
                        if (0..3).all(|a| b.min[a] <= p[a] && p[a] <= b.max[a]) {
                            want = b.class;
                        }
                    }
                    gt_mismatch += (labels[(ix * cfg.voxel_l + iy) * cfg.voxel_h + iz] != want) as usize;
                }
            }
        }
    }
    let ok = attn_err < 1e-10 && miou_err < 1e-12 && gt_mismatch == 0 && scenes >= 5;
    (
        ok,
        format!("attention max |diff| {attn_err:.1e}; mIoU max |diff| {miou_err:.1e} over {trials} grids; GT mismatches {gt_mismatch} over {scenes} scenes"),
    )
}

fn interpolation_exactness() -> Outcome {
    let mut rng = Rng::new(31);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for _ in 0..40 {
        let (w, l, s, m) = (1 + rng.index(6), 1 + rng.index(6), 1 + rng.index(4), 1 + rng.index(4));
        // voxel centers stay inside the hull of the cell centers when the
        // voxel lattice is no finer than the planes
        let (vw, vl) = (1 + rng.index(w), 1 + rng.index(l));
        let d = 1 + rng.index(3);
        let cfg = SceneConfig { slice_w: w, slice_l: l, num_slices: s, voxel_w: vw, voxel_l: vl, voxel_h: s * m, ..SceneConfig::default() };
        // per channel: (a + bx + cy + exy) * (1 + z profile linear inside each slab)
        let coef: Vec<[f64; 4]> = (0..d).map(|_| [0; 4].map(|_| rng.uniform(-1.0, 1.0))).collect();
        let knots: Vec<Vec<f64>> = (0..d).map(|_| (0..=s).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let h = cfg.slab_height();
        let planar = |ch: usize, x: f64, y: f64| {
            let k = coef[ch];
            k[0] + k[1] * x + k[2] * y + k[3] * x * y
        };
        let field = |ch: usize, x: f64, y: f64, z: f64| {
            let t = (z - cfg.z_range.0) / h;
            let i = (t.floor() as usize).min(s - 1);
            let f = t - i as f64;
            planar(ch, x, y) * (1.0 + knots[ch][i] * (1.0 - f) + knots[ch][i + 1] * f)
        };
        let (dx, dy) = cfg.cell_size();
        let mut floor = Vec::new();
        let mut ceil = Vec::new();
        for i in 0..s {
            for iy in 0..l {
                for ix in 0..w {
                    let (x, y) = (cfg.x_range.0 + (ix as f64 + 0.5) * dx, cfg.y_range.0 + (iy as f64 + 0.5) * dy);
                    for ch in 0..d {
                        floor.push(planar(ch, x, y) * (1.0 + knots[ch][i]));
                        ceil.push(planar(ch, x, y) * (1.0 + knots[ch][i + 1]));
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![s * w * l, d], floor).unwrap()).unwrap();
        let c = tape.constant(Tensor::new(vec![s * w * l, d], ceil).unwrap()).unwrap();
        let q = SliceQuerySet { floor: f, ceiling: c, num_slices: s, tokens: w * l };
        let v = assemble_voxels(&mut tape, &q, &cfg).unwrap();
        let out = tape.data(v);
        let dims = (vw, vl, s * m);
        for ix in 0..vw {
            for iy in 0..vl {
                for iz in 0..s * m {
                    let p = cfg.voxel_center(ix, iy, iz);
                    for ch in 0..d {
                        worst = worst.max((out[voxel_index(dims, ix, iy, iz) * d + ch] - field(ch, p[0], p[1], p[2])).abs());
                    }
                }
            }
        }
        trials += 1;
    }
    (worst < 1e-9, format!("max |error| {worst:.1e} over {trials} random slab-linear fields (< 1e-9)"))
}

fn overfit_run() -> Outcome {
    let cfg = config("overfit.cfg");
    let t = Instant::now();
    let o = run_overfit(&cfg, None, |r| eprintln!("    [overfit] step {:>4} mIoU {:.4} acc {:.4}", r.step, r.miou, r.accuracy)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ok = o.accuracy >= 0.95 && o.miou >= 0.85 && cfg.steps <= 3000 && cfg.optimizer.lr == 1e-4 && secs <= 900.0;
    (ok, format!("{} steps at lr {:e}: accuracy {:.4} (>= 0.95), mIoU {:.4} (>= 0.85), {secs:.0}s", cfg.steps, cfg.optimizer.lr, o.accuracy, o.miou))
}

fn sweep(cfg_name: &str, axis: SweepAxis, values: &[usize]) -> (Vec<f64>, f64, usize) {
    let cfg = config(cfg_name);
    let t = Instant::now();
    let rows = run_sweep(&cfg, axis, values, None, |v, r| eprintln!("    [{}={v}] step {:>4} mIoU {:.4}", axis.name(), r.step, r.miou)).unwrap();
    (rows.iter().map(|r| r.miou).collect(), t.elapsed().as_secs_f64(), cfg.steps)
}

fn slice_trend() -> Outcome {
    let (m, secs, steps) = sweep("slices.cfg", SweepAxis::Slices, &[1, 2, 4]);
    let ok = m[0] <= m[1] && m[1] <= m[2] && m[2] - m[0] >= 0.05 && secs <= 2700.0;
    (ok, format!("mIoU at S=1,2,4 after {steps} steps: {:.4}, {:.4}, {:.4}; S4-S1 {:+.4} (>= 0.05), {secs:.0}s", m[0], m[1], m[2], m[2] - m[0]))
}

fn layer_trend() -> Outcome {
    let (m, secs, steps) = sweep("overfit.cfg", SweepAxis::Layers, &[1, 3]);
    (m[1] >= m[0] - 0.01, format!("mIoU with 1 and 3 layers after {steps} steps: {:.4}, {:.4} (3-layer >= 1-layer - 0.01), {secs:.0}s", m[0], m[1]))
}

fn loss_identities() -> Outcome {
    let mut rng = Rng::new(5);
    let mut additive = true;
    for _ in 0..50 {
        let (n, c) = (2 + rng.index(30), 2 + rng.index(6));
        let probs: Vec<f64> = (0..n)
            .flat_map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.uniform(0.01, 1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(move |v| v / s)
            })
            .collect();
        let mut labels: Vec<u32> = (0..n).map(|_| rng.index(c) as u32).collect();
        labels[0] = 1;
        let mut t = Tape::new();
        let p = t.constant(Tensor::new(vec![n, c], probs).unwrap()).unwrap();
        let (total, r) = total_loss(&mut t, p, &labels).unwrap();
        additive &= r.l_total == r.l_ce + r.l_geo + r.l_sem && t.value(total).item() == r.l_total;
    }

    let c = 82;
    let mut t = Tape::new();
    let p = t.constant(Tensor::full(&[7, c], 1.0 / c as f64)).unwrap();
    let ce = loss_ce(&mut t, p, &[0, 1, 5, 81, 40, 2, 2]).unwrap();
    let ce_err = (t.value(ce).item() - (c as f64).ln()).abs();

    let labels = [0u32, 3, 1, 2, 3, 0];
    let onehot: Vec<f64> = labels.iter().flat_map(|&l| (0..4).map(move |k| if k == l as usize { 1.0 } else { 0.0 })).collect();
    let mut t = Tape::new();
    let p = t.constant(Tensor::new(vec![6, 4], onehot).unwrap()).unwrap();
    let (perfect, _) = total_loss(&mut t, p, &labels).unwrap();
    let perfect = t.value(perfect).item();

    let mut t = Tape::new();
    let p = t.constant(Tensor::new(vec![4, 3], [0.5, 0.25, 0.25].repeat(4)).unwrap()).unwrap();
    let (geo, _) = loss_scal(&mut t, p, &[0, 1, 2, 0], ScalMode::Geometric).unwrap();
    let geo_err = (t.value(geo).item() - 3.0 * 2f64.ln()).abs();

    let ok = additive && ce_err < 1e-9 && perfect <= 1e-6 && geo_err < 1e-9;
    (ok, format!("additivity exact: {additive}; |CE - ln 82| {ce_err:.1e}; perfect total {perfect:.1e}; |geo - 3 ln 2| {geo_err:.1e}"))
}

fn determinism() -> Outcome {
    let mut cfg = config("toy.cfg");
    cfg.steps = 20;
    cfg.eval_every = 5;
    cfg.optimizer.lr = 1e-3;
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_overfit(&cfg, Some(&a), |_| {}).unwrap();
    run_overfit(&cfg, Some(&b), |_| {}).unwrap();
    let files = ["metrics.csv", "pred.socc", "pred.json", "gt.socc", "gt.json", "checkpoint.json"];
    let same: Vec<bool> = files.iter().map(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap()).collect();
    let ok = same.iter().all(|&s| s);
    let listed: Vec<String> = files.iter().zip(&same).map(|(f, s)| format!("{f}:{}", if *s { "same" } else { "DIFF" })).collect();
    (ok, listed.join(" "))
}

fn format_checks() -> Outcome {
    let mut rng = Rng::new(77);
    let mut lossless = true;
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    for i in 0..200 {
        let dims = (1 + rng.index(9), 1 + rng.index(9), 1 + rng.index(9));
        let c = 1 + rng.index(255);
        let n = dims.0 * dims.1 * dims.2;
        let grid = VoxelGrid::from_indices(dims, default_class_names(c), (0..n).map(|_| rng.index(c) as u32).collect()).unwrap();
        let bytes = encode_grid(&grid).unwrap();
        lossless &= decode_grid(&bytes, Some(grid.class_names.clone())).unwrap() == grid;
        if i % 20 == 0 {
            let path = dir.path().join(format!("g{i}.socc"));
            export_grid(&grid, &path, &cfg).unwrap();
            lossless &= import_grid(&path).unwrap() == grid;
        }
    }
    let big = VoxelGrid::from_indices((40, 40, 16), default_class_names(81), vec![0; 25_600]).unwrap();
    let path = dir.path().join("big.socc");
    export_grid(&big, &path, &cfg).unwrap();
    let size = std::fs::metadata(&path).unwrap().len();
    let ok = lossless && size == 25_618 && HEADER_LEN == 18;
    (ok, format!("200 random grids round-trip losslessly: {lossless}; 40x40x16 file is {size} bytes (25,618 expected)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 interpolation exactness", interpolation_exactness),
        ("4 end-to-end overfit", overfit_run),
        ("5 slice-number trend", slice_trend),
        ("6 layer trend", layer_trend),
        ("7 loss identities", loss_identities),
        ("8 determinism", determinism),
        ("9 grid format", format_checks),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!ok);
        println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
