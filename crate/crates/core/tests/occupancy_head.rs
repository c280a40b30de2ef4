use proptest::prelude::*;
use sliceocc::attention::SliceQuerySet;
use sliceocc::geometry::SceneConfig;
use sliceocc::head::{assemble_voxels, decode, miou, to_channel_first, voxel_index, FcnHead, VoxelGrid, VoxelPayload};
use sliceocc::numerics::{grad_check, GradCheckOptions, Graph, ParamStore, Rng, Tape, Tensor};

/// Confusion-matrix mIoU, written independently of the library.
fn oracle_miou(pred: &[u32], gt: &[u32], c: usize) -> f64 {
    let mut m = vec![vec![0u64; c]; c];
    for (&p, &t) in pred.iter().zip(gt) {
        m[t as usize][p as usize] += 1;
    }
    let mut ious = Vec::new();
    for k in 0..c {
        let tp = m[k][k];
        let fn_: u64 = m[k].iter().sum::<u64>() - tp;
        let fp: u64 = (0..c).map(|r| m[r][k]).sum::<u64>() - tp;
        if tp + fn_ + fp > 0 {
            ious.push(tp as f64 / (tp + fn_ + fp) as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn miou_matches_confusion_matrix(c in 2usize..=16, seed in any::<u64>(), n in 1usize..200) {
        let mut rng = Rng::new(seed);
        let gt: Vec<u32> = (0..n).map(|_| rng.index(c) as u32).collect();
        let pred: Vec<u32> = (0..n).map(|_| if rng.uniform(0.0, 1.0) < 0.5 { gt[rng.index(n)] } else { rng.index(c) as u32 }).collect();
        let got = miou(&pred, &gt, c).unwrap().miou;
        prop_assert!((got - oracle_miou(&pred, &gt, c)).abs() < 1e-12);
    }
}

fn plane_config(s: usize, vh: usize, w: usize, l: usize) -> SceneConfig {
    SceneConfig { slice_w: w, slice_l: l, num_slices: s, voxel_w: w, voxel_l: l, voxel_h: vh, ..SceneConfig::default() }
}

proptest! {
    /// Fields bilinear in (x, y) and piecewise linear in z with kinks only at
    /// slab boundaries are reproduced exactly.
    #[test]
    fn assembly_reproduces_slab_linear_fields(
        s in 1usize..5,
        m in 1usize..4,
        w in 1usize..6,
        l in 1usize..6,
        seed in any::<u64>(),
    ) {
        let cfg = plane_config(s, s * m, w, l);
        let mut rng = Rng::new(seed);
        let d = 3;
        // per channel: a + bx + cy + exy, plus an independent value per slab boundary scaled by (1 + x)
        let coef: Vec<[f64; 4]> = (0..d).map(|_| [0; 4].map(|_| rng.uniform(-1.0, 1.0))).collect();
        let knots: Vec<Vec<f64>> = (0..d).map(|_| (0..=s).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect();
        let h = cfg.height();
        let field = |ch: usize, x: f64, y: f64, z: f64| {
            let [a, b, c, e] = coef[ch];
            let u = (z - cfg.z_range.0) / h * s as f64;
            let i = (u.floor() as usize).min(s - 1);
            let t = u - i as f64;
            let zpart = (1.0 - t) * knots[ch][i] + t * knots[ch][i + 1];
            a + b * x + c * y + e * x * y + zpart * (1.0 + 0.5 * x)
        };
        let (dx, dy) = cfg.cell_size();
        let np = w * l;
        let mut floor = vec![0.0; s * np * d];
        let mut ceil = vec![0.0; s * np * d];
        for i in 0..s {
            for iy in 0..l {
                for ix in 0..w {
                    let x = cfg.x_range.0 + (ix as f64 + 0.5) * dx;
                    let y = cfg.y_range.0 + (iy as f64 + 0.5) * dy;
                    let z0 = cfg.z_range.0 + i as f64 * cfg.slab_height();
                    for ch in 0..d {
                        let row = (i * np + iy * w + ix) * d + ch;
                        floor[row] = field(ch, x, y, z0);
                        // evaluate just below the next boundary's limit from this slab
                        let [a, b, c, e] = coef[ch];
                        ceil[row] = a + b * x + c * y + e * x * y + knots[ch][i + 1] * (1.0 + 0.5 * x);
                    }
                }
            }
        }
        let mut tape = Tape::new();
        let f = tape.input(Tensor::new(vec![s * np, d], floor).unwrap()).unwrap();
        let c = tape.input(Tensor::new(vec![s * np, d], ceil).unwrap()).unwrap();
        let q = SliceQuerySet { floor: f, ceiling: c, num_slices: s, tokens: np };
        let vox = assemble_voxels(&mut tape, &q, &cfg).unwrap();
        let out = tape.data(vox);
        let dims = (w, l, s * m);
        for ix in 0..w {
            for iy in 0..l {
                for iz in 0..s * m {
                    let p = cfg.voxel_center(ix, iy, iz);
                    for ch in 0..d {
                        let got = out[voxel_index(dims, ix, iy, iz) * d + ch];
                        prop_assert!((got - field(ch, p[0], p[1], p[2])).abs() < 1e-9);
                    }
                }
            }
        }
    }
}

#[test]
fn assembly_blends_floor_and_ceiling() {
    let cfg = plane_config(2, 2, 3, 2);
    let mut tape = Tape::new();
    let f = tape.input(Tensor::zeros(&[12, 2])).unwrap();
    let c = tape.input(Tensor::full(&[12, 2], 1.0)).unwrap();
    let q = SliceQuerySet { floor: f, ceiling: c, num_slices: 2, tokens: 6 };
    let v = assemble_voxels(&mut tape, &q, &cfg).unwrap();
    assert!(tape.data(v).iter().all(|&x| (x - 0.5).abs() < 1e-15));
    let bad = SceneConfig { voxel_h: 3, ..cfg };
    assert!(assemble_voxels(&mut tape, &q, &bad).is_err());
}

#[test]
fn assembly_and_head_gradients() {
    let cfg = SceneConfig { slice_w: 3, slice_l: 2, num_slices: 2, voxel_w: 4, voxel_l: 3, voxel_h: 4, num_classes: 3, ..SceneConfig::default() };
    let d = 3;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let fl = store.add("floor", rng.tensor_uniform(&[12, d], 1.0));
    let ce = store.add("ceiling", rng.tensor_uniform(&[12, d], 1.0));
    let head = FcnHead::new(&mut store, &mut rng, d, 4, 3, 1);
    let weights = rng.tensor_uniform(&[48, 3], 1.0);
    let loss = |g: &mut Graph<'_>| {
        let q = SliceQuerySet { floor: g.param(fl)?, ceiling: g.param(ce)?, num_slices: 2, tokens: 6 };
        let v = assemble_voxels(&mut g.tape, &q, &cfg)?;
        let p = decode(g, v, (4, 3, 4), &head)?;
        let w = g.tape.constant(weights.clone())?;
        let m = g.tape.mul(p, w)?;
        g.tape.sum(m)
    };
    let r = grad_check(loss, &mut store, None, GradCheckOptions { tol: 1e-6, ..Default::default() }).unwrap();
    assert!(r.passed, "{r}");
}

#[test]
fn decode_examples() {
    let dims = (3, 2, 2);
    let (d, c) = (4, 5);
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1);
    let head = FcnHead::new(&mut store, &mut rng, d, d, c, 1);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let feats = rng.tensor_uniform(&[12, d], 1.0);
    let run = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let x = g.tape.input(feats.clone()).unwrap();
        let p = decode(&mut g, x, dims, &head).unwrap();
        assert_eq!(g.tape.shape(p), &[12, c]);
        g.tape.data(p).to_vec()
    };
    assert!(run(&store).iter().all(|&p| (p - 0.2).abs() < 1e-15));
    let mut b = vec![0.0; c];
    b[3] = 1.0;
    *store.get_mut(head.classifier.bias) = Tensor::new(vec![c], b).unwrap();
    let probs = run(&store);
    let grid = VoxelGrid::from_probabilities(dims, sliceocc::head::default_class_names(c), probs).unwrap();
    assert!(grid.labels().iter().all(|&k| k == 3));
}

#[test]
fn decode_keeps_spatial_dims_and_simplices() {
    let dims = (4, 3, 2);
    let mut store = ParamStore::new();
    let mut rng = Rng::new(2);
    let head = FcnHead::new(&mut store, &mut rng, 6, 5, 7, 2);
    let mut g = Graph::new(&store);
    let x = g.tape.input(rng.tensor_uniform(&[24, 6], 3.0)).unwrap();
    let p = decode(&mut g, x, dims, &head).unwrap();
    let t = g.tape.value(p).clone();
    assert_eq!(t.shape(), &[24, 7]);
    for row in t.data().chunks_exact(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
    assert_eq!(to_channel_first(&t, dims).unwrap().shape(), &[7, 4, 3, 2]);
}

#[test]
fn conv_matches_direct_convolution() {
    let dims = (3, 4, 2);
    let (ci, co) = (2, 3);
    let mut rng = Rng::new(9);
    let x = rng.tensor_uniform(&[24, ci], 1.0);
    let w = rng.tensor_uniform(&[co, 27 * ci], 1.0);
    let b = rng.tensor_uniform(&[co], 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.input(x.clone()).unwrap(), tape.input(w.clone()).unwrap(), tape.input(b.clone()).unwrap());
    let y = sliceocc::head::conv3d(&mut tape, xv, dims, wv, bv).unwrap();
    let got = tape.data(y);
    for ix in 0..3i64 {
        for iy in 0..4i64 {
            for iz in 0..2i64 {
                for o in 0..co {
                    let mut acc = b.data()[o];
                    for (k, (dx, dy, dz)) in (-1..=1).flat_map(|a| (-1..=1).flat_map(move |b| (-1..=1).map(move |c| (a, b, c)))).enumerate() {
                        let (x2, y2, z2) = (ix + dx, iy + dy, iz + dz);
                        if x2 < 0 || y2 < 0 || z2 < 0 || x2 >= 3 || y2 >= 4 || z2 >= 2 {
                            continue;
                        }
                        let src = voxel_index(dims, x2 as usize, y2 as usize, z2 as usize);
                        for c in 0..ci {
                            acc += w.data()[o * 27 * ci + k * ci + c] * x.data()[src * ci + c];
                        }
                    }
                    let row = voxel_index(dims, ix as usize, iy as usize, iz as usize);
                    assert!((got[row * co + o] - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn grid_validation() {
    let names = sliceocc::head::default_class_names(3);
    assert!(VoxelGrid::from_indices((1, 1, 2), names.clone(), vec![0, 3]).is_err());
    assert!(VoxelGrid::from_probabilities((1, 1, 1), names.clone(), vec![0.5, 0.4, 0.0]).is_err());
    let g = VoxelGrid::from_indices((1, 1, 2), names, vec![2, 1]).unwrap();
    assert_eq!(g.label(0, 0, 1), 1);
    assert!(matches!(g.payload, VoxelPayload::Indices(_)));
}
