//! Voxel assembly from slab planes, the 3D convolutional head, and metrics.
//!
//! Voxel tensors are channel-last with voxels ordered x-major, z-minor:
//! voxel `(ix, iy, iz)` is row `(ix * L_v + iy) * H_v + iz`.

use serde::{Deserialize, Serialize};

use crate::attention::SliceQuerySet;
use crate::error::{shape_err, Error, Result};
use crate::geometry::SceneConfig;
use crate::numerics::sample::{bilinear_taps, cell_to_texel, Taps};
use crate::numerics::{Backward, BackwardCtx, Graph, LinearLayer, ParamStore, Rng, Tape, Tensor, Var};

/// Lattice dimensions `(W, L, H_v)` of a voxel grid.
pub type Dims = (usize, usize, usize);

#[inline]
pub fn voxel_index(dims: Dims, ix: usize, iy: usize, iz: usize) -> usize {
    (ix * dims.1 + iy) * dims.2 + iz
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VoxelPayload {
    /// One class index per voxel.
    Indices(Vec<u32>),
    /// `[voxels, C]` class probabilities.
    Probabilities(Vec<f64>),
}

/// Occupancy grid with either hard labels or per-class probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: Dims,
    pub class_names: Vec<String>,
    pub payload: VoxelPayload,
}

/// `"empty"`, then `class_1 .. class_{C-1}`.
pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| if c == 0 { "empty".to_string() } else { format!("class_{c}") })
        .collect()
}

impl VoxelGrid {
    pub fn from_indices(dims: Dims, class_names: Vec<String>, indices: Vec<u32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if indices.len() != n {
            return Err(shape_err("VoxelGrid", n, indices.len()));
        }
        let c = class_names.len();
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= c) {
            return Err(Error::InvalidConfig(format!("class index {bad} out of range for C={c}")));
        }
        Ok(Self {
            dims,
            class_names,
            payload: VoxelPayload::Indices(indices),
        })
    }

    pub fn from_probabilities(dims: Dims, class_names: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        let c = class_names.len();
        let n = dims.0 * dims.1 * dims.2;
        if probs.len() != n * c {
            return Err(shape_err("VoxelGrid", n * c, probs.len()));
        }
        for row in probs.chunks_exact(c) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidConfig(format!("voxel probabilities do not form a simplex (sum {s})")));
            }
        }
        Ok(Self {
            dims,
            class_names,
            payload: VoxelPayload::Probabilities(probs),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Hard labels; probabilities are reduced by argmax (lowest index on ties).
    pub fn labels(&self) -> Vec<u32> {
        match &self.payload {
            VoxelPayload::Indices(ix) => ix.clone(),
            VoxelPayload::Probabilities(p) => argmax_rows(p, self.num_classes()),
        }
    }

    pub fn to_indices(&self) -> Self {
        Self {
            dims: self.dims,
            class_names: self.class_names.clone(),
            payload: VoxelPayload::Indices(self.labels()),
        }
    }

    pub fn label(&self, ix: usize, iy: usize, iz: usize) -> u32 {
        let i = voxel_index(self.dims, ix, iy, iz);
        match &self.payload {
            VoxelPayload::Indices(v) => v[i],
            VoxelPayload::Probabilities(p) => {
                let c = self.num_classes();
                argmax_rows(&p[i * c..(i + 1) * c], c)[0]
            }
        }
    }
}

pub fn argmax_rows(x: &[f64], cols: usize) -> Vec<u32> {
    x.chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}

struct AssembleOp {
    floor: Var,
    ceiling: Var,
    /// Per voxel: slab row offset and blend factor.
    slab: Vec<(usize, f64)>,
    /// Per `(ix, iy)` column.
    taps: Vec<Taps<2>>,
    voxel_h: usize,
}

impl Backward for AssembleOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let d = ctx.value(self.floor).shape()[1];
        for (plane, is_ceiling) in [(self.floor, false), (self.ceiling, true)] {
            if !ctx.requires_grad(plane) {
                continue;
            }
            let gp = ctx.grad_mut(plane);
            for (col, taps) in self.taps.iter().enumerate() {
                for iz in 0..self.voxel_h {
                    let vox = col * self.voxel_h + iz;
                    let (off, t) = self.slab[vox];
                    let w = if is_ceiling { t } else { 1.0 - t };
                    let gv = &g[vox * d..(vox + 1) * d];
                    for tap in taps.iter() {
                        let base = (off + tap.index) * d;
                        let k = w * tap.weight;
                        for (dst, x) in gp[base..base + d].iter_mut().zip(gv) {
                            *dst += k * x;
                        }
                    }
                }
            }
        }
    }
}

/// Blend factors of the voxel layers inside one slab: `(k + 0.5) / m` for
/// `m = H_v / S` layers.
pub fn blend_factors(cfg: &SceneConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let m = cfg.voxel_h / cfg.num_slices;
    Ok((0..m).map(|k| (k as f64 + 0.5) / m as f64).collect())
}

/// Interpolates voxel features `[voxels, D]` from the slab planes.
///
/// A voxel center's slab supplies a floor and a ceiling plane. Both are
/// sampled bilinearly at the center's (x, y) and blended linearly by the
/// center's fractional height inside the slab.
pub fn assemble_voxels(tape: &mut Tape, q: &SliceQuerySet, cfg: &SceneConfig) -> Result<Var> {
    cfg.validate()?;
    let np = cfg.tokens_per_plane();
    if q.tokens != np || q.num_slices != cfg.num_slices {
        return Err(shape_err("assemble_voxels", format!("{} slabs of {np} tokens", cfg.num_slices), format!("{} of {}", q.num_slices, q.tokens)));
    }
    let d = tape.shape(q.floor)[1];
    if tape.shape(q.floor) != [cfg.num_slices * np, d] || tape.shape(q.ceiling) != tape.shape(q.floor) {
        return Err(shape_err("assemble_voxels", format!("planes [{}, {d}]", cfg.num_slices * np), format!("{:?}", tape.shape(q.ceiling))));
    }
    let (vw, vl, vh) = (cfg.voxel_w, cfg.voxel_l, cfg.voxel_h);
    let m = vh / cfg.num_slices;
    let blend = blend_factors(cfg)?;
    let slab: Vec<(usize, f64)> = (0..vw * vl)
        .flat_map(|_| (0..vh).map(|iz| ((iz / m) * np, blend[iz % m])))
        .collect();
    let mut taps = Vec::with_capacity(vw * vl);
    for ix in 0..vw {
        for iy in 0..vl {
            let u = cell_to_texel((ix as f64 + 0.5) / vw as f64, cfg.slice_w);
            let v = cell_to_texel((iy as f64 + 0.5) / vl as f64, cfg.slice_l);
            taps.push(bilinear_taps(u, v, cfg.slice_l, cfg.slice_w));
        }
    }
    let fl = tape.data(q.floor);
    let ce = tape.data(q.ceiling);
    let mut out = vec![0.0; vw * vl * vh * d];
    for (col, tp) in taps.iter().enumerate() {
        for iz in 0..vh {
            let vox = col * vh + iz;
            let (off, t) = slab[vox];
            let row = &mut out[vox * d..(vox + 1) * d];
            for tap in tp.iter() {
                let base = (off + tap.index) * d;
                let (wf, wc) = ((1.0 - t) * tap.weight, t * tap.weight);
                for ((o, a), b) in row.iter_mut().zip(&fl[base..base + d]).zip(&ce[base..base + d]) {
                    *o += wf * a + wc * b;
                }
            }
        }
    }
    let value = Tensor::new(vec![vw * vl * vh, d], out)?;
    let (floor, ceiling) = (q.floor, q.ceiling);
    tape.push_op(
        "assemble_voxels",
        value,
        &[floor, ceiling],
        AssembleOp {
            floor,
            ceiling,
            slab,
            taps,
            voxel_h: vh,
        },
    )
}

/// Reorders a channel-last `[voxels, D]` tensor to `[D, W, L, H_v]`.
pub fn to_channel_first(x: &Tensor, dims: Dims) -> Result<Tensor> {
    let n = dims.0 * dims.1 * dims.2;
    if x.shape().len() != 2 || x.dim(0) != n {
        return Err(shape_err("to_channel_first", format!("[{n}, D]"), format!("{:?}", x.shape())));
    }
    let d = x.dim(1);
    let src = x.data();
    Tensor::new(vec![d, dims.0, dims.1, dims.2], (0..d * n).map(|i| src[(i % n) * d + i / n]).collect())
}

struct Im2colOp {
    x: Var,
    /// Per output row and kernel tap, the source voxel (if inside).
    index: Vec<Option<u32>>,
    channels: usize,
}

impl Backward for Im2colOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let c = self.channels;
        let gx = ctx.grad_mut(self.x);
        for (slot, src) in self.index.iter().enumerate() {
            if let Some(s) = src {
                let s = *s as usize;
                for (d, v) in gx[s * c..(s + 1) * c].iter_mut().zip(&g[slot * c..(slot + 1) * c]) {
                    *d += v;
                }
            }
        }
    }
}

/// Zero-padded `3x3x3` neighborhoods: `[voxels, 27 * C]`, kernel tap
/// `((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1)` first.
pub fn im2col3(tape: &mut Tape, x: Var, dims: Dims) -> Result<Var> {
    let n = dims.0 * dims.1 * dims.2;
    let s = tape.shape(x);
    if s.len() != 2 || s[0] != n {
        return Err(shape_err("im2col3", format!("[{n}, C]"), format!("{s:?}")));
    }
    let c = s[1];
    let mut index = Vec::with_capacity(n * 27);
    for ix in 0..dims.0 as isize {
        for iy in 0..dims.1 as isize {
            for iz in 0..dims.2 as isize {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let (x2, y2, z2) = (ix + dx, iy + dy, iz + dz);
                            let inside = x2 >= 0
                                && y2 >= 0
                                && z2 >= 0
                                && (x2 as usize) < dims.0
                                && (y2 as usize) < dims.1
                                && (z2 as usize) < dims.2;
                            index.push(inside.then(|| voxel_index(dims, x2 as usize, y2 as usize, z2 as usize) as u32));
                        }
                    }
                }
            }
        }
    }
    let src = tape.data(x);
    let mut out = vec![0.0; n * 27 * c];
    for (slot, s) in index.iter().enumerate() {
        if let Some(s) = s {
            let s = *s as usize;
            out[slot * c..(slot + 1) * c].copy_from_slice(&src[s * c..(s + 1) * c]);
        }
    }
    let value = Tensor::new(vec![n, 27 * c], out)?;
    tape.push_op("im2col3", value, &[x], Im2colOp { x, index, channels: c })
}

/// Kernel-3, padding-1 convolution: `x [voxels, C_in]` with weight
/// `[C_out, 27 * C_in]` laid out as in [`im2col3`].
pub fn conv3d(tape: &mut Tape, x: Var, dims: Dims, weight: Var, bias: Var) -> Result<Var> {
    let cols = im2col3(tape, x, dims)?;
    tape.linear(cols, weight, Some(bias))
}

/// 3D fully convolutional head: `hidden_stages` kernel-3 convolutions with
/// GELU, then a kernel-3 convolution to class logits.
#[derive(Clone, Debug)]
pub struct FcnHead {
    pub hidden: Vec<LinearLayer>,
    pub classifier: LinearLayer,
}

impl FcnHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_model: usize, width: usize, num_classes: usize, hidden_stages: usize) -> Self {
        let mut hidden = Vec::with_capacity(hidden_stages);
        let mut c_in = d_model;
        for i in 0..hidden_stages {
            hidden.push(LinearLayer::new(store, rng, &format!("head.conv{i}"), 27 * c_in, width));
            c_in = width;
        }
        let classifier = LinearLayer::new(store, rng, "head.classifier", 27 * c_in, num_classes);
        Self { hidden, classifier }
    }

    /// Per-voxel class logits `[voxels, C]`.
    pub fn logits(&self, g: &mut Graph<'_>, voxfeat: Var, dims: Dims) -> Result<Var> {
        let mut x = voxfeat;
        for layer in &self.hidden {
            let w = g.param(layer.weight)?;
            let b = g.param(layer.bias)?;
            x = conv3d(&mut g.tape, x, dims, w, b)?;
            x = g.tape.gelu(x)?;
        }
        let w = g.param(self.classifier.weight)?;
        let b = g.param(self.classifier.bias)?;
        conv3d(&mut g.tape, x, dims, w, b)
    }
}

/// Per-voxel class probabilities `[voxels, C]`.
pub fn decode(g: &mut Graph<'_>, voxfeat: Var, dims: Dims, head: &FcnHead) -> Result<Var> {
    let logits = head.logits(g, voxfeat, dims)?;
    g.tape.softmax(logits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU and their mean over classes present in either grid.
pub fn miou(pred: &[u32], gt: &[u32], num_classes: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(shape_err("miou", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Degenerate("miou of an empty grid".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut npred = vec![0usize; num_classes];
    let mut ngt = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(gt) {
        let (p, t) = (p as usize, t as usize);
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidConfig(format!("class index {} out of range for C={num_classes}", p.max(t))));
        }
        npred[p] += 1;
        ngt[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let union = npred[c] + ngt[c] - tp[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

/// Fraction of voxels whose labels agree.
pub fn voxel_accuracy(pred: &[u32], gt: &[u32]) -> f64 {
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    hits as f64 / gt.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_examples() {
        let mut cfg = SceneConfig::default();
        assert_eq!(blend_factors(&cfg).unwrap(), vec![0.5]);
        cfg.num_slices = 1;
        cfg.voxel_h = 4;
        assert_eq!(blend_factors(&cfg).unwrap(), vec![0.125, 0.375, 0.625, 0.875]);
        cfg.voxel_h = 5;
        cfg.num_slices = 2;
        assert!(blend_factors(&cfg).is_err());
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 2], &[0, 1, 2], 3).unwrap().miou, 1.0);
        assert_eq!(miou(&[1, 0], &[0, 1], 2).unwrap().miou, 0.0);
        let r = miou(&[1, 0], &[1, 1], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.5)]);
        assert_eq!(r.miou, 0.25);
        assert!(miou(&[0], &[0, 0], 2).is_err());
    }

    #[test]
    fn channel_first_layout() {
        let dims = (1, 2, 3);
        let x = Tensor::from_fn(&[6, 2], |i| i as f64);
        let y = to_channel_first(&x, dims).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2, 3]);
        // channel 1 of voxel (0, 1, 2) is row 5, column 1
        assert_eq!(y.data()[6 + 5], 11.0);
    }
}
