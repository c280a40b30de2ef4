//! Primitive differentiable ops recorded on a [`Tape`].

use crate::error::{shape_err, Error, Result};
use crate::numerics::linalg::{gemm, MatRef};
use crate::numerics::sample::{bilinear_taps, trilinear_taps};
use crate::numerics::tape::{Backward, BackwardCtx, Tape, Var};
use crate::numerics::Tensor;

const LN_EPS: f64 = 1e-5;

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err(op, format!("{:?}", tape.shape(a)), format!("{:?}", tape.shape(b))));
    }
    Ok(())
}

/// `[rows, cols]` view of a tensor whose last axis is the feature axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().rev().skip(1).product();
    (rows, cols)
}

struct AddOp(Var, Var, f64);

impl Backward for AddOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        ctx.accumulate(self.0, g);
        if ctx.requires_grad(self.1) {
            let s = self.2;
            for (d, v) in ctx.grad_mut(self.1).iter_mut().zip(g) {
                *d += s * v;
            }
        }
    }
}

struct MulOp(Var, Var);

impl Backward for MulOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        for (this, other) in [(self.0, self.1), (self.1, self.0)] {
            if ctx.requires_grad(this) {
                let (ov, gt) = ctx.value_and_grad(other, this);
                for ((d, o), gi) in gt.iter_mut().zip(ov.data()).zip(g) {
                    *d += o * gi;
                }
            }
        }
    }
}

struct ScaleOp(Var, f64);

impl Backward for ScaleOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let s = self.1;
        for (d, v) in ctx.grad_mut(self.0).iter_mut().zip(g) {
            *d += s * v;
        }
    }
}

struct SumOp(Var);

impl Backward for SumOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        for d in ctx.grad_mut(self.0) {
            *d += g[0];
        }
    }
}

struct AddRowOp {
    x: Var,
    row: Var,
    cols: usize,
}

impl Backward for AddRowOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        ctx.accumulate(self.x, g);
        if ctx.requires_grad(self.row) {
            let gr = ctx.grad_mut(self.row);
            for chunk in g.chunks_exact(self.cols) {
                for (d, v) in gr.iter_mut().zip(chunk) {
                    *d += v;
                }
            }
        }
    }
}

struct MulRowsOp {
    x: Var,
    mask: Vec<f64>,
    cols: usize,
}

impl Backward for MulRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let gx = ctx.grad_mut(self.x);
        for ((gx, g), &m) in gx.chunks_exact_mut(self.cols).zip(g.chunks_exact(self.cols)).zip(&self.mask) {
            if m != 0.0 {
                for (d, v) in gx.iter_mut().zip(g) {
                    *d += m * v;
                }
            }
        }
    }
}

struct LinearOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Backward for LinearOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let (n, i, o) = (self.rows, self.fan_in, self.fan_out);
        if ctx.requires_grad(self.x) {
            let (w, gx) = ctx.value_and_grad(self.w, self.x);
            // dx[n,i] += g[n,o] * w[o,i]
            gemm(MatRef::row_major(g, n, o), MatRef::row_major(w.data(), o, i), 1.0, gx);
        }
        if ctx.requires_grad(self.w) {
            let (x, gw) = ctx.value_and_grad(self.x, self.w);
            // dw[o,i] += g^T[o,n] * x[n,i]
            gemm(MatRef::transposed(g, n, o), MatRef::row_major(x.data(), n, i), 1.0, gw);
        }
        if let Some(b) = self.b {
            if ctx.requires_grad(b) {
                let gb = ctx.grad_mut(b);
                for row in g.chunks_exact(o) {
                    for (d, v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct GeluOp(Var);

impl Backward for GeluOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let (x, gx) = ctx.value_and_grad(self.0, self.0);
        // value_and_grad borrows the same node's value and grad, which live in
        // separate arrays.
        let xs = x.data().to_vec();
        for ((d, &xv), gv) in gx.iter_mut().zip(&xs).zip(g) {
            *d += gelu_grad(xv) * gv;
        }
    }
}

struct LayerNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    rstd: Vec<f64>,
    cols: usize,
}

impl Backward for LayerNormOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let c = self.cols;
        if ctx.requires_grad(self.gamma) {
            let gg = ctx.grad_mut(self.gamma);
            for (gr, xr) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)) {
                for ((d, gv), xv) in gg.iter_mut().zip(gr).zip(xr) {
                    *d += gv * xv;
                }
            }
        }
        if ctx.requires_grad(self.beta) {
            let gb = ctx.grad_mut(self.beta);
            for gr in g.chunks_exact(c) {
                for (d, gv) in gb.iter_mut().zip(gr) {
                    *d += gv;
                }
            }
        }
        if ctx.requires_grad(self.x) {
            let gamma = ctx.value(self.gamma).data().to_vec();
            let gx = ctx.grad_mut(self.x);
            let mut dxhat = vec![0.0; c];
            for (r, (gr, xr)) in g.chunks_exact(c).zip(self.xhat.chunks_exact(c)).enumerate() {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..c {
                    dxhat[j] = gr[j] * gamma[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xr[j];
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                let rs = self.rstd[r];
                for j in 0..c {
                    gx[r * c + j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                }
            }
        }
    }
}

struct SoftmaxOp {
    x: Var,
    y: Vec<f64>,
    cols: usize,
}

impl Backward for SoftmaxOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let c = self.cols;
        let gx = ctx.grad_mut(self.x);
        for ((dx, y), gr) in gx.chunks_exact_mut(c).zip(self.y.chunks_exact(c)).zip(g.chunks_exact(c)) {
            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..c {
                dx[j] += y[j] * (gr[j] - dot);
            }
        }
    }
}

/// Numerically stable softmax of each row of length `cols`.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (o, r) in out.chunks_exact_mut(cols).zip(x.chunks_exact(cols)) {
        let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oj, &rj) in o.iter_mut().zip(r) {
            *oj = (rj - m).exp();
            z += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= z;
        }
    }
    out
}

struct BilinearOp {
    map: Var,
    points: Var,
}

impl Backward for BilinearOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let shape = ctx.value(self.map).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let plane = h * w;
        let pts = ctx.value(self.points).data().to_vec();
        let np = pts.len() / 2;
        if ctx.requires_grad(self.map) {
            let gm = ctx.grad_mut(self.map);
            for p in 0..np {
                let taps = bilinear_taps(pts[2 * p], pts[2 * p + 1], h, w);
                for t in taps.iter() {
                    for ch in 0..c {
                        gm[ch * plane + t.index] += t.weight * g[p * c + ch];
                    }
                }
            }
        }
        if ctx.requires_grad(self.points) {
            let (map, gp) = ctx.value_and_grad(self.map, self.points);
            let md = map.data();
            for p in 0..np {
                let taps = bilinear_taps(pts[2 * p], pts[2 * p + 1], h, w);
                for t in taps.iter() {
                    let dot: f64 = (0..c).map(|ch| md[ch * plane + t.index] * g[p * c + ch]).sum();
                    gp[2 * p] += t.dweight[0] * dot;
                    gp[2 * p + 1] += t.dweight[1] * dot;
                }
            }
        }
    }
}

struct TrilinearOp {
    volume: Var,
    points: Var,
}

impl Backward for TrilinearOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let shape = ctx.value(self.volume).shape().to_vec();
        let (c, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let cube = d * h * w;
        let pts = ctx.value(self.points).data().to_vec();
        let np = pts.len() / 3;
        if ctx.requires_grad(self.volume) {
            let gv = ctx.grad_mut(self.volume);
            for p in 0..np {
                let taps = trilinear_taps(pts[3 * p], pts[3 * p + 1], pts[3 * p + 2], d, h, w);
                for t in taps.iter() {
                    for ch in 0..c {
                        gv[ch * cube + t.index] += t.weight * g[p * c + ch];
                    }
                }
            }
        }
        if ctx.requires_grad(self.points) {
            let (vol, gp) = ctx.value_and_grad(self.volume, self.points);
            let vd = vol.data();
            for p in 0..np {
                let taps = trilinear_taps(pts[3 * p], pts[3 * p + 1], pts[3 * p + 2], d, h, w);
                for t in taps.iter() {
                    let dot: f64 = (0..c).map(|ch| vd[ch * cube + t.index] * g[p * c + ch]).sum();
                    for a in 0..3 {
                        gp[3 * p + a] += t.dweight[a] * dot;
                    }
                }
            }
        }
    }
}

struct ScalarFnOp {
    x: Var,
    grad: Vec<f64>,
}

impl Backward for ScalarFnOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let s = g[0];
        for (d, v) in ctx.grad_mut(self.x).iter_mut().zip(&self.grad) {
            *d += s * v;
        }
    }
}

struct RepeatRowsOp {
    x: Var,
    times: usize,
    cols: usize,
}

impl Backward for RepeatRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let (times, cols) = (self.times, self.cols);
        let gx = ctx.grad_mut(self.x);
        for (r, chunk) in g.chunks_exact(cols).enumerate() {
            let dst = &mut gx[(r / times) * cols..(r / times + 1) * cols];
            for (d, v) in dst.iter_mut().zip(chunk) {
                *d += v;
            }
        }
    }
}

struct SliceRowsOp {
    x: Var,
    start: usize,
    cols: usize,
}

impl Backward for SliceRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let off = self.start * self.cols;
        let gx = ctx.grad_mut(self.x);
        for (d, v) in gx[off..off + g.len()].iter_mut().zip(g) {
            *d += v;
        }
    }
}

struct ConcatRowsOp {
    parts: Vec<(Var, usize)>,
}

impl Backward for ConcatRowsOp {
    fn backward(&self, g: &[f64], ctx: &mut BackwardCtx<'_>) {
        let mut off = 0;
        for &(v, n) in &self.parts {
            ctx.accumulate(v, &g[off..off + n]);
            off += n;
        }
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op("add", value, &[a, b], AddOp(a, b, 1.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op("sub", value, &[a, b], AddOp(a, b, -1.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op("mul", value, &[a, b], MulOp(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * k).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push_op("scale", value, &[a], ScaleOp(a, k))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        self.push_op("sum", Tensor::scalar(s), &[a], SumOp(a))
    }

    /// Broadcast-adds a `[cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(row).numel() != cols {
            return Err(shape_err("add_row", cols, self.value(row).numel()));
        }
        let r = self.data(row).to_vec();
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_exact_mut(cols) {
            for (d, v) in chunk.iter_mut().zip(&r) {
                *d += v;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_op("add_row", value, &[x, row], AddRowOp { x, row, cols })
    }

    /// Scales each row of `x` by a constant factor.
    pub fn mul_rows(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if mask.len() != rows {
            return Err(shape_err("mul_rows", rows, mask.len()));
        }
        let mut data = self.data(x).to_vec();
        for (chunk, &m) in data.chunks_exact_mut(cols).zip(&mask) {
            for d in chunk {
                *d *= m;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_op("mul_rows", value, &[x], MulRowsOp { x, mask, cols })
    }

    /// `x [N, in] * w^T [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(shape_err("linear", "weight [out, in]", format!("{ws:?}")));
        }
        let (fan_out, fan_in) = (ws[0], ws[1]);
        let (rows, cols) = rows_cols(self.shape(x));
        if cols != fan_in {
            return Err(shape_err("linear", format!("input width {fan_in}"), cols));
        }
        if let Some(b) = b {
            if self.value(b).numel() != fan_out {
                return Err(shape_err("linear", format!("bias [{fan_out}]"), self.value(b).numel()));
            }
        }
        let mut out = match b {
            Some(b) => {
                let bias = self.data(b);
                let mut out = Vec::with_capacity(rows * fan_out);
                for _ in 0..rows {
                    out.extend_from_slice(bias);
                }
                out
            }
            None => vec![0.0; rows * fan_out],
        };
        gemm(
            MatRef::row_major(self.data(x), rows, fan_in),
            MatRef::transposed(self.data(w), fan_out, fan_in),
            1.0,
            &mut out,
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") = fan_out;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(
            "linear",
            value,
            &inputs,
            LinearOp {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push_op("gelu", value, &[x], GeluOp(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err("layer_norm", cols, self.value(gamma).numel()));
        }
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let xh = (row[j] - mean) * rs;
                xhat[r * cols + j] = xh;
                out[r * cols + j] = xh * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push_op(
            "layer_norm",
            value,
            &[x, gamma, beta],
            LayerNormOp {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                cols,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if cols == 0 {
            return Err(shape_err("softmax", "non-empty last axis", 0));
        }
        let y = softmax_rows(self.data(x), cols);
        let value = Tensor::new(self.shape(x).to_vec(), y.clone())?;
        self.push_op("softmax", value, &[x], SoftmaxOp { x, y, cols })
    }

    /// Samples a `[C, H, W]` map at `[P, 2]` normalized `(u, v)` points.
    /// Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        let ps = self.shape(points).to_vec();
        if ms.len() != 3 || ms[1] == 0 || ms[2] == 0 {
            return Err(shape_err("bilinear_sample", "featmap [C, H, W]", format!("{ms:?}")));
        }
        if ps.len() != 2 || ps[1] != 2 {
            return Err(shape_err("bilinear_sample", "points [P, 2]", format!("{ps:?}")));
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let pts = self.data(points);
        let md = self.data(map);
        let mut out = vec![0.0; ps[0] * c];
        for p in 0..ps[0] {
            let taps = bilinear_taps(pts[2 * p], pts[2 * p + 1], h, w);
            for t in taps.iter() {
                for ch in 0..c {
                    out[p * c + ch] += t.weight * md[ch * h * w + t.index];
                }
            }
        }
        let value = Tensor::new(vec![ps[0], c], out)?;
        self.push_op("bilinear_sample", value, &[map, points], BilinearOp { map, points })
    }

    /// Samples a `[C, D, H, W]` volume at `[P, 3]` normalized `(u, v, s)`
    /// points (`s` along depth). Returns `[P, C]`.
    pub fn trilinear_sample(&mut self, volume: Var, points: Var) -> Result<Var> {
        let vs = self.shape(volume).to_vec();
        let ps = self.shape(points).to_vec();
        if vs.len() != 4 || vs[1..].iter().any(|&n| n == 0) {
            return Err(shape_err("trilinear_sample", "volume [C, D, H, W]", format!("{vs:?}")));
        }
        if ps.len() != 2 || ps[1] != 3 {
            return Err(shape_err("trilinear_sample", "points [P, 3]", format!("{ps:?}")));
        }
        let (c, d, h, w) = (vs[0], vs[1], vs[2], vs[3]);
        let cube = d * h * w;
        let pts = self.data(points);
        let vd = self.data(volume);
        let mut out = vec![0.0; ps[0] * c];
        for p in 0..ps[0] {
            let taps = trilinear_taps(pts[3 * p], pts[3 * p + 1], pts[3 * p + 2], d, h, w);
            for t in taps.iter() {
                for ch in 0..c {
                    out[p * c + ch] += t.weight * vd[ch * cube + t.index];
                }
            }
        }
        let value = Tensor::new(vec![ps[0], c], out)?;
        self.push_op("trilinear_sample", value, &[volume, points], TrilinearOp { volume, points })
    }

    /// Repeats every row of a `[R, C]` tensor `times` times: row `r` of the
    /// `[R * times, C]` output is row `r / times` of `x`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * times * cols);
        for chunk in src.chunks_exact(cols) {
            for _ in 0..times {
                data.extend_from_slice(chunk);
            }
        }
        let value = Tensor::new(vec![rows * times, cols], data)?;
        self.push_op("repeat_rows", value, &[x], RepeatRowsOp { x, times, cols })
    }

    /// Rows `[start, start + len)` of a `[R, C]` tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start + len > rows {
            return Err(shape_err("slice_rows", format!("rows >= {}", start + len), rows));
        }
        let data = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        self.push_op("slice_rows", value, &[x], SliceRowsOp { x, start, cols })
    }

    /// Stacks `[R_i, C]` tensors along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat_rows", "at least one input", 0))?;
        let (_, cols) = rows_cols(self.shape(first));
        let mut data = Vec::new();
        let mut parts = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = rows_cols(self.shape(x));
            if c != cols {
                return Err(shape_err("concat_rows", cols, c));
            }
            data.extend_from_slice(self.data(x));
            parts.push((x, r * c));
        }
        let rows = data.len() / cols;
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push_op("concat_rows", value, xs, ConcatRowsOp { parts })
    }

    /// Records a scalar function of `x` whose value and gradient were
    /// computed outside the tape.
    pub fn scalar_fn(&mut self, name: &'static str, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(shape_err(name, self.value(x).numel(), grad.len()));
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.push_op(name, Tensor::scalar(value), &[x], ScalarFnOp { x, grad })
    }
}
