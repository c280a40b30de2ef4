//! Interpolation kernels shared by the sampling ops.
//!
//! Coordinates are normalized with align-corners semantics: along an axis of
//! `n` texels, `0.0` is the center of the first texel and `1.0` the center of
//! the last, so texel `j` sits at `j / (n - 1)`. An axis with a single texel
//! maps every coordinate onto that texel. Corners falling outside the lattice
//! contribute nothing (zero padding), which makes the kernels fade to zero
//! within one texel of the border.

/// One interpolation corner: flat texel index, weight, and the derivative of
/// the weight with respect to each normalized coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap<const N: usize> {
    pub index: usize,
    pub weight: f64,
    pub dweight: [f64; N],
}

/// Fixed-capacity list of taps; at most `2^N` corners.
#[derive(Clone, Debug)]
pub struct Taps<const N: usize> {
    taps: [Tap<N>; 8],
    len: usize,
}

impl<const N: usize> Taps<N> {
    fn new() -> Self {
        Self {
            taps: [Tap {
                index: 0,
                weight: 0.0,
                dweight: [0.0; N],
            }; 8],
            len: 0,
        }
    }

    fn push(&mut self, tap: Tap<N>) {
        self.taps[self.len] = tap;
        self.len += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tap<N>> {
        self.taps[..self.len].iter()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sum of weights; 1 for points well inside the lattice.
    pub fn coverage(&self) -> f64 {
        self.iter().map(|t| t.weight).sum()
    }
}

/// Per-axis linear kernel: up to two (texel, weight, dweight/dcoord) entries.
#[inline]
fn axis_taps(coord: f64, n: usize) -> [(isize, f64, f64); 2] {
    let scale = (n.max(1) - 1) as f64;
    let p = coord * scale;
    let i0 = p.floor();
    let frac = p - i0;
    let i0 = i0 as isize;
    [(i0, 1.0 - frac, -scale), (i0 + 1, frac, scale)]
}

#[inline]
fn in_range(i: isize, n: usize) -> bool {
    i >= 0 && (i as usize) < n
}

/// Bilinear taps for normalized `(u, v)` on a `height x width` lattice.
/// `u` runs along the width (columns), `v` along the height (rows). Flat
/// indices are `row * width + col`.
pub fn bilinear_taps(u: f64, v: f64, height: usize, width: usize) -> Taps<2> {
    let mut out = Taps::new();
    let xs = axis_taps(u, width);
    let ys = axis_taps(v, height);
    for &(iy, wy, dy) in &ys {
        if !in_range(iy, height) {
            continue;
        }
        for &(ix, wx, dx) in &xs {
            if !in_range(ix, width) {
                continue;
            }
            out.push(Tap {
                index: iy as usize * width + ix as usize,
                weight: wx * wy,
                dweight: [dx * wy, wx * dy],
            });
        }
    }
    out
}

/// Trilinear taps for normalized `(u, v, s)` on a `depth x height x width`
/// lattice; `s` runs along depth. Flat indices are
/// `(slab * height + row) * width + col`.
pub fn trilinear_taps(u: f64, v: f64, s: f64, depth: usize, height: usize, width: usize) -> Taps<3> {
    let mut out = Taps::new();
    let xs = axis_taps(u, width);
    let ys = axis_taps(v, height);
    let zs = axis_taps(s, depth);
    for &(iz, wz, dz) in &zs {
        if !in_range(iz, depth) {
            continue;
        }
        for &(iy, wy, dy) in &ys {
            if !in_range(iy, height) {
                continue;
            }
            for &(ix, wx, dx) in &xs {
                if !in_range(ix, width) {
                    continue;
                }
                out.push(Tap {
                    index: (iz as usize * height + iy as usize) * width + ix as usize,
                    weight: wx * wy * wz,
                    dweight: [dx * wy * wz, wx * dy * wz, wx * wy * dz],
                });
            }
        }
    }
    out
}

/// Converts a cell-center coordinate in `[0, 1]` (cell `j` of `n` at
/// `(j + 0.5) / n`) into the align-corners texel coordinate used by the
/// kernels, so that cell centers land exactly on texels.
pub fn cell_to_texel(coord: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        (coord * n as f64 - 0.5) / (n - 1) as f64
    }
}

/// Size of one texel step in normalized coordinates along an axis of `n`.
pub fn texel_step(n: usize) -> f64 {
    1.0 / (n.max(2) - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_have_single_tap() {
        let taps = bilinear_taps(0.5, 1.0, 3, 5);
        let nonzero: Vec<_> = taps.iter().filter(|t| t.weight != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].index, 2 * 5 + 2);
        assert_eq!(nonzero[0].weight, 1.0);
    }

    #[test]
    fn far_outside_has_no_taps() {
        assert!(bilinear_taps(2.0, 2.0, 2, 2).is_empty());
        assert!(trilinear_taps(-1.5, 0.5, 0.5, 2, 2, 2).is_empty());
    }

    #[test]
    fn coverage_fades_across_border() {
        let inside = bilinear_taps(0.3, 0.3, 4, 4).coverage();
        assert!((inside - 1.0).abs() < 1e-15);
        // a quarter texel beyond the first column
        let edge = bilinear_taps(-0.25 / 3.0, 0.5, 4, 4).coverage();
        assert!((edge - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cell_centers_map_to_texels() {
        for n in 2..6 {
            for j in 0..n {
                let c = (j as f64 + 0.5) / n as f64;
                let t = cell_to_texel(c, n);
                assert!((t * (n - 1) as f64 - j as f64).abs() < 1e-12);
            }
        }
        assert_eq!(cell_to_texel(0.5, 1), 0.0);
    }

    #[test]
    fn single_texel_axis_is_constant() {
        let taps = bilinear_taps(0.9, 0.1, 1, 1);
        assert_eq!(taps.len(), 1);
        assert_eq!(taps.iter().next().unwrap().weight, 1.0);
    }
}
