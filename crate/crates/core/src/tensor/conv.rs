//! 3D convolution kernels.
//!
//! A strided convolution relates a "big" grid (the convolution input) to a
//! "small" grid (its output). The transposed convolution is the adjoint of
//! the same relation, so both directions share three kernels:
//!
//! * `gather`: small = W · cols(big)
//! * `scatter`: big += col2im(Wᵀ · small)
//! * `weight_grad`: dW += small · cols(big)ᵀ
//!
//! with `W` stored as `c_small × (c_big · k³)`.

use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per chunk (16 MiB of `f32`).
const CHUNK_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    Transposed,
}

/// Kernel size and stride of a cubic convolution with "same" padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize) -> Self {
        ConvGeometry { kernel, stride }
    }

    /// Output grid of a same-padded convolution: `ceil(in / stride)`.
    pub fn conv_output(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|d| d.div_ceil(self.stride))
    }

    /// Output grid of a same-padded transposed convolution: `in · stride`.
    pub fn transposed_output(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|d| d * self.stride)
    }

    /// Leading pad of the same-padded convolution mapping `big` onto `small`.
    /// Odd totals put the extra padding voxel on the trailing side.
    fn pad(&self, big: usize, small: usize) -> usize {
        let total = ((small - 1) * self.stride + self.kernel).saturating_sub(big);
        total / 2
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Plan {
    k: usize,
    s: usize,
    big: [usize; 3],
    small: [usize; 3],
    pad: [usize; 3],
    pub(crate) c_big: usize,
    pub(crate) c_small: usize,
}

impl Plan {
    pub(crate) fn new(
        geom: ConvGeometry,
        big: [usize; 3],
        small: [usize; 3],
        c_big: usize,
        c_small: usize,
    ) -> Result<Self> {
        if geom.kernel == 0 || geom.stride == 0 {
            return Err(Error::config("kernel and stride must be positive"));
        }
        if big.iter().chain(&small).any(|&d| d == 0) {
            return Err(Error::shape(format!("empty grid {big:?} / {small:?}")));
        }
        let pad = [
            geom.pad(big[0], small[0]),
            geom.pad(big[1], small[1]),
            geom.pad(big[2], small[2]),
        ];
        Ok(Plan {
            k: geom.kernel,
            s: geom.stride,
            big,
            small,
            pad,
            c_big,
            c_small,
        })
    }

    pub(crate) fn big(&self) -> [usize; 3] {
        self.big
    }

    pub(crate) fn small(&self) -> [usize; 3] {
        self.small
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    pub(crate) fn weight_cols(&self) -> usize {
        self.c_big * self.taps()
    }

    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    fn plane(&self) -> usize {
        self.small[1] * self.small[2]
    }

    /// Chunks of small-grid x-planes whose im2col buffer fits the budget.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let per_plane = self.weight_cols() * self.plane();
        let planes = (CHUNK_ELEMS / per_plane.max(1)).max(1);
        let sx = self.small[0];
        (0..sx)
            .step_by(planes)
            .map(move |x0| (x0, (x0 + planes).min(sx)))
    }

    #[inline]
    fn source(&self, o: usize, t: usize, axis: usize) -> Option<usize> {
        let pos = (o * self.s + t) as isize - self.pad[axis] as isize;
        if pos >= 0 && (pos as usize) < self.big[axis] {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Fills `cols` (`weight_cols × n`) for small planes `[x0, x1)`.
    fn im2col(&self, big: &[f32], x0: usize, x1: usize, cols: &mut [f32]) {
        let n = (x1 - x0) * self.plane();
        let [_, by, bz] = self.big;
        let [_, sy, sz] = self.small;
        let bx = self.big[0];
        let k = self.k;
        for cb in 0..self.c_big {
            for tx in 0..k {
                for ty in 0..k {
                    for tz in 0..k {
                        let j = ((cb * k + tx) * k + ty) * k + tz;
                        let row = &mut cols[j * n..(j + 1) * n];
                        let mut idx = 0;
                        for ox in x0..x1 {
                            let Some(ix) = self.source(ox, tx, 0) else {
                                row[idx..idx + sy * sz].fill(0.0);
                                idx += sy * sz;
                                continue;
                            };
                            for oy in 0..sy {
                                let Some(iy) = self.source(oy, ty, 1) else {
                                    row[idx..idx + sz].fill(0.0);
                                    idx += sz;
                                    continue;
                                };
                                let base = ((cb * bx + ix) * by + iy) * bz;
                                for (oz, slot) in row[idx..idx + sz].iter_mut().enumerate() {
                                    *slot = match self.source(oz, tz, 2) {
                                        Some(iz) => big[base + iz],
                                        None => 0.0,
                                    };
                                }
                                idx += sz;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds `cols` back onto the big grid (adjoint of `im2col`).
    fn col2im(&self, cols: &[f32], x0: usize, x1: usize, big: &mut [f32]) {
        let n = (x1 - x0) * self.plane();
        let [bx, by, bz] = self.big;
        let [_, sy, sz] = self.small;
        let k = self.k;
        for cb in 0..self.c_big {
            for tx in 0..k {
                for ty in 0..k {
                    for tz in 0..k {
                        let j = ((cb * k + tx) * k + ty) * k + tz;
                        let row = &cols[j * n..(j + 1) * n];
                        let mut idx = 0;
                        for ox in x0..x1 {
                            let Some(ix) = self.source(ox, tx, 0) else {
                                idx += sy * sz;
                                continue;
                            };
                            for oy in 0..sy {
                                let Some(iy) = self.source(oy, ty, 1) else {
                                    idx += sz;
                                    continue;
                                };
                                let base = ((cb * bx + ix) * by + iy) * bz;
                                for (oz, v) in row[idx..idx + sz].iter().enumerate() {
                                    if let Some(iz) = self.source(oz, tz, 2) {
                                        big[base + iz] += *v;
                                    }
                                }
                                idx += sz;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `small = W · cols(big)`, overwriting `small` (`c_small × |small|`).
    pub(crate) fn gather(&self, big: &[f32], weight: &[f32], small: &mut [f32]) {
        debug_assert_eq!(big.len(), self.c_big * self.big_len());
        debug_assert_eq!(small.len(), self.c_small * self.small_len());
        let kc = self.weight_cols();
        let total = self.small_len();
        let mut cols = Vec::new();
        for (x0, x1) in self.chunks() {
            let n = (x1 - x0) * self.plane();
            cols.resize(kc * n, 0.0);
            self.im2col(big, x0, x1, &mut cols);
            let offset = x0 * self.plane();
            // SAFETY: all strides and extents describe in-bounds views of the
            // slices above (checked by the debug assertions and chunking).
            unsafe {
                matrixmultiply::sgemm(
                    self.c_small,
                    kc,
                    n,
                    1.0,
                    weight.as_ptr(),
                    kc as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    small.as_mut_ptr().add(offset),
                    total as isize,
                    1,
                );
            }
        }
    }

    /// `big += col2im(Wᵀ · small)`.
    pub(crate) fn scatter(&self, small: &[f32], weight: &[f32], big: &mut [f32]) {
        debug_assert_eq!(big.len(), self.c_big * self.big_len());
        debug_assert_eq!(small.len(), self.c_small * self.small_len());
        let kc = self.weight_cols();
        let total = self.small_len();
        let mut cols = Vec::new();
        for (x0, x1) in self.chunks() {
            let n = (x1 - x0) * self.plane();
            cols.resize(kc * n, 0.0);
            let offset = x0 * self.plane();
            // SAFETY: see `gather`; Wᵀ is read through swapped strides.
            unsafe {
                matrixmultiply::sgemm(
                    kc,
                    self.c_small,
                    n,
                    1.0,
                    weight.as_ptr(),
                    1,
                    kc as isize,
                    small.as_ptr().add(offset),
                    total as isize,
                    1,
                    0.0,
                    cols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            self.col2im(&cols, x0, x1, big);
        }
    }

    /// `weight_grad += small · cols(big)ᵀ`.
    pub(crate) fn weight_grad(&self, big: &[f32], small: &[f32], weight_grad: &mut [f32]) {
        debug_assert_eq!(weight_grad.len(), self.c_small * self.weight_cols());
        let kc = self.weight_cols();
        let total = self.small_len();
        let mut cols = Vec::new();
        for (x0, x1) in self.chunks() {
            let n = (x1 - x0) * self.plane();
            cols.resize(kc * n, 0.0);
            self.im2col(big, x0, x1, &mut cols);
            let offset = x0 * self.plane();
            // SAFETY: see `gather`; colsᵀ is read through swapped strides.
            unsafe {
                matrixmultiply::sgemm(
                    self.c_small,
                    n,
                    kc,
                    1.0,
                    small.as_ptr().add(offset),
                    total as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    weight_grad.as_mut_ptr(),
                    kc as isize,
                    1,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-fold loop convolution used as an oracle.
    fn naive_conv(
        geom: ConvGeometry,
        x: &[f32],
        ci: usize,
        dims: [usize; 3],
        w: &[f32],
        co: usize,
    ) -> (Vec<f32>, [usize; 3]) {
        let out = geom.conv_output(dims);
        let k = geom.kernel;
        let pad: Vec<isize> = (0..3)
            .map(|a| {
                let total = ((out[a] - 1) * geom.stride + k).saturating_sub(dims[a]);
                (total / 2) as isize
            })
            .collect();
        let mut y = vec![0.0f32; co * out.iter().product::<usize>()];
        for o in 0..co {
            for ox in 0..out[0] {
                for oy in 0..out[1] {
                    for oz in 0..out[2] {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for tx in 0..k {
                                for ty in 0..k {
                                    for tz in 0..k {
                                        let ix = (ox * geom.stride + tx) as isize - pad[0];
                                        let iy = (oy * geom.stride + ty) as isize - pad[1];
                                        let iz = (oz * geom.stride + tz) as isize - pad[2];
                                        if ix < 0
                                            || iy < 0
                                            || iz < 0
                                            || ix as usize >= dims[0]
                                            || iy as usize >= dims[1]
                                            || iz as usize >= dims[2]
                                        {
                                            continue;
                                        }
                                        let xi = ((c * dims[0] + ix as usize) * dims[1]
                                            + iy as usize)
                                            * dims[2]
                                            + iz as usize;
                                        let wi = (((o * ci + c) * k + tx) * k + ty) * k + tz;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[((o * out[0] + ox) * out[1] + oy) * out[2] + oz] = acc;
                    }
                }
            }
        }
        (y, out)
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n)
            .map(|i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * scale)
            .collect()
    }

    #[test]
    fn gather_matches_naive_convolution() {
        for (k, s, dims) in [(4, 2, [8, 6, 4]), (4, 1, [5, 4, 3]), (3, 1, [4, 5, 6])] {
            let geom = ConvGeometry::new(k, s);
            let (ci, co) = (3, 2);
            let x = ramp(ci * dims.iter().product::<usize>(), 2.0);
            let w = ramp(co * ci * k * k * k, 1.0);
            let (expected, out) = naive_conv(geom, &x, ci, dims, &w, co);
            let plan = Plan::new(geom, dims, out, ci, co).unwrap();
            let mut y = vec![0.0; expected.len()];
            plan.gather(&x, &w, &mut y);
            for (a, b) in y.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scatter_is_adjoint_of_gather() {
        // <gather(x), y> == <x, scatter(y)>
        let geom = ConvGeometry::new(4, 2);
        let (big, small) = ([6, 4, 8], [3, 2, 4]);
        let plan = Plan::new(geom, big, small, 2, 3).unwrap();
        let x = ramp(2 * 6 * 4 * 8, 1.0);
        let y = ramp(3 * 3 * 2 * 4, 3.0);
        let w = ramp(3 * plan.weight_cols(), 0.7);
        let mut gx = vec![0.0; y.len()];
        plan.gather(&x, &w, &mut gx);
        let mut sy = vec![0.0; x.len()];
        plan.scatter(&y, &w, &mut sy);
        let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| (*a * *b) as f64).sum();
        let rhs: f64 = x.iter().zip(&sy).map(|(a, b)| (*a * *b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn weight_grad_matches_directional_derivative() {
        // d/dW <gather(x; W), y> = weight_grad(x, y)
        let geom = ConvGeometry::new(3, 1);
        let dims = [4, 3, 5];
        let plan = Plan::new(geom, dims, dims, 2, 2).unwrap();
        let x = ramp(2 * 60, 1.0);
        let y = ramp(2 * 60, 2.0);
        let w = ramp(2 * plan.weight_cols(), 0.5);
        let mut g = vec![0.0; w.len()];
        plan.weight_grad(&x, &y, &mut g);
        let objective = |w: &[f32]| {
            let mut out = vec![0.0; y.len()];
            plan.gather(&x, w, &mut out);
            out.iter()
                .zip(&y)
                .map(|(a, b)| (*a * *b) as f64)
                .sum::<f64>()
        };
        for i in [0, 7, 19, 53, w.len() - 1] {
            let mut wp = w.clone();
            wp[i] += 0.5;
            let mut wm = w.clone();
            wm[i] -= 0.5;
            let fd = (objective(&wp) - objective(&wm)) / 1.0;
            assert!((fd - g[i] as f64).abs() < 1e-3, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn same_padding_output_sizes() {
        let g = ConvGeometry::new(4, 2);
        assert_eq!(g.conv_output([128, 128, 128]), [64, 64, 64]);
        assert_eq!(g.transposed_output([8, 8, 8]), [16, 16, 16]);
        assert_eq!(ConvGeometry::new(4, 1).conv_output([8, 3, 2]), [8, 3, 2]);
    }
}
