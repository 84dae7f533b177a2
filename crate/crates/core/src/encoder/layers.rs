//! Layer primitives with explicit forward caches and reverse-mode passes.
//!
//! Feature maps are `(channels, time, frequency)`. Convolutions are 3×3,
//! stride 1, zero "same" padding, computed as im2col followed by a GEMM.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

/// Floating point types the networks run in: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// How the last feature map is reduced to a vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over time and frequency: one value per channel.
    TimeFrequency,
    /// Mean over time only: one value per (channel, frequency) cell.
    Time,
}

fn im2col<F: Scalar>(x: &Array3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((c * TAPS, h * w));
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let mut row = cols.row_mut(ci * TAPS + ky * KERNEL + kx);
                let row = row.as_slice_mut().expect("standard layout");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xo] = x[[ci, sy as usize, sx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Scalar>(cols: &Array2<F>, c: usize, h: usize, w: usize) -> Array3<F> {
    let mut x = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = cols.row(ci * TAPS + ky * KERNEL + kx);
                let row = row.as_slice().expect("standard layout");
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            x[[ci, sy as usize, sx as usize]] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
    x
}

pub struct ConvCache<F> {
    cols: Array2<F>,
    dims: (usize, usize, usize),
}

/// `weight` is `(out, in · 9)`, `bias` is `(out,)`.
pub fn conv_forward<F: Scalar>(
    x: &Array3<F>,
    weight: ArrayView2<'_, F>,
    bias: ArrayView1<'_, F>,
) -> (Array3<F>, ConvCache<F>) {
    let (c, h, w) = x.dim();
    let cols = im2col(x);
    let mut out = weight.dot(&cols);
    out += &bias.insert_axis(Axis(1));
    let out = out
        .into_shape_with_order((weight.nrows(), h, w))
        .expect("conv output shape");
    (out, ConvCache { cols, dims: (c, h, w) })
}

/// Accumulates into `dweight`/`dbias`; returns the input gradient when asked.
pub fn conv_backward<F: Scalar>(
    cache: &ConvCache<F>,
    dy: &Array3<F>,
    weight: ArrayView2<'_, F>,
    mut dweight: ArrayViewMut2<'_, F>,
    mut dbias: ArrayViewMut1<'_, F>,
    need_input_grad: bool,
) -> Option<Array3<F>> {
    let (c, h, w) = cache.dims;
    let dy2 = dy
        .view()
        .into_shape_with_order((dy.dim().0, h * w))
        .expect("conv grad shape");
    dweight += &dy2.dot(&cache.cols.t());
    dbias += &dy2.sum_axis(Axis(1));
    need_input_grad.then(|| col2im(&weight.t().dot(&dy2), c, h, w))
}

pub struct PoolCache {
    argmax: Vec<usize>,
    dims: (usize, usize, usize),
}

/// 2×2 max pooling, stride 2, trailing odd rows/columns dropped.
pub fn maxpool_forward<F: Scalar>(x: &Array3<F>) -> (Array3<F>, PoolCache) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<F>::zeros((c, oh, ow));
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let xs = x.as_slice().expect("standard layout");
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = ci * h * w + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ci * h * w + (2 * y + dy) * w + 2 * xo + dx;
                    if xs[idx] > xs[best] {
                        best = idx;
                    }
                }
                out[[ci, y, xo]] = xs[best];
                argmax.push(best);
            }
        }
    }
    (out, PoolCache { argmax, dims: (c, h, w) })
}

pub fn maxpool_backward<F: Scalar>(cache: &PoolCache, dy: &Array3<F>) -> Array3<F> {
    let mut dx = Array3::<F>::zeros(cache.dims);
    let dxs = dx.as_slice_mut().expect("standard layout");
    for (&idx, &g) in cache.argmax.iter().zip(dy.iter()) {
        dxs[idx] += g;
    }
    dx
}

pub fn relu_forward<F: Scalar>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Gradient through ReLU given the layer's output.
pub fn relu_backward<F: Scalar>(output: &[F], dy: &mut [F]) {
    for (g, &y) in dy.iter_mut().zip(output) {
        if y <= F::zero() {
            *g = F::zero();
        }
    }
}

pub fn meanpool_forward<F: Scalar>(x: &Array3<F>, pooling: Pooling) -> Array1<F> {
    let (c, h, w) = x.dim();
    match pooling {
        Pooling::Time => {
            let scale = F::from_f64(1.0 / h as f64);
            let summed = x.sum_axis(Axis(1));
            summed.into_shape_with_order(c * w).expect("pool shape") * scale
        }
        Pooling::TimeFrequency => {
            let scale = F::from_f64(1.0 / (h * w) as f64);
            x.sum_axis(Axis(2)).sum_axis(Axis(1)) * scale
        }
    }
}

pub fn meanpool_backward<F: Scalar>(dy: &Array1<F>, dims: (usize, usize, usize), pooling: Pooling) -> Array3<F> {
    let (c, h, w) = dims;
    let mut dx = Array3::<F>::zeros(dims);
    match pooling {
        Pooling::Time => {
            let scale = F::from_f64(1.0 / h as f64);
            for ci in 0..c {
                for xo in 0..w {
                    let g = dy[ci * w + xo] * scale;
                    dx.slice_mut(ndarray::s![ci, .., xo]).fill(g);
                }
            }
        }
        Pooling::TimeFrequency => {
            let scale = F::from_f64(1.0 / (h * w) as f64);
            for ci in 0..c {
                dx.index_axis_mut(Axis(0), ci).fill(dy[ci] * scale);
            }
        }
    }
    dx
}

/// `y = W x + b` with `W` of shape `(out, in)`.
pub fn dense_forward<F: Scalar>(x: &Array1<F>, weight: ArrayView2<'_, F>, bias: ArrayView1<'_, F>) -> Array1<F> {
    weight.dot(x) + bias
}

pub fn dense_backward<F: Scalar>(
    x: &Array1<F>,
    dy: &Array1<F>,
    weight: ArrayView2<'_, F>,
    mut dweight: ArrayViewMut2<'_, F>,
    mut dbias: ArrayViewMut1<'_, F>,
) -> Array1<F> {
    let outer = dy
        .view()
        .insert_axis(Axis(1))
        .dot(&x.view().insert_axis(Axis(0)));
    dweight += &outer;
    dbias += dy;
    weight.t().dot(dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};

    #[test]
    fn conv_matches_direct_sum() {
        let x = Array::from_shape_fn((2, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64 * 0.1 - 1.0);
        let weight = Array::from_shape_fn((3, 18), |(o, k)| ((o * 18 + k) as f64 * 0.37).sin());
        let bias = array![0.1, -0.2, 0.3];
        let (out, _) = conv_forward(&x, weight.view(), bias.view());
        for o in 0..3 {
            for y in 0..4 {
                for xo in 0..5 {
                    let mut s = bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, xo as isize + kx as isize - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    s += weight[[o, c * 9 + ky * 3 + kx]] * x[[c, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    assert!((out[[o, y, xo]] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let x = Array::from_shape_fn((1, 5, 3), |(_, y, x)| (y * 3 + x) as f64);
        let (out, cache) = maxpool_forward(&x);
        assert_eq!(out.dim(), (1, 2, 1));
        assert_eq!(out[[0, 0, 0]], 4.0);
        assert_eq!(out[[0, 1, 0]], 10.0);
        let dx = maxpool_backward(&cache, &Array3::<f64>::ones((1, 2, 1)));
        assert_eq!(dx.sum(), 2.0);
        assert_eq!(dx[[0, 1, 1]], 1.0);
    }

    #[test]
    fn meanpool_shapes() {
        let x = Array::from_shape_fn((2, 4, 3), |(c, y, x)| (c + y + x) as f64);
        assert_eq!(meanpool_forward(&x, Pooling::Time).len(), 6);
        let tf = meanpool_forward(&x, Pooling::TimeFrequency);
        assert_eq!(tf.len(), 2);
        assert!((tf[0] - 2.5).abs() < 1e-12);
    }
}
