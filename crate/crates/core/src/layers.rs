//! Forward/backward kernels for the layers the segmentation network uses:
//! 3x3 same-padding convolution, 1x1 projection, ReLU, 2x2 max pooling,
//! sigmoid and corner-aligned bilinear resampling.

use crate::scalar::Scalar;
use crate::tensor::Tensor3;

/// Unfolds a `C x H x W` input into a `(C*9) x (H*W)` patch matrix for a
/// 3x3 kernel with one pixel of zero padding.
pub(crate) fn im2col3x3<T: Scalar>(input: &Tensor3<T>, col: &mut Vec<T>) {
    let (c, h, w) = (input.channels, input.height, input.width);
    let hw = h * w;
    col.clear();
    col.resize(c * 9 * hw, T::zero());
    for ch in 0..c {
        let plane = input.plane(ch);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                let dst = &mut col[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    // x range with valid source index sx = x + kx - 1
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for x in x_lo..x_hi {
                        dst_row[x] = src_row[x + kx - 1];
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the input grid (adjoint of
/// [`im2col3x3`]).
pub(crate) fn col2im3x3<T: Scalar>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
) -> Tensor3<T> {
    let hw = h * w;
    let mut out = Tensor3::zeros(channels, h, w);
    for ch in 0..channels {
        let plane = &mut out.data[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                let src = &col[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src_row = &src[y * w..(y + 1) * w];
                    let x_lo = if kx == 0 { 1 } else { 0 };
                    let x_hi = if kx == 2 { w - 1 } else { w };
                    for x in x_lo..x_hi {
                        dst_row[x + kx - 1] += src_row[x];
                    }
                }
            }
        }
    }
    out
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `out x (in*9)`.
/// The patch matrix is written to `col` for reuse in the backward pass.
pub(crate) fn conv3x3_forward<T: Scalar>(
    input: &Tensor3<T>,
    weight: &[T],
    bias: &[T],
    out_channels: usize,
    col: &mut Vec<T>,
) -> Tensor3<T> {
    let hw = input.plane_len();
    let k = input.channels * 9;
    im2col3x3(input, col);
    let mut out = Tensor3::zeros(out_channels, input.height, input.width);
    for (oc, b) in bias.iter().enumerate() {
        out.data[oc * hw..(oc + 1) * hw].fill(*b);
    }
    T::gemm(
        out_channels,
        k,
        hw,
        T::one(),
        weight,
        k as isize,
        1,
        col,
        hw as isize,
        1,
        T::one(),
        &mut out.data,
        hw as isize,
        1,
    );
    out
}

/// Backward pass of [`conv3x3_forward`]. Accumulates into `dweight` and
/// `dbias`; returns the input gradient when `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward<T: Scalar>(
    dout: &Tensor3<T>,
    col: &[T],
    weight: &[T],
    in_channels: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor3<T>> {
    let hw = dout.plane_len();
    let oc = dout.channels;
    let k = in_channels * 9;
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += dout.plane(c).iter().copied().sum::<T>();
    }
    // dW (oc x k) += dout (oc x hw) * col^T (hw x k)
    T::gemm(
        oc,
        hw,
        k,
        T::one(),
        &dout.data,
        hw as isize,
        1,
        col,
        1,
        hw as isize,
        T::one(),
        dweight,
        k as isize,
        1,
    );
    if !need_input_grad {
        return None;
    }
    // dcol (k x hw) = W^T (k x oc) * dout (oc x hw)
    let mut dcol = vec![T::zero(); k * hw];
    T::gemm(
        k,
        oc,
        hw,
        T::one(),
        weight,
        1,
        k as isize,
        &dout.data,
        hw as isize,
        1,
        T::zero(),
        &mut dcol,
        hw as isize,
        1,
    );
    Some(col2im3x3(&dcol, in_channels, dout.height, dout.width))
}

/// 1x1 projection to a single channel: `out[p] = sum_c w[c] * in[c, p] + b`.
pub(crate) fn project1x1_forward<T: Scalar>(input: &Tensor3<T>, weight: &[T], bias: T) -> Vec<T> {
    let hw = input.plane_len();
    let mut out = vec![bias; hw];
    T::gemm(
        1,
        input.channels,
        hw,
        T::one(),
        weight,
        input.channels as isize,
        1,
        &input.data,
        hw as isize,
        1,
        T::one(),
        &mut out,
        hw as isize,
        1,
    );
    out
}

/// Backward of [`project1x1_forward`]; accumulates parameter gradients and
/// adds the input gradient into `dinput`.
pub(crate) fn project1x1_backward<T: Scalar>(
    dout: &[T],
    input: &Tensor3<T>,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut T,
    dinput: Option<&mut Tensor3<T>>,
) {
    let hw = input.plane_len();
    *dbias += dout.iter().copied().sum::<T>();
    // dW (1 x c) += dout (1 x hw) * in^T (hw x c)
    T::gemm(
        1,
        hw,
        input.channels,
        T::one(),
        dout,
        hw as isize,
        1,
        &input.data,
        1,
        hw as isize,
        T::one(),
        dweight,
        input.channels as isize,
        1,
    );
    if let Some(dinput) = dinput {
        // din (c x hw) += W^T (c x 1) * dout (1 x hw)
        T::gemm(
            input.channels,
            1,
            hw,
            T::one(),
            weight,
            1,
            1,
            dout,
            hw as isize,
            1,
            T::one(),
            &mut dinput.data,
            hw as isize,
            1,
        );
    }
}

pub(crate) fn relu_inplace<T: Scalar>(t: &mut Tensor3<T>) {
    for v in t.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the (post-activation) output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(grad: &mut Tensor3<T>, activated: &Tensor3<T>) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index (into the input) of every output cell.
pub(crate) fn maxpool2x2_forward<T: Scalar>(input: &Tensor3<T>) -> (Tensor3<T>, Vec<u32>) {
    let (c, h, w) = (input.channels, input.height, input.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = (ch * h + 2 * y) * w + 2 * x;
                let mut best = input.data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    // strict comparison keeps the first maximum on ties
                    if input.data[idx] > best {
                        best = input.data[idx];
                        best_idx = idx;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out.data[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2x2_backward<T: Scalar>(
    dout: &Tensor3<T>,
    argmax: &[u32],
    in_h: usize,
    in_w: usize,
) -> Tensor3<T> {
    let mut din = Tensor3::zeros(dout.channels, in_h, in_w);
    for (g, &idx) in dout.data.iter().zip(argmax) {
        din.data[idx as usize] += *g;
    }
    din
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sampling table for corner-aligned bilinear resampling along one axis.
#[derive(Debug, Clone)]
struct AxisTaps<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

impl<T: Scalar> AxisTaps<T> {
    fn new(src: usize, dst: usize) -> Self {
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for i in 0..dst {
            // source coordinate = i * (src - 1) / (dst - 1), exact in rationals
            let (num, den) = if dst > 1 { (i * (src - 1), dst - 1) } else { (0, 1) };
            let l = num / den;
            let rem = num % den;
            let h = (l + 1).min(src - 1);
            lo.push(l);
            hi.push(h);
            frac.push(T::lit(rem as f64) / T::lit(den as f64));
        }
        Self { lo, hi, frac }
    }
}

/// Corner-aligned bilinear resampling of one `src_h x src_w` plane.
pub fn bilinear_resize<T: Scalar>(
    src: &[T],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<T> {
    let ty = AxisTaps::<T>::new(src_h, dst_h);
    let tx = AxisTaps::<T>::new(src_w, dst_w);
    let mut out = vec![T::zero(); dst_h * dst_w];
    for y in 0..dst_h {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        let r0 = &src[y0 * src_w..(y0 + 1) * src_w];
        let r1 = &src[y1 * src_w..(y1 + 1) * src_w];
        for x in 0..dst_w {
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out[y * dst_w + x] = top + (bot - top) * fy;
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: distributes a `dst_h x dst_w` gradient
/// back onto the `src_h x src_w` grid.
pub(crate) fn bilinear_resize_backward<T: Scalar>(
    grad: &[T],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<T> {
    let ty = AxisTaps::<T>::new(src_h, dst_h);
    let tx = AxisTaps::<T>::new(src_w, dst_w);
    let mut out = vec![T::zero(); src_h * src_w];
    for y in 0..dst_h {
        let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
        for x in 0..dst_w {
            let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
            let g = grad[y * dst_w + x];
            let top = g * (T::one() - fy);
            let bot = g * fy;
            out[y0 * src_w + x0] += top * (T::one() - fx);
            out[y0 * src_w + x1] += top * fx;
            out[y1 * src_w + x0] += bot * (T::one() - fx);
            out[y1 * src_w + x1] += bot * fx;
        }
    }
    out
}
