//! Raw forward and backward kernels on contiguous NCHW buffers.
//!
//! Shape validation happens in the tape layer; these functions assume
//! consistent extents. All reductions run in a fixed order so results are
//! bitwise reproducible.

use crate::tensor::{Real, Shape, Tensor};

const LANES: usize = 8;

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    s + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - padding` lies
/// inside `0..w`.
fn valid_columns(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.padding > kx {
        ((g.w + g.padding - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample `(Cin, H, W)` into `(Cin*k*k, Ho*Wo)` patches.
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst_row[..lo].fill(T::zero());
                    dst_row[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.padding;
                        dst_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, d) in dst_row[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ox) * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let start = lo + kx - g.padding;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in lo..hi {
                            let ix = ox * g.stride + kx - g.padding;
                            dst[ix] = dst[ix] + src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Column block size; keeps one block of patches cache resident while every
/// output channel consumes it.
const BLOCK: usize = 256;

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let n = x.shape().n();
    let cout = weight.shape().n();
    let rows = g.col_rows();
    let p = g.col_cols();
    let mut out = Tensor::zeros(Shape::new(n, cout, g.out_h, g.out_w));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    let in_len = g.cin * g.h * g.w;
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
        for c0 in (0..p).step_by(BLOCK) {
            let c1 = (c0 + BLOCK).min(p);
            for co in 0..cout {
                let orow = &mut ob[co * p + c0..co * p + c1];
                orow.fill(bias.map_or(T::zero(), |bt| bt.data()[co]));
                let wrow = &weight.data()[co * rows..(co + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    axpy(wv, &cols[r * p + c0..r * p + c1], orow);
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeometry,
) -> ConvGrads<T> {
    let n = x.shape().n();
    let cout = weight.shape().n();
    let rows = g.col_rows();
    let p = g.col_cols();
    let in_len = g.cin * g.h * g.w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(Shape::new(1, cout, 1, 1));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    let mut dcols = vec![T::zero(); rows * p];
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let gb = &dout.data()[b * cout * p..(b + 1) * cout * p];
        for co in 0..cout {
            let grow = &gb[co * p..(co + 1) * p];
            db.data_mut()[co] = db.data()[co] + grow.iter().copied().sum::<T>();
        }
        for c0 in (0..p).step_by(BLOCK) {
            let c1 = (c0 + BLOCK).min(p);
            for co in 0..cout {
                let grow = &gb[co * p + c0..co * p + c1];
                let dwrow = &mut dw.data_mut()[co * rows..(co + 1) * rows];
                for (r, d) in dwrow.iter_mut().enumerate() {
                    *d = *d + dot(grow, &cols[r * p + c0..r * p + c1]);
                }
            }
        }
        for r in 0..rows {
            let drow = &mut dcols[r * p..(r + 1) * p];
            let w0 = weight.data()[r];
            for (d, &gv) in drow.iter_mut().zip(&gb[..p]) {
                *d = w0 * gv;
            }
            for co in 1..cout {
                axpy(weight.data()[co * rows + r], &gb[co * p..(co + 1) * p], drow);
            }
        }
        let dxb = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            for (d, &c) in dxb.iter_mut().zip(&dcols) {
                *d = *d + c;
            }
        } else {
            col2im(&dcols, g, dxb);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// 2x2 stride-2 max pooling. Returns the output and, for every output
/// element, the flat input offset that won (first in row-major window order).
pub(crate) fn maxpool2x2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = x.shape().0;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = src[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                out.data_mut()[o] = best;
                argmax.push(best_idx);
                o += 1;
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool2x2_backward<T: Real>(input_shape: Shape, argmax: &[usize], dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        dx.data_mut()[idx] = dx.data()[idx] + g;
    }
    dx
}

pub(crate) fn upsample_nearest2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, c, 2 * h, 2 * w));
    let (src, dst) = (x.data(), out.data_mut());
    for plane in 0..n * c {
        for y in 0..2 * h {
            let srow = &src[plane * h * w + (y / 2) * w..][..w];
            let drow = &mut dst[plane * 4 * h * w + y * 2 * w..][..2 * w];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2x_backward<T: Real>(input_shape: Shape, dout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape.0;
    let mut dx = Tensor::zeros(input_shape);
    let (src, dst) = (dout.data(), dx.data_mut());
    for plane in 0..n * c {
        for y in 0..2 * h {
            let grow = &src[plane * 4 * h * w + y * 2 * w..][..2 * w];
            let drow = &mut dst[plane * h * w + (y / 2) * w..][..w];
            for (x, &g) in grow.iter().enumerate() {
                drow[x / 2] = drow[x / 2] + g;
            }
        }
    }
    dx
}

/// Interpolation taps for output index `o` of a 2x bilinear resize
/// (half-pixel centers, edge clamped).
fn bilinear_taps(o: usize, len: usize) -> [(usize, f64); 2] {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let frac = src - i0 as f64;
    [(i0, 1.0 - frac), (i1, frac)]
}

pub(crate) fn upsample_bilinear2x_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let mut out = Tensor::zeros(Shape::new(n, c, 2 * h, 2 * w));
    let ytaps: Vec<_> = (0..2 * h).map(|o| bilinear_taps(o, h)).collect();
    let xtaps: Vec<_> = (0..2 * w).map(|o| bilinear_taps(o, w)).collect();
    let (src, dst) = (x.data(), out.data_mut());
    for plane in 0..n * c {
        let sp = &src[plane * h * w..(plane + 1) * h * w];
        let dp = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for (oy, ty) in ytaps.iter().enumerate() {
            for (ox, tx) in xtaps.iter().enumerate() {
                let mut acc = T::zero();
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        acc = acc + T::from_f64(wy * wx) * sp[iy * w + ix];
                    }
                }
                dp[oy * 2 * w + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear2x_backward<T: Real>(input_shape: Shape, dout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape.0;
    let mut dx = Tensor::zeros(input_shape);
    let ytaps: Vec<_> = (0..2 * h).map(|o| bilinear_taps(o, h)).collect();
    let xtaps: Vec<_> = (0..2 * w).map(|o| bilinear_taps(o, w)).collect();
    let (src, dst) = (dout.data(), dx.data_mut());
    for plane in 0..n * c {
        let gp = &src[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dp = &mut dst[plane * h * w..(plane + 1) * h * w];
        for (oy, ty) in ytaps.iter().enumerate() {
            for (ox, tx) in xtaps.iter().enumerate() {
                let g = gp[oy * 2 * w + ox];
                for &(iy, wy) in ty {
                    for &(ix, wx) in tx {
                        dp[iy * w + ix] = dp[iy * w + ix] + T::from_f64(wy * wx) * g;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn concat_channels_forward<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape().0;
    let total_c: usize = parts.iter().map(|p| p.shape().c()).sum();
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for b in 0..n {
        for p in parts {
            let len = p.shape().c() * h * w;
            data.extend_from_slice(&p.data()[b * len..(b + 1) * len]);
        }
    }
    Tensor::from_vec(Shape::new(n, total_c, h, w), data).expect("concat extents")
}

pub(crate) fn concat_channels_backward<T: Real>(shapes: &[Shape], dout: &Tensor<T>) -> Vec<Tensor<T>> {
    let [n, total_c, h, w] = dout.shape().0;
    let mut grads: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.numel())).collect();
    for b in 0..n {
        let mut offset = b * total_c * h * w;
        for (s, g) in shapes.iter().zip(grads.iter_mut()) {
            let len = s.c() * h * w;
            g.extend_from_slice(&dout.data()[offset..offset + len]);
            offset += len;
        }
    }
    shapes
        .iter()
        .zip(grads)
        .map(|(&s, g)| Tensor::from_vec(s, g).expect("concat slice extents"))
        .collect()
}

pub(crate) fn prelu_forward<T: Real>(x: &Tensor<T>, slope: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let a = slope.data()[ch];
            let start = (b * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                if *v < T::zero() {
                    *v = a * *v;
                }
            }
        }
    }
    out
}

pub(crate) fn prelu_backward<T: Real>(x: &Tensor<T>, slope: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape().0;
    let plane = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(slope.shape());
    for b in 0..n {
        for ch in 0..c {
            let a = slope.data()[ch];
            let start = (b * c + ch) * plane;
            let xs = &x.data()[start..start + plane];
            let gs = &dout.data()[start..start + plane];
            let mut acc = T::zero();
            for (i, (&xv, &g)) in xs.iter().zip(gs).enumerate() {
                if xv < T::zero() {
                    dx.data_mut()[start + i] = a * g;
                    acc = acc + xv * g;
                } else {
                    dx.data_mut()[start + i] = g;
                }
            }
            da.data_mut()[ch] = da.data()[ch] + acc;
        }
    }
    (dx, da)
}

/// Softmax over the last axis.
pub(crate) fn softmax_rows_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.shape().w();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let k = y.shape().w();
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(k)
        .zip(dout.data().chunks_exact(k))
        .zip(dx.data_mut().chunks_exact_mut(k))
    {
        let inner = dot(yr, gr);
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - inner);
        }
    }
    dx
}

/// Batched `(N, C, R, K) x (N, C, K, S) -> (N, C, R, S)`.
pub(crate) fn matmul_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, c, r, k] = a.shape().0;
    let s = b.shape().w();
    let mut out = Tensor::zeros(Shape::new(n, c, r, s));
    for m in 0..n * c {
        let am = &a.data()[m * r * k..(m + 1) * r * k];
        let bm = &b.data()[m * k * s..(m + 1) * k * s];
        let om = &mut out.data_mut()[m * r * s..(m + 1) * r * s];
        for i in 0..r {
            let orow = &mut om[i * s..(i + 1) * s];
            for kk in 0..k {
                axpy(am[i * k + kk], &bm[kk * s..(kk + 1) * s], orow);
            }
        }
    }
    out
}

pub(crate) fn matmul_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, r, k] = a.shape().0;
    let s = b.shape().w();
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for m in 0..n * c {
        let am = &a.data()[m * r * k..(m + 1) * r * k];
        let bm = &b.data()[m * k * s..(m + 1) * k * s];
        let gm = &dout.data()[m * r * s..(m + 1) * r * s];
        let dam = &mut da.data_mut()[m * r * k..(m + 1) * r * k];
        for i in 0..r {
            let grow = &gm[i * s..(i + 1) * s];
            for kk in 0..k {
                dam[i * k + kk] = dot(grow, &bm[kk * s..(kk + 1) * s]);
            }
        }
        let dbm = &mut db.data_mut()[m * k * s..(m + 1) * k * s];
        for i in 0..r {
            let grow = &gm[i * s..(i + 1) * s];
            for kk in 0..k {
                axpy(am[i * k + kk], grow, &mut dbm[kk * s..(kk + 1) * s]);
            }
        }
    }
    (da, db)
}

pub(crate) fn permute_shape(shape: Shape, perm: [usize; 4]) -> Shape {
    Shape(perm.map(|p| shape.0[p]))
}

/// `out[i_0, i_1, i_2, i_3] = x[j]` with `j[perm[d]] = i_d`.
pub(crate) fn permute<T: Real>(x: &Tensor<T>, perm: [usize; 4]) -> Tensor<T> {
    let out_shape = permute_shape(x.shape(), perm);
    let in_strides = x.shape().strides();
    let strides = perm.map(|p| in_strides[p]);
    let [d0, d1, d2, d3] = out_shape.0;
    let mut data = Vec::with_capacity(out_shape.numel());
    let src = x.data();
    for i0 in 0..d0 {
        for i1 in 0..d1 {
            for i2 in 0..d2 {
                let base = i0 * strides[0] + i1 * strides[1] + i2 * strides[2];
                for i3 in 0..d3 {
                    data.push(src[base + i3 * strides[3]]);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, data).expect("permute extents")
}

pub(crate) fn inverse_permutation(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..19).map(|i| i as f64).collect();
        let b = vec![1.0; 19];
        assert_eq!(dot(&a, &b), 171.0);
    }

    #[test]
    fn bilinear_taps_interior_and_edges() {
        assert_eq!(bilinear_taps(0, 4), [(0, 1.0), (1, 0.0)]);
        assert_eq!(bilinear_taps(1, 4), [(0, 0.75), (1, 0.25)]);
        assert_eq!(bilinear_taps(2, 4), [(0, 0.25), (1, 0.75)]);
        assert_eq!(bilinear_taps(7, 4), [(3, 0.75), (3, 0.25)]);
    }

    #[test]
    fn permutation_inverse() {
        let p = [0, 2, 3, 1];
        let inv = inverse_permutation(p);
        assert_eq!(inv, [0, 3, 1, 2]);
    }
}
