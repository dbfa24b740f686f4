//! Reference compute loops shared by the forward and backward passes.
//!
//! Every accumulation runs in a fixed order (sequential, or fixed lane
//! partial sums for dot products), so results are bitwise reproducible. The loops also tally the multiplications they
//! execute, which the cost model uses as a brute-force cross-check.

use std::cell::Cell;

use crate::real::Real;

thread_local! {
    static MULTIPLY_TALLY: Cell<u64> = const { Cell::new(0) };
}

/// Multiplications executed by convolution/GEMM loops on this thread.
pub mod tally {
    use super::MULTIPLY_TALLY;

    pub fn reset() {
        MULTIPLY_TALLY.with(|t| t.set(0));
    }

    pub fn read() -> u64 {
        MULTIPLY_TALLY.with(|t| t.get())
    }

    pub(crate) fn add(n: u64) {
        MULTIPLY_TALLY.with(|t| t.set(t.get() + n));
    }
}

/// Output extent of a strided window: floor((len + 2·pad − k)/stride) + 1.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major. The sum over the inner index
/// runs strictly in increasing order for every output element.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        let x = |r: usize, p: usize| a[(i + r) * k + p];
        let mut p = 0;
        while p + 4 <= k {
            let xs = [
                [x(0, p), x(0, p + 1), x(0, p + 2), x(0, p + 3)],
                [x(1, p), x(1, p + 1), x(1, p + 2), x(1, p + 3)],
                [x(2, p), x(2, p + 1), x(2, p + 2), x(2, p + 3)],
                [x(3, p), x(3, p + 1), x(3, p + 2), x(3, p + 3)],
            ];
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                let (v0, v1, v2, v3) = (b0[j], b1[j], b2[j], b3[j]);
                c0[j] = (((c0[j] + xs[0][0] * v0) + xs[0][1] * v1) + xs[0][2] * v2) + xs[0][3] * v3;
                c1[j] = (((c1[j] + xs[1][0] * v0) + xs[1][1] * v1) + xs[1][2] * v2) + xs[1][3] * v3;
                c2[j] = (((c2[j] + xs[2][0] * v0) + xs[2][1] * v1) + xs[2][2] * v2) + xs[2][3] * v3;
                c3[j] = (((c3[j] + xs[3][0] * v0) + xs[3][1] * v1) + xs[3][2] * v2) + xs[3][3] * v3;
            }
            p += 4;
        }
        while p < k {
            let xs = [x(0, p), x(1, p), x(2, p), x(3, p)];
            let b0 = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let v = b0[j];
                c0[j] = c0[j] + xs[0] * v;
                c1[j] = c1[j] + xs[1] * v;
                c2[j] = c2[j] + xs[2] * v;
                c3[j] = c3[j] + xs[3] * v;
            }
            p += 1;
        }
        i += 4;
    }
    for i in i..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                c_row[j] = (((c_row[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let a0 = a_row[p];
            let b0 = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a0 * b0[j];
            }
            p += 1;
        }
    }
    tally::add((m * k * n) as u64);
}

/// Dot product with eight interleaved partial sums combined pairwise, then
/// the tail.
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::ZERO; 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut tail = T::ZERO;
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ` as row-by-row [`dot`] products.
pub fn gemm_nt_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    tally::add((m * k * n) as u64);
}

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Window geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        Some(Window {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_out_len(height, kernel, stride, pad)?,
            out_w: conv_out_len(width, kernel, stride, pad)?,
        })
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when im2col would be a plain copy.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn padded_h(&self) -> usize {
        self.height + 2 * self.pad
    }

    fn padded_w(&self) -> usize {
        self.width + 2 * self.pad
    }
}

/// Unfold one `[C,H,W]` image into `[C·k·k, OH·OW]` columns; padding is
/// materialized as zeros.
pub fn im2col<T: Real>(win: &Window, image: &[T]) -> Vec<T> {
    let (k, s, p) = (win.kernel, win.stride, win.pad as isize);
    let area = win.out_area();
    let mut cols = vec![T::ZERO; win.channels * k * k * area];
    for c in 0..win.channels {
        let plane = &image[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * area;
                for oy in 0..win.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    let dst = &mut cols[row + oy * win.out_w..row + (oy + 1) * win.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < win.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C,H,W]` image.
pub fn col2im_acc<T: Real>(win: &Window, cols: &[T], image: &mut [T]) {
    let (k, s, p) = (win.kernel, win.stride, win.pad as isize);
    let area = win.out_area();
    for c in 0..win.channels {
        let plane = &mut image[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * area;
                for oy in 0..win.out_h {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= win.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * win.width..(iy as usize + 1) * win.width];
                    let src = &cols[row + oy * win.out_w..row + (oy + 1) * win.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < win.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Copy a `[C,H,W]` image into a zero-padded `[C,H+2p,W+2p]` buffer.
pub fn pad_image<T: Real>(win: &Window, image: &[T]) -> Vec<T> {
    let (ph, pw) = (win.padded_h(), win.padded_w());
    let mut out = vec![T::ZERO; win.channels * ph * pw];
    for c in 0..win.channels {
        for y in 0..win.height {
            let src = &image[(c * win.height + y) * win.width..][..win.width];
            let dst = &mut out[(c * ph + y + win.pad) * pw + win.pad..][..win.width];
            dst.copy_from_slice(src);
        }
    }
    out
}

/// Columns of a padded plane regrouped by `column mod stride`, so that a
/// strided window walk reads contiguous memory: row `r`, phase `q` holds
/// columns `q, q + s, q + 2s, …`.
struct PhaseSplit {
    stride: usize,
    cols: usize,
}

impl PhaseSplit {
    fn new(win: &Window) -> Self {
        PhaseSplit {
            stride: win.stride,
            cols: win.padded_w().div_ceil(win.stride),
        }
    }

    fn row_len(&self) -> usize {
        self.stride * self.cols
    }

    fn split<T: Real>(&self, plane: &[T], pw: usize, out: &mut [T]) {
        let s = self.stride;
        for (r, src) in plane.chunks_exact(pw).enumerate() {
            let dst = &mut out[r * self.row_len()..(r + 1) * self.row_len()];
            for q in 0..s.min(pw) {
                let phase = &mut dst[q * self.cols..(q + 1) * self.cols];
                for (d, &v) in phase.iter_mut().zip(src[q..].iter().step_by(s)) {
                    *d = v;
                }
            }
        }
    }

    fn merge_acc<T: Real>(&self, split: &[T], pw: usize, plane: &mut [T]) {
        let s = self.stride;
        for (r, dst) in plane.chunks_exact_mut(pw).enumerate() {
            let src = &split[r * self.row_len()..(r + 1) * self.row_len()];
            for q in 0..s.min(pw) {
                let phase = &src[q * self.cols..(q + 1) * self.cols];
                for (d, &v) in dst[q..].iter_mut().step_by(s).zip(phase) {
                    *d += v;
                }
            }
        }
    }

    /// Offset of the `out_w` inputs read by tap `(ky, kx)` for output row `oy`.
    fn tap(&self, oy: usize, ky: usize, kx: usize) -> usize {
        (oy * self.stride + ky) * self.row_len() + (kx % self.stride) * self.cols + kx / self.stride
    }
}

/// Per-channel convolution of one padded image. `out` is `[C, OH·OW]` and
/// must start zeroed; bias is not applied here. Every output sums its taps
/// in row-major kernel order.
pub fn depthwise_forward<T: Real>(win: &Window, padded: &[T], weight: &[T], out: &mut [T]) {
    let k = win.kernel;
    let (ph, pw) = (win.padded_h(), win.padded_w());
    let area = win.out_area();
    let ps = PhaseSplit::new(win);
    let mut split = vec![T::ZERO; if win.stride == 1 { 0 } else { ph * ps.row_len() }];
    for c in 0..win.channels {
        let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
        let split: &[T] = if win.stride == 1 {
            plane
        } else {
            ps.split(plane, pw, &mut split);
            &split
        };
        let dst = &mut out[c * area..(c + 1) * area];
        for ky in 0..k {
            for kx in 0..k {
                let w = weight[(c * k + ky) * k + kx];
                for oy in 0..win.out_h {
                    let src = &split[ps.tap(oy, ky, kx)..][..win.out_w];
                    let row = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    for (d, &x) in row.iter_mut().zip(src) {
                        *d = *d + w * x;
                    }
                }
            }
        }
    }
    tally::add((win.channels * k * k * area) as u64);
}

/// Gradients of [`depthwise_forward`] for one image: accumulates into the
/// weight gradient and (optionally) the padded input gradient.
pub fn depthwise_backward<T: Real>(
    win: &Window,
    padded: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<&mut [T]>,
    grad_padded: Option<&mut [T]>,
) {
    let k = win.kernel;
    let (ph, pw) = (win.padded_h(), win.padded_w());
    let area = win.out_area();
    let ps = PhaseSplit::new(win);
    let mut split = vec![T::ZERO; if win.stride == 1 { 0 } else { ph * ps.row_len() }];
    if let Some(gw) = grad_weight {
        let mut acc = vec![T::ZERO; win.out_w];
        for c in 0..win.channels {
            let plane = &padded[c * ph * pw..(c + 1) * ph * pw];
            let src_plane: &[T] = if win.stride == 1 {
                plane
            } else {
                ps.split(plane, pw, &mut split);
                &split
            };
            let g = &grad_out[c * area..(c + 1) * area];
            for ky in 0..k {
                for kx in 0..k {
                    acc.fill(T::ZERO);
                    for oy in 0..win.out_h {
                        let src = &src_plane[ps.tap(oy, ky, kx)..][..win.out_w];
                        let row = &g[oy * win.out_w..(oy + 1) * win.out_w];
                        for ((a, &gv), &x) in acc.iter_mut().zip(row).zip(src) {
                            *a = *a + gv * x;
                        }
                    }
                    let mut total = T::ZERO;
                    for &a in &acc {
                        total += a;
                    }
                    gw[(c * k + ky) * k + kx] += total;
                }
            }
        }
        tally::add((win.channels * k * k * area) as u64);
    }
    if let Some(gp) = grad_padded {
        for c in 0..win.channels {
            let plane = &mut gp[c * ph * pw..(c + 1) * ph * pw];
            let dst_plane: &mut [T] = if win.stride == 1 {
                plane
            } else {
                split.fill(T::ZERO);
                &mut split
            };
            let g = &grad_out[c * area..(c + 1) * area];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weight[(c * k + ky) * k + kx];
                    for oy in 0..win.out_h {
                        let row = &g[oy * win.out_w..(oy + 1) * win.out_w];
                        let dst = &mut dst_plane[ps.tap(oy, ky, kx)..][..win.out_w];
                        for (d, &gv) in dst.iter_mut().zip(row) {
                            *d += w * gv;
                        }
                    }
                }
            }
            if win.stride != 1 {
                ps.merge_acc(&split, pw, &mut gp[c * ph * pw..(c + 1) * ph * pw]);
            }
        }
        tally::add((win.channels * k * k * area) as u64);
    }
}

/// Crop the interior of a padded `[C,H+2p,W+2p]` buffer, adding into `image`.
pub fn unpad_acc<T: Real>(win: &Window, padded: &[T], image: &mut [T]) {
    let (ph, pw) = (win.padded_h(), win.padded_w());
    for c in 0..win.channels {
        for y in 0..win.height {
            let src = &padded[(c * ph + y + win.pad) * pw + win.pad..][..win.width];
            let dst = &mut image[(c * win.height + y) * win.width..][..win.width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
}

/// Source taps for one axis of align-corners-false bilinear resampling.
#[derive(Debug, Clone)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LinearTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut taps = LinearTaps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(if hi == lo { 0.0 } else { src - lo as f64 });
        }
        taps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_rule() {
        assert_eq!(conv_out_len(512, 4, 2, 1), Some(256));
        assert_eq!(conv_out_len(1024, 4, 2, 1), Some(512));
        assert_eq!(conv_out_len(3, 3, 1, 0), Some(1));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
    }

    #[test]
    fn gemm_matches_naive_and_tallies() {
        let (m, k, n) = (3, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        tally::reset();
        gemm_acc(m, k, n, &a, &b, &mut c);
        assert_eq!(tally::read(), (m * k * n) as u64);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                assert_eq!(c[i * n + j], acc);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..2 * 9 * win.out_area()).map(|i| (i as f64 * 0.3).cos()).collect();
        let cols = im2col(&win, &x);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&win, &y, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_taps_half_pixel() {
        let t = LinearTaps::new(2, 4);
        assert_eq!(t.lo, vec![0, 0, 0, 1]);
        assert_eq!(t.frac, vec![0.0, 0.25, 0.75, 0.0]);
    }
}
