//! Plain loops for the dense products used by the graph. Row-major everywhere.

use crate::scalar::Scalar;

/// Strided read-only matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer size");
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }
}

/// `c[m×n] += a · b` with `c` row-major.
pub fn gemm_acc<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "inner dimensions");
    assert_eq!(c.len(), m * n, "output buffer size");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: both views were built from buffers of exactly rows×cols
    // elements, so every strided index is in bounds; `c` is a distinct
    // mutable borrow of m×n elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            (a.rs as isize, a.cs as isize),
            b.data.as_ptr(),
            (b.rs as isize, b.cs as isize),
            T::one(),
            c.as_mut_ptr(),
            (n as isize, 1),
        );
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(MatRef::row_major(a, m, k), MatRef::row_major(b, k, n), c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(MatRef::row_major(a, m, k).t(), MatRef::row_major(b, m, n), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(MatRef::row_major(a, m, k), MatRef::row_major(b, n, k).t(), c);
}

/// Geometry of a 2-D convolution over one `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    /// Rows of the patch matrix: `C·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.kernel_h > 0
            && self.kernel_w > 0
            && self.height + 2 * self.padding >= self.kernel_h
            && self.width + 2 * self.padding >= self.kernel_w
    }

    /// Input coordinate for output `(oy, ox)` and kernel tap `(ky, kx)`, `None` in the padding.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

impl ConvGeometry {
    /// Output columns `[lo, hi)` whose tap `k` lands inside a row of width `len`.
    #[inline]
    fn tap_range(&self, k: usize, out_len: usize, len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.padding.saturating_sub(k).div_ceil(s).min(out_len);
        // first o with o·s + k − pad ≥ len
        let hi = (len + self.padding).saturating_sub(k).div_ceil(s).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Unfolds one image into a `[C·kh·kw, Ho·Wo]` patch matrix; padded taps are zero.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, col: &mut [T]) {
    im2col_ld(img, g, col, g.positions());
}

/// [`im2col`] into rows that are `ld` apart.
pub fn im2col_ld<T: Scalar>(img: &[T], g: &ConvGeometry, col: &mut [T], ld: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    debug_assert!(col.len() >= (g.patch_len() - 1) * ld + positions);
    let plane_len = g.height * g.width;
    for c in 0..g.in_channels {
        let plane = &img[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kernel_h {
            let (ylo, yhi) = g.tap_range(ky, ho, g.height);
            for kx in 0..g.kernel_w {
                let (xlo, xhi) = g.tap_range(kx, wo, g.width);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * ld..row * ld + positions];
                dst[..ylo * wo].fill(T::zero());
                dst[yhi * wo..].fill(T::zero());
                for oy in ylo..yhi {
                    let y = oy * g.stride + ky - g.padding;
                    let src = &plane[y * g.width..(y + 1) * g.width];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    d[..xlo].fill(T::zero());
                    d[xhi..].fill(T::zero());
                    let x0 = xlo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        d[xlo..xhi].copy_from_slice(&src[x0..x0 + (xhi - xlo)]);
                    } else {
                        for (i, v) in d[xlo..xhi].iter_mut().enumerate() {
                            *v = src[x0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeometry, img: &mut [T]) {
    col2im_ld_acc(col, g, img, g.positions());
}

/// Adjoint of [`im2col_ld`].
pub fn col2im_ld_acc<T: Scalar>(col: &[T], g: &ConvGeometry, img: &mut [T], ld: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    let plane_len = g.height * g.width;
    for c in 0..g.in_channels {
        let plane = &mut img[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kernel_h {
            let (ylo, yhi) = g.tap_range(ky, ho, g.height);
            for kx in 0..g.kernel_w {
                let (xlo, xhi) = g.tap_range(kx, wo, g.width);
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * ld..row * ld + positions];
                for oy in ylo..yhi {
                    let y = oy * g.stride + ky - g.padding;
                    let dst = &mut plane[y * g.width..(y + 1) * g.width];
                    let x0 = xlo * g.stride + kx - g.padding;
                    for (i, &v) in src[oy * wo + xlo..oy * wo + xhi].iter().enumerate() {
                        dst[x0 + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Patch matrix of a whole batch: `[C·kh·kw, B·Ho·Wo]`, image `b` in columns `b·P..(b+1)·P`.
pub fn batch_im2col<T: Scalar>(x: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let in_len = g.in_channels * g.height * g.width;
    let (p, ld) = (g.positions(), batch * g.positions());
    let mut col = vec![T::zero(); g.patch_len() * ld];
    for b in 0..batch {
        im2col_ld(&x[b * in_len..(b + 1) * in_len], g, &mut col[b * p..], ld);
    }
    col
}

/// `out[b] = W · im2col(x[b])` for a batch; `w` is `[O, C·kh·kw]`.
/// Also returns the batch patch matrix, which the backward pass reuses.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    w: &[T],
    out_channels: usize,
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let (p, k) = (g.positions(), g.patch_len());
    let col = batch_im2col(x, batch, g);
    let mut y = vec![T::zero(); out_channels * batch * p];
    matmul_acc(w, &col, &mut y, out_channels, k, batch * p);
    // [O, B, P] → [B, O, P]
    let mut out = vec![T::zero(); batch * out_channels * p];
    for o in 0..out_channels {
        for b in 0..batch {
            let src = &y[(o * batch + b) * p..(o * batch + b + 1) * p];
            out[(b * out_channels + o) * p..(b * out_channels + o + 1) * p].copy_from_slice(src);
        }
    }
    (out, col)
}

/// Gradients of [`conv2d_forward`] given its patch matrix `col`; either
/// output may be skipped (`col` is only read for the weight gradient).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    col: &[T],
    batch: usize,
    w: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
) {
    let in_len = g.in_channels * g.height * g.width;
    let (p, k) = (g.positions(), g.patch_len());
    let bp = batch * p;
    // [B, O, P] → [O, B, P]
    let mut dy = vec![T::zero(); out_channels * bp];
    for b in 0..batch {
        for o in 0..out_channels {
            let src = &grad_out[(b * out_channels + o) * p..(b * out_channels + o + 1) * p];
            dy[(o * batch + b) * p..(o * batch + b + 1) * p].copy_from_slice(src);
        }
    }
    if let Some(gw) = grad_w {
        matmul_a_bt_acc(&dy, col, gw, out_channels, bp, k);
    }
    if let Some(gx) = grad_x {
        let mut dcol = vec![T::zero(); k * bp];
        matmul_at_b_acc(w, &dy, &mut dcol, out_channels, k, bp);
        for b in 0..batch {
            col2im_ld_acc(&dcol[b * p..], g, &mut gx[b * in_len..(b + 1) * in_len], bp);
        }
    }
}
