//! Dense numeric kernels shared by the graph operations.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`, all row-major. A transposed operand is stored in its
/// untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // The packed kernel tiles rows by 8, so a short, wide product runs
    // faster as its transpose.
    let swap = m < 8 && n > m;
    // SAFETY: the slice lengths checked above cover every index the strides
    // can reach for the given m, k, n.
    unsafe {
        if swap {
            matrixmultiply::dgemm(
                n, k, m, alpha, b.as_ptr(), csb, rsb, a.as_ptr(), csa, rsa, beta, c.as_mut_ptr(), 1, n as isize,
            );
        } else {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

/// Spatial geometry of a 2-D sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = in_h + 2 * pad;
        let span_w = in_w + 2 * pad;
        if kernel == 0 || stride == 0 || span_h < kernel || span_w < kernel {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (span_h - kernel) / stride + 1,
            out_w: (span_w - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row read by output row `oh` at kernel row `ki`, if inside.
    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        (oh * self.stride + ki).checked_sub(self.pad).filter(|&ih| ih < self.in_h)
    }

    /// Output columns `lo..hi` whose kernel column `kj` lands inside the input.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kj).div_ceil(s);
        let hi = if self.in_w + self.pad > kj {
            ((self.in_w + self.pad - kj - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `img` (`channels x in_h x in_w`) into `rows x cols` patches.
pub(crate) fn im2col(img: &[f64], win: &Window, cols: &mut [f64]) {
    debug_assert_eq!(cols.len(), win.rows() * win.cols());
    if win.is_pointwise() {
        cols.copy_from_slice(img);
        return;
    }
    let (k, s) = (win.kernel, win.stride);
    let plane = win.in_h * win.in_w;
    let ncols = win.cols();
    for c in 0..win.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = win.valid_cols(kj);
                for oh in 0..win.out_h {
                    let line = &mut dst[oh * win.out_w..(oh + 1) * win.out_w];
                    let Some(ih) = win.input_row(oh, ki) else {
                        line.fill(0.0);
                        continue;
                    };
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let start = ih * win.in_w + lo * s + kj - win.pad;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, out) in line[lo..hi].iter_mut().enumerate() {
                                *out = src[start + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patches back into `img`.
pub(crate) fn col2im_add(cols: &[f64], win: &Window, img: &mut [f64]) {
    debug_assert_eq!(cols.len(), win.rows() * win.cols());
    if win.is_pointwise() {
        for (d, s) in img.iter_mut().zip(cols) {
            *d += s;
        }
        return;
    }
    let (k, s) = (win.kernel, win.stride);
    let plane = win.in_h * win.in_w;
    let ncols = win.cols();
    for c in 0..win.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = win.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oh in 0..win.out_h {
                    let Some(ih) = win.input_row(oh, ki) else {
                        continue;
                    };
                    let line = &src[oh * win.out_w + lo..oh * win.out_w + hi];
                    let start = ih * win.in_w + lo * s + kj - win.pad;
                    if s == 1 {
                        for (d, v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst[start + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], n: usize, win: &Window, weight: &[f64], co: usize) -> Vec<f64> {
    let in_plane = win.channels * win.in_h * win.in_w;
    let out_plane = co * win.cols();
    let mut out = vec![0.0; n * out_plane];
    let mut cols = vec![0.0; win.rows() * win.cols()];
    for b in 0..n {
        im2col(&x[b * in_plane..(b + 1) * in_plane], win, &mut cols);
        gemm(
            co,
            win.rows(),
            win.cols(),
            1.0,
            weight,
            false,
            &cols,
            false,
            0.0,
            &mut out[b * out_plane..(b + 1) * out_plane],
        );
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to its input and weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    win: &Window,
    weight: &[f64],
    co: usize,
    grad_out: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_plane = win.channels * win.in_h * win.in_w;
    let out_plane = co * win.cols();
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; win.rows() * win.cols()];
    for b in 0..n {
        let gy = &grad_out[b * out_plane..(b + 1) * out_plane];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * in_plane..(b + 1) * in_plane], win, &mut cols);
            gemm(co, win.cols(), win.rows(), 1.0, gy, false, &cols, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(win.rows(), co, win.cols(), 1.0, weight, true, gy, false, 0.0, &mut cols);
            col2im_add(&cols, win, &mut gx[b * in_plane..(b + 1) * in_plane]);
        }
    }
    (gx, gw)
}

/// Transposed convolution. `win` describes the *adjoint* direct convolution
/// (output image -> input image), so `win.channels` is the output channel
/// count, `win.in_*` the output spatial size and `win.out_*` the input
/// spatial size. `x` is `[n, ci, out_h, out_w]` in window terms, `weight` is
/// `[ci, co, k, k]`.
pub(crate) fn conv_transpose2d_forward(x: &[f64], n: usize, ci: usize, win: &Window, weight: &[f64]) -> Vec<f64> {
    let in_plane = ci * win.cols();
    let out_plane = win.channels * win.in_h * win.in_w;
    let mut out = vec![0.0; n * out_plane];
    let mut cols = vec![0.0; win.rows() * win.cols()];
    for b in 0..n {
        gemm(
            win.rows(),
            ci,
            win.cols(),
            1.0,
            weight,
            true,
            &x[b * in_plane..(b + 1) * in_plane],
            false,
            0.0,
            &mut cols,
        );
        col2im_add(&cols, win, &mut out[b * out_plane..(b + 1) * out_plane]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    n: usize,
    ci: usize,
    win: &Window,
    weight: &[f64],
    grad_out: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_plane = ci * win.cols();
    let out_plane = win.channels * win.in_h * win.in_w;
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gw = want_w.then(|| vec![0.0; weight.len()]);
    let mut cols = vec![0.0; win.rows() * win.cols()];
    for b in 0..n {
        im2col(&grad_out[b * out_plane..(b + 1) * out_plane], win, &mut cols);
        if let Some(gx) = gx.as_mut() {
            gemm(
                ci,
                win.rows(),
                win.cols(),
                1.0,
                weight,
                false,
                &cols,
                false,
                0.0,
                &mut gx[b * in_plane..(b + 1) * in_plane],
            );
        }
        if let Some(gw) = gw.as_mut() {
            gemm(
                ci,
                win.cols(),
                win.rows(),
                1.0,
                &x[b * in_plane..(b + 1) * in_plane],
                false,
                &cols,
                true,
                1.0,
                gw,
            );
        }
    }
    (gx, gw)
}
