//! Raw numeric kernels behind the differentiable ops.

use crate::par;

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k`
/// and `op(b)` of shape `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    // SAFETY: slice lengths were checked against the declared matrix extents and
    // the strides above address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution without bias. `x` is `[n, ci, h, w]`, `weight` is
/// `[co, ci, k, k]`; returns `[n, co, ho, wo]` data.
pub fn conv2d_forward(x: &[f64], batch: usize, g: &ConvGeom, weight: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * ho * wo;
    let mut out = vec![0.0; batch * out_len];
    par::for_each_chunk(&mut out, out_len, |n, dst| {
        let xs = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.out_channels, g.col_rows(), ho * wo, 1.0, weight, false, xs, false, 0.0, dst);
        } else {
            let mut col = vec![0.0; g.col_rows() * ho * wo];
            im2col(xs, g, &mut col);
            gemm(g.out_channels, g.col_rows(), ho * wo, 1.0, weight, false, &col, false, 0.0, dst);
        }
    });
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_backward_input(gout: &[f64], batch: usize, g: &ConvGeom, weight: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * ho * wo;
    let mut dx = vec![0.0; batch * in_len];
    par::for_each_chunk(&mut dx, in_len, |n, dst| {
        let gs = &gout[n * out_len..(n + 1) * out_len];
        if g.is_pointwise() {
            gemm(g.col_rows(), g.out_channels, ho * wo, 1.0, weight, true, gs, false, 0.0, dst);
        } else {
            let mut col = vec![0.0; g.col_rows() * ho * wo];
            gemm(g.col_rows(), g.out_channels, ho * wo, 1.0, weight, true, gs, false, 0.0, &mut col);
            col2im(&col, g, dst);
        }
    });
    dx
}

/// Gradient of [`conv2d_forward`] with respect to its weight, summed over the batch
/// in sample order.
pub fn conv2d_backward_weight(gout: &[f64], x: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * ho * wo;
    let wlen = g.out_channels * g.col_rows();
    let partials = par::map_range(batch, |n| {
        let gs = &gout[n * out_len..(n + 1) * out_len];
        let xs = &x[n * in_len..(n + 1) * in_len];
        let mut dw = vec![0.0; wlen];
        if g.is_pointwise() {
            gemm(g.out_channels, ho * wo, g.col_rows(), 1.0, gs, false, xs, true, 0.0, &mut dw);
        } else {
            let mut col = vec![0.0; g.col_rows() * ho * wo];
            im2col(xs, g, &mut col);
            gemm(g.out_channels, ho * wo, g.col_rows(), 1.0, gs, false, &col, true, 0.0, &mut dw);
        }
        dw
    });
    let mut total = vec![0.0; wlen];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Direct sliding-window convolution of a single channel plane with a ones
/// kernel: returns, per output position, the number of in-bounds ones under the
/// window. Used for partial-convolution mask bookkeeping.
pub fn window_sum(mask: &[f64], height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Vec<f64> {
    let g = ConvGeom {
        in_channels: 1,
        height,
        width,
        out_channels: 1,
        kernel,
        stride,
        pad,
    };
    let (ho, wo) = (g.out_height(), g.out_width());
    // integral image for O(1) box sums
    let mut integral = vec![0.0; (height + 1) * (width + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += mask[y * width + x];
            integral[(y + 1) * (width + 1) + x + 1] = integral[y * (width + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        let y0 = (oy * stride) as isize - pad as isize;
        let y1 = (y0 + kernel as isize).min(height as isize).max(0) as usize;
        let y0 = y0.max(0) as usize;
        for ox in 0..wo {
            let x0 = (ox * stride) as isize - pad as isize;
            let x1 = (x0 + kernel as isize).min(width as isize).max(0) as usize;
            let x0 = x0.max(0) as usize;
            if y1 <= y0 || x1 <= x0 {
                continue;
            }
            let w1 = width + 1;
            out[oy * wo + ox] = integral[y1 * w1 + x1] - integral[y0 * w1 + x1] - integral[y1 * w1 + x0]
                + integral[y0 * w1 + x0];
        }
    }
    out
}

/// Half-width of the truncated Gaussian kernel used for a given standard deviation.
pub fn gaussian_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil().max(1.0) as usize
}

/// Unnormalized Gaussian taps `exp(-d²/2σ²)` for `d in -r..=r`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = gaussian_radius(sigma) as isize;
    (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Per-position normalizer: sum of taps that fall inside `0..len`.
fn tap_normalizers(taps: &[f64], len: usize) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    (0..len as isize)
        .map(|i| {
            (-r..=r)
                .filter(|d| (0..len as isize).contains(&(i + d)))
                .map(|d| taps[(d + r) as usize])
                .sum()
        })
        .collect()
}

/// Border-renormalized separable Gaussian blur over every `h x w` plane of `x`.
pub fn blur_forward(x: &[f64], planes: usize, h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    blur_impl(x, planes, h, w, taps, false)
}

/// Adjoint of [`blur_forward`].
pub fn blur_adjoint(g: &[f64], planes: usize, h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    blur_impl(g, planes, h, w, taps, true)
}

fn blur_impl(x: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let zr = tap_normalizers(taps, h);
    let zc = tap_normalizers(taps, w);
    let mut out = vec![0.0; planes * h * w];
    par::for_each_chunk(&mut out, h * w, |p, dst| {
        let src = &x[p * h * w..(p + 1) * h * w];
        // along width
        let mut tmp = vec![0.0; h * w];
        for y in 0..h {
            for i in 0..w as isize {
                let mut acc = 0.0;
                for d in -r..=r {
                    let j = i + d;
                    if j < 0 || j >= w as isize {
                        continue;
                    }
                    let t = taps[(d + r) as usize];
                    acc += if adjoint {
                        t * src[y * w + j as usize] / zc[j as usize]
                    } else {
                        t * src[y * w + j as usize]
                    };
                }
                tmp[y * w + i as usize] = if adjoint { acc } else { acc / zc[i as usize] };
            }
        }
        // along height
        for i in 0..h as isize {
            for xcol in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let j = i + d;
                    if j < 0 || j >= h as isize {
                        continue;
                    }
                    let t = taps[(d + r) as usize];
                    acc += if adjoint {
                        t * tmp[j as usize * w + xcol] / zr[j as usize]
                    } else {
                        t * tmp[j as usize * w + xcol]
                    };
                }
                dst[i as usize * w + xcol] = if adjoint { acc } else { acc / zr[i as usize] };
            }
        }
    });
    out
}
