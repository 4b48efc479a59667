//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! All buffers are row-major. Matrix products go through `matrixmultiply`,
//! which accepts arbitrary row/column strides, so transposed operands are
//! expressed through strides rather than copies.

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a sliding window, `None` when the window does not fit.
/// Positions that would overhang the padded input are dropped (floor).
pub(crate) fn window_out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    let span = padded - kernel;
    Some(span / stride + 1)
}

/// Range of output positions `o` whose input index `o*stride + tap - pad`
/// falls inside `0..size`.
fn valid_range(tap: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if size + pad > tap {
        ((size + pad - tap - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `[C, H, W]` image into the columns of a `[C*k*k, ld]`
/// matrix; row `r` of the image's block is `cols[r*ld..r*ld + H'*W']`.
pub(crate) fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize) {
    let area = g.out_area();
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (y0, y1) = valid_range(ki, g.pad, s, g.height, g.out_h);
            for kj in 0..k {
                let (x0, x1) = valid_range(kj, g.pad, s, g.width, g.out_w);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + area];
                dst[..y0 * g.out_w].fill(0.0);
                dst[y1 * g.out_w..].fill(0.0);
                for oy in y0..y1 {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    line[..x0].fill(0.0);
                    line[x1..].fill(0.0);
                    if x0 == x1 {
                        continue;
                    }
                    let iy = oy * s + ki - g.pad;
                    let start = iy * g.width + x0 * s + kj - g.pad;
                    let src = &plane[start..];
                    if s == 1 {
                        line[x0..x1].copy_from_slice(&src[..x1 - x0]);
                    } else {
                        for (v, &x) in line[x0..x1].iter_mut().zip(src.iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column block back into an image,
/// accumulating overlapping contributions.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, img: &mut [f32], ld: usize) {
    let area = g.out_area();
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (y0, y1) = valid_range(ki, g.pad, s, g.height, g.out_h);
            for kj in 0..k {
                let (x0, x1) = valid_range(kj, g.pad, s, g.width, g.out_w);
                if x0 == x1 {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + area];
                for oy in y0..y1 {
                    let line = &src[oy * g.out_w + x0..oy * g.out_w + x1];
                    let iy = oy * s + ki - g.pad;
                    let start = iy * g.width + x0 * s + kj - g.pad;
                    let dst = &mut plane[start..];
                    if s == 1 {
                        for (d, v) in dst.iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst.iter_mut().step_by(s).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit strides. `a` is `m x k`,
/// `b` is `k x n`, `c` is `m x n` (row-major, contiguous).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    // SAFETY: the asserted extents bound every index the kernel touches and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Upper bound on the floats held by one unfolded chunk of the batch.
const COLS_BUDGET: usize = 1 << 17;

/// Number of images unfolded together so that one chunk stays within
/// [`COLS_BUDGET`].
fn chunk_images(g: &ConvGeom, batch: usize) -> usize {
    (COLS_BUDGET / (g.patch_len() * g.out_area()).max(1)).clamp(1, batch.max(1))
}

/// Forward convolution of a batch; `out` must be `[N, F, H', W']`.
///
/// Several images are unfolded side by side so one matrix product covers
/// the whole chunk, which keeps the products large in the deep, spatially
/// small layers.
pub(crate) fn conv2d_forward(
    input: &[f32],
    batch: usize,
    weight: &[f32],
    filters: usize,
    g: &ConvGeom,
    out: &mut [f32],
) {
    let in_len = g.channels * g.height * g.width;
    let area = g.out_area();
    let patch = g.patch_len();
    let chunk = chunk_images(g, batch);
    let mut cols = vec![0.0; patch * chunk * area];
    let mut prod = vec![0.0; filters * chunk * area];
    for n0 in (0..batch).step_by(chunk) {
        let b = chunk.min(batch - n0);
        let ld = b * area;
        for i in 0..b {
            let img = &input[(n0 + i) * in_len..(n0 + i + 1) * in_len];
            im2col(img, g, &mut cols[i * area..], ld);
        }
        gemm(filters, patch, ld, 1.0, weight, (patch, 1), &cols, (ld, 1), 0.0, &mut prod);
        for i in 0..b {
            let dst = &mut out[(n0 + i) * filters * area..(n0 + i + 1) * filters * area];
            for f in 0..filters {
                dst[f * area..(f + 1) * area].copy_from_slice(&prod[f * ld + i * area..f * ld + (i + 1) * area]);
            }
        }
    }
}

/// Backward convolution. Accumulates into `grad_weight` and, when given,
/// into `grad_input`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f32],
    batch: usize,
    weight: &[f32],
    filters: usize,
    g: &ConvGeom,
    grad_out: &[f32],
    mut grad_weight: Option<&mut [f32]>,
    mut grad_input: Option<&mut [f32]>,
) {
    let in_len = g.channels * g.height * g.width;
    let area = g.out_area();
    let patch = g.patch_len();
    let chunk = chunk_images(g, batch);
    let mut cols = if grad_weight.is_some() {
        vec![0.0; patch * chunk * area]
    } else {
        Vec::new()
    };
    let mut dcols = if grad_input.is_some() {
        vec![0.0; patch * chunk * area]
    } else {
        Vec::new()
    };
    let mut dy = vec![0.0; filters * chunk * area];
    for n0 in (0..batch).step_by(chunk) {
        let b = chunk.min(batch - n0);
        let ld = b * area;
        for i in 0..b {
            let src = &grad_out[(n0 + i) * filters * area..(n0 + i + 1) * filters * area];
            for f in 0..filters {
                dy[f * ld + i * area..f * ld + (i + 1) * area].copy_from_slice(&src[f * area..(f + 1) * area]);
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            for i in 0..b {
                let img = &input[(n0 + i) * in_len..(n0 + i + 1) * in_len];
                im2col(img, g, &mut cols[i * area..], ld);
            }
            // dW[F, patch] += dY[F, ld] * cols^T[ld, patch]
            gemm(filters, ld, patch, 1.0, &dy, (ld, 1), &cols, (1, ld), 1.0, gw);
        }
        if let Some(gx) = grad_input.as_deref_mut() {
            // dcols[patch, ld] = W^T[patch, F] * dY[F, ld]
            gemm(patch, filters, ld, 1.0, weight, (1, patch), &dy, (ld, 1), 0.0, &mut dcols);
            for i in 0..b {
                let dx = &mut gx[(n0 + i) * in_len..(n0 + i + 1) * in_len];
                col2im_add(&dcols[i * area..], g, dx, ld);
            }
        }
    }
}
