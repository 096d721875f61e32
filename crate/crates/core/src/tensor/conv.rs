//! im2col convolution kernels shared by dense and grouped convolution.
//!
//! A dense convolution is a grouped convolution with a single group that
//! gathers every input channel, so both paths run through the same code.

use crate::error::{Error, Result};

/// Static shape information for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [B, C, H, W], got {input_shape:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be at least 1".into()));
        }
        let (kh, kw) = kernel;
        let (h, w) = (input_shape[2], input_shape[3]);
        if kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit input {input_shape:?} with padding {padding}"),
            ));
        }
        Ok(ConvGeometry {
            batch: input_shape[0],
            in_channels: input_shape[1],
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.height * self.width
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }
}

/// Row-major `C = A·B + beta·C` where `A` is logically `m×k` and `B` is `k×n`.
/// `*_trans` means the buffer stores the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the m×k, k×n and m×n extents addressed by
    // these strides (checked above in debug builds, guaranteed by callers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Unfolds the gathered channels of one sample into `[|channels|·Kh·Kw, Ho·Wo]`.
pub(crate) fn im2col(sample: &[f64], g: &ConvGeometry, channels: &[usize], cols: &mut [f64]) {
    let plane = g.in_plane();
    let out_plane = g.out_plane();
    let mut row = 0;
    for &c in channels {
        let src = &sample[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_line = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the sample.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, channels: &[usize], sample: &mut [f64]) {
    let plane = g.in_plane();
    let out_plane = g.out_plane();
    let mut row = 0;
    for &c in channels {
        let dst = &mut sample[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * out_plane..(row + 1) * out_plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// One group of a grouped convolution: output filters `[F, |gather|, Kh, Kw]`.
pub(crate) struct GroupKernel<'a> {
    pub weight: &'a [f64],
    pub filters: usize,
    pub gather: &'a [usize],
}

/// Forward pass for all groups. Returns the output `[B, ΣF, Ho, Wo]` and the
/// per-group column buffers needed by the backward pass.
pub(crate) fn grouped_forward(
    input: &[f64],
    g: &ConvGeometry,
    groups: &[GroupKernel<'_>],
    bias: Option<&[f64]>,
    keep_cols: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let out_channels: usize = groups.iter().map(|k| k.filters).sum();
    let out_plane = g.out_plane();
    let in_sample = g.in_channels * g.in_plane();
    let mut out = vec![0.0; g.batch * out_channels * out_plane];
    let mut saved = Vec::with_capacity(groups.len());
    for (gi, kernel) in groups.iter().enumerate() {
        let offset: usize = groups[..gi].iter().map(|k| k.filters).sum();
        let rows = kernel.gather.len() * g.kernel_area();
        let per_sample = rows * out_plane;
        let mut cols = vec![0.0; if keep_cols { g.batch * per_sample } else { per_sample }];
        for b in 0..g.batch {
            let buf = if keep_cols {
                &mut cols[b * per_sample..(b + 1) * per_sample]
            } else {
                &mut cols[..]
            };
            im2col(&input[b * in_sample..(b + 1) * in_sample], g, kernel.gather, buf);
            let start = (b * out_channels + offset) * out_plane;
            let block = &mut out[start..start + kernel.filters * out_plane];
            if rows > 0 {
                gemm(kernel.filters, rows, out_plane, kernel.weight, false, buf, false, block, 0.0);
            }
        }
        saved.push(if keep_cols { cols } else { Vec::new() });
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.iter().enumerate() {
                let start = (b * out_channels + c) * out_plane;
                for v in &mut out[start..start + out_plane] {
                    *v += bv;
                }
            }
        }
    }
    (out, saved)
}

/// Weight gradient for one group, `[F, |gather|·Kh·Kw]`.
pub(crate) fn group_weight_grad(
    grad_out: &[f64],
    g: &ConvGeometry,
    out_channels: usize,
    offset: usize,
    filters: usize,
    rows: usize,
    cols: &[f64],
) -> Vec<f64> {
    let out_plane = g.out_plane();
    let per_sample = rows * out_plane;
    let mut dw = vec![0.0; filters * rows];
    if rows == 0 {
        return dw;
    }
    for b in 0..g.batch {
        let start = (b * out_channels + offset) * out_plane;
        let dout = &grad_out[start..start + filters * out_plane];
        let c = &cols[b * per_sample..(b + 1) * per_sample];
        gemm(filters, out_plane, rows, dout, false, c, true, &mut dw, 1.0);
    }
    dw
}

/// Accumulates the input gradient contributed by one group into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_input_grad_add(
    grad_out: &[f64],
    g: &ConvGeometry,
    out_channels: usize,
    offset: usize,
    kernel: &GroupKernel<'_>,
    dx: &mut [f64],
) {
    let out_plane = g.out_plane();
    let rows = kernel.gather.len() * g.kernel_area();
    if rows == 0 {
        return;
    }
    let in_sample = g.in_channels * g.in_plane();
    let mut dcols = vec![0.0; rows * out_plane];
    for b in 0..g.batch {
        let start = (b * out_channels + offset) * out_plane;
        let dout = &grad_out[start..start + kernel.filters * out_plane];
        gemm(rows, kernel.filters, out_plane, kernel.weight, true, dout, false, &mut dcols, 0.0);
        col2im_add(&dcols, g, kernel.gather, &mut dx[b * in_sample..(b + 1) * in_sample]);
    }
}
