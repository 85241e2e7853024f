//! im2col/col2im lowering for strided 2-D convolutions.

use super::Real;
use crate::error::{Error, Result};

/// Output extent of a strided convolution, floor semantics.
pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(Error::invalid_shape(
            "conv2d",
            format!("kernel {kernel} does not fit padded extent {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `(padding, output_padding)` for a transposed convolution that multiplies
/// the spatial extent by exactly `stride`.
pub fn conv_transpose2d_geometry(kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if stride != 2 {
        return Err(Error::InvalidArgument(format!(
            "conv_transpose2d supports stride 2 only, got {stride}"
        )));
    }
    if kernel == 0 {
        return Err(Error::InvalidArgument(
            "conv_transpose2d kernel must be positive".into(),
        ));
    }
    let pad = (kernel - 1) / 2;
    // out = (h-1)*s - 2p + k + op must equal s*h
    let out_pad = (stride + 2 * pad)
        .checked_sub(kernel)
        .filter(|&op| op < stride)
        .ok_or_else(|| Error::InvalidArgument(format!("kernel {kernel} cannot double spatial extent")))?;
    Ok((pad, out_pad))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Range of output positions whose input tap `o*stride + k - pad` lands
/// inside `[0, extent)`.
fn valid_range(extent: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if extent + pad > k {
        ((extent - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lowers one `[c, h, w]` image into a `[c*kh*kw, oh*ow]` patch matrix.
pub(crate) fn im2col<T: Real>(img: &[T], g: &Geometry, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst[..ylo * g.ow].fill(T::zero());
                dst[yhi * g.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    out[..xlo].fill(T::zero());
                    out[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let x0 = xlo * g.stride + kx - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        out[xlo..xhi].copy_from_slice(&src[x0..x0 + xhi - xlo]);
                    } else {
                        for (o, &v) in out[xlo..xhi].iter_mut().zip(src[x0..].iter().step_by(g.stride)) {
                            *o = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back into an image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, img: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                if xlo == xhi {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let x0 = xlo * g.stride + kx - g.pad;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                    if g.stride == 1 {
                        for (d, &v) in dst[x0..x0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[x0..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}
