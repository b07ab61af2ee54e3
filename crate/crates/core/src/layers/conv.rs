//! Strided 2-D convolution and its transpose, via im2col + gemm.
//!
//! Both operators share one [`Geometry`]: the "big" side is the convolution
//! input (and the transposed convolution output), the "small" side is the
//! convolution output. Big index `i = o * stride + k - pad`; taps falling
//! outside the big plane read zero (convolution) or are dropped
//! (transposed convolution), which also implements output cropping.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Batch;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Stride-2 downsampling with ceil-halving of odd sizes.
    pub fn halving(h: usize, w: usize, kernel: usize) -> Self {
        Geometry {
            big_h: h,
            big_w: w,
            small_h: h.div_ceil(2),
            small_w: w.div_ceil(2),
            kernel,
            stride: 2,
            pad: (kernel - 1) / 2,
        }
    }

    /// Stride-1, size-preserving ("same") geometry for odd kernels.
    pub fn same(h: usize, w: usize, kernel: usize) -> Self {
        Geometry {
            big_h: h,
            big_w: w,
            small_h: h,
            small_w: w,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    /// ×2 upsampling of `(h, w)` cropped to `(target_h, target_w)`.
    pub fn doubling(h: usize, w: usize, target_h: usize, target_w: usize, kernel: usize) -> Self {
        debug_assert!(target_h <= 2 * h && target_w <= 2 * w);
        Geometry {
            big_h: target_h,
            big_w: target_w,
            small_h: h,
            small_w: w,
            kernel,
            stride: 2,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn small_plane(&self) -> usize {
        self.small_h * self.small_w
    }

    pub fn big_plane(&self) -> usize {
        self.big_h * self.big_w
    }

    #[inline]
    fn big_index(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// Unfolds `channels` big planes into a `(channels·k·k) × small_plane` matrix.
pub fn im2col<T: Scalar>(big: &[T], channels: usize, g: &Geometry, cols: &mut [T]) {
    let k = g.kernel;
    let sp = g.small_plane();
    for c in 0..channels {
        let src = &big[c * g.big_plane()..(c + 1) * g.big_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * sp..][..sp];
                for oy in 0..g.small_h {
                    let dst = &mut row[oy * g.small_w..(oy + 1) * g.small_w];
                    match g.big_index(oy, ky, g.big_h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let line = &src[iy * g.big_w..(iy + 1) * g.big_w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.big_index(ox, kx, g.big_w) {
                                    Some(ix) => line[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into big planes.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &Geometry, big: &mut [T]) {
    let k = g.kernel;
    let sp = g.small_plane();
    let bp = g.big_plane();
    for c in 0..channels {
        let dst = &mut big[c * bp..(c + 1) * bp];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * sp..][..sp];
                for oy in 0..g.small_h {
                    let Some(iy) = g.big_index(oy, ky, g.big_h) else {
                        continue;
                    };
                    let line = &mut dst[iy * g.big_w..(iy + 1) * g.big_w];
                    let src = &row[oy * g.small_w..(oy + 1) * g.small_w];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(ix) = g.big_index(ox, kx, g.big_w) {
                            line[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution weights `[out, in·k·k]` with per-output bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }
}

/// Cached unfolded input of a forward convolution (one matrix per sample).
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub cols: Vec<T>,
    pub geometry: Geometry,
    pub in_channels: usize,
}

pub fn conv2d_forward<T: Scalar>(
    x: &Batch<T>,
    shape: ConvShape,
    weight: &[T],
    bias: &[T],
    g: Geometry,
) -> (Batch<T>, ConvCache<T>) {
    debug_assert_eq!(x.channels, shape.in_channels);
    debug_assert_eq!((x.height, x.width), (g.big_h, g.big_w));
    let rows = shape.in_channels * g.taps();
    let sp = g.small_plane();
    let mut cols = vec![T::zero(); x.batch * rows * sp];
    let mut y = Batch::zeros(x.batch, shape.out_channels, g.small_h, g.small_w);
    for s in 0..x.batch {
        let c = &mut cols[s * rows * sp..(s + 1) * rows * sp];
        im2col(x.sample(s), shape.in_channels, &g, c);
        let out = y.sample_mut(s);
        for (o, plane) in out.chunks_mut(sp).enumerate() {
            plane.fill(bias[o]);
        }
        gemm(
            MatRef::new(weight, shape.out_channels, rows),
            MatRef::new(c, rows, sp),
            T::one(),
            out,
        );
    }
    (
        y,
        ConvCache {
            cols,
            geometry: g,
            in_channels: shape.in_channels,
        },
    )
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    dy: &Batch<T>,
    shape: ConvShape,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Batch<T>> {
    let g = cache.geometry;
    let rows = shape.in_channels * g.taps();
    let sp = g.small_plane();
    let mut dx = need_input_grad.then(|| Batch::zeros(dy.batch, shape.in_channels, g.big_h, g.big_w));
    let mut dcols = vec![T::zero(); rows * sp];
    for s in 0..dy.batch {
        let d = dy.sample(s);
        for (o, plane) in d.chunks(sp).enumerate() {
            dbias[o] += plane.iter().copied().sum();
        }
        let c = &cache.cols[s * rows * sp..(s + 1) * rows * sp];
        gemm(
            MatRef::new(d, shape.out_channels, sp),
            MatRef::new(c, rows, sp).t(),
            T::one(),
            dweight,
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::new(weight, shape.out_channels, rows).t(),
                MatRef::new(d, shape.out_channels, sp),
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, shape.in_channels, &g, dx.sample_mut(s));
        }
    }
    dx
}

/// Transposed convolution; weights are laid out `[in, out·k·k]`.
pub fn deconv2d_forward<T: Scalar>(
    x: &Batch<T>,
    shape: ConvShape,
    weight: &[T],
    bias: Option<&[T]>,
    g: Geometry,
) -> Batch<T> {
    debug_assert_eq!(x.channels, shape.in_channels);
    debug_assert_eq!((x.height, x.width), (g.small_h, g.small_w));
    let rows = shape.out_channels * g.taps();
    let sp = g.small_plane();
    let mut cols = vec![T::zero(); rows * sp];
    let mut y = Batch::zeros(x.batch, shape.out_channels, g.big_h, g.big_w);
    for s in 0..x.batch {
        gemm(
            MatRef::new(weight, shape.in_channels, rows).t(),
            MatRef::new(x.sample(s), shape.in_channels, sp),
            T::zero(),
            &mut cols,
        );
        let out = y.sample_mut(s);
        if let Some(bias) = bias {
            for (o, plane) in out.chunks_mut(g.big_plane()).enumerate() {
                plane.fill(bias[o]);
            }
        }
        col2im(&cols, shape.out_channels, &g, out);
    }
    y
}

/// Backward of [`deconv2d_forward`]; `x` is the forward input.
#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward<T: Scalar>(
    x: &Batch<T>,
    dy: &Batch<T>,
    shape: ConvShape,
    g: Geometry,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Batch<T> {
    let rows = shape.out_channels * g.taps();
    let sp = g.small_plane();
    let mut dcols = vec![T::zero(); rows * sp];
    let mut dx = Batch::zeros(x.batch, shape.in_channels, g.small_h, g.small_w);
    for s in 0..x.batch {
        let d = dy.sample(s);
        for (o, plane) in d.chunks(g.big_plane()).enumerate() {
            dbias[o] += plane.iter().copied().sum();
        }
        im2col(d, shape.out_channels, &g, &mut dcols);
        gemm(
            MatRef::new(x.sample(s), shape.in_channels, sp),
            MatRef::new(&dcols, rows, sp).t(),
            T::one(),
            dweight,
        );
        gemm(
            MatRef::new(weight, shape.in_channels, rows),
            MatRef::new(&dcols, rows, sp),
            T::zero(),
            dx.sample_mut(s),
        );
    }
    dx
}
