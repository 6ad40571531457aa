//! Strided convolution and transposed convolution via im2col/col2im.
//!
//! Both ops relate a "large" grid to a "small" grid through
//! `large = small * stride - pad + kernel_offset`. A convolution gathers from
//! the large input into the small output; a transposed convolution scatters
//! from the small input into the large output. Each one's data gradient is
//! the other's forward pass.

use super::{matmul, MatRef, Real};

/// `floor((size + 2 pad - k) / stride) + 1`, or `None` if the kernel does not fit.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

/// `(size - 1) stride - 2 pad + k`, or `None` if that is not positive.
pub fn deconv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = size.checked_sub(1)? * stride + k;
    full.checked_sub(2 * pad).filter(|&s| s > 0)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    /// Channels of the large grid.
    pub channels: usize,
    pub large_h: usize,
    pub large_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.small_h * self.small_w
    }

    /// Calls `f(col_index, large_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.col_cols();
        for c in 0..self.channels {
            let plane = c * self.large_h * self.large_w;
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oi in 0..self.small_h {
                        let li = (oi * self.stride + ki) as isize - self.pad as isize;
                        if li < 0 || li >= self.large_h as isize {
                            continue;
                        }
                        let lrow = plane + li as usize * self.large_w;
                        for oj in 0..self.small_w {
                            let lj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if lj < 0 || lj >= self.large_w as isize {
                                continue;
                            }
                            f(row * cols + oi * self.small_w + oj, lrow + lj as usize);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Real>(&self, large: &[T], cols: &mut Vec<T>) {
        cols.clear();
        cols.resize(self.col_rows() * self.col_cols(), T::zero());
        self.for_each_tap(|ci, li| cols[ci] = large[li]);
    }

    /// Scatter-adds `cols` into `large`.
    pub fn col2im<T: Real>(&self, cols: &[T], large: &mut [T]) {
        self.for_each_tap(|ci, li| large[li] += cols[ci]);
    }
}

/// Per-sample kernels. `kernel` is `[c_out, c_in, k, k]` for convolution and
/// `[c_in, c_out, k, k]` for the transposed form.
pub(crate) struct ConvKernels<'a, T> {
    pub kernel: &'a [T],
    pub c_in: usize,
    pub c_out: usize,
}

impl<T: Real> ConvKernels<'_, T> {
    /// Convolution: `x` is the large grid (`c_in` channels), `y` the small one.
    pub fn conv_forward(&self, geo: &Geometry, x: &[T], y: &mut [T], scratch: &mut Vec<T>) {
        geo.im2col(x, scratch);
        let kk = self.c_in * geo.k * geo.k;
        matmul(MatRef::new(self.kernel, self.c_out, kk), MatRef::new(scratch, kk, geo.col_cols()), y, false);
    }

    pub fn conv_backward(
        &self,
        geo: &Geometry,
        x: &[T],
        dy: &[T],
        dx: Option<&mut [T]>,
        dk: Option<&mut [T]>,
        scratch: &mut Vec<T>,
    ) {
        let kk = self.c_in * geo.k * geo.k;
        let hw = geo.col_cols();
        if let Some(dk) = dk {
            geo.im2col(x, scratch);
            matmul(MatRef::new(dy, self.c_out, hw), MatRef::new(scratch, kk, hw).t(), dk, true);
        }
        if let Some(dx) = dx {
            scratch.clear();
            scratch.resize(kk * hw, T::zero());
            matmul(MatRef::new(self.kernel, self.c_out, kk).t(), MatRef::new(dy, self.c_out, hw), scratch, false);
            geo.col2im(scratch, dx);
        }
    }

    /// Transposed convolution: `x` is the small grid (`c_in` channels), `y`
    /// the large one (`c_out` channels, must be zeroed by the caller).
    pub fn deconv_forward(&self, geo: &Geometry, x: &[T], y: &mut [T], scratch: &mut Vec<T>) {
        let kk = self.c_out * geo.k * geo.k;
        let hw = geo.col_cols();
        scratch.clear();
        scratch.resize(kk * hw, T::zero());
        matmul(MatRef::new(self.kernel, self.c_in, kk).t(), MatRef::new(x, self.c_in, hw), scratch, false);
        geo.col2im(scratch, y);
    }

    pub fn deconv_backward(
        &self,
        geo: &Geometry,
        x: &[T],
        dy: &[T],
        dx: Option<&mut [T]>,
        dk: Option<&mut [T]>,
        scratch: &mut Vec<T>,
    ) {
        let kk = self.c_out * geo.k * geo.k;
        let hw = geo.col_cols();
        geo.im2col(dy, scratch);
        if let Some(dx) = dx {
            matmul(MatRef::new(self.kernel, self.c_in, kk), MatRef::new(scratch, kk, hw), dx, false);
        }
        if let Some(dk) = dk {
            matmul(MatRef::new(x, self.c_in, hw), MatRef::new(scratch, kk, hw).t(), dk, true);
        }
    }
}
