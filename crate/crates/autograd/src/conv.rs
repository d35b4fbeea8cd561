//! Convolution kernels built on im2col + GEMM.

use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution over one NCHW sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
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

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let npix = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back onto the input plane layout.
pub fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let npix = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * npix..(row + 1) * npix];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass over a batch. `x` is `[n, C, H, W]`, `w` is `[O, C, k, k]`.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_len = g.in_channels * g.height * g.width;
    let npix = g.out_pixels();
    let out_len = g.out_channels * npix;
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * npix] };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let on = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(bias) = b {
            for (o, &bv) in bias.iter().enumerate() {
                on[o * npix..(o + 1) * npix].fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        T::gemm(g.out_channels, g.col_rows(), npix, T::one(), w, false, cols, false, beta, on);
    }
    out
}

/// Accumulates parameter and (optionally) input gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let in_len = g.in_channels * g.height * g.width;
    let npix = g.out_pixels();
    let out_len = g.out_channels * npix;
    let rows = g.col_rows();
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * npix] };
    let mut dcol = vec![T::zero(); rows * npix];
    let mut dx = dx;
    let mut dw = dw;
    if let Some(db) = db {
        for n in 0..batch {
            let dn = &dout[n * out_len..(n + 1) * out_len];
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dn[o * npix..(o + 1) * npix].iter().copied().sum::<T>();
            }
        }
    }
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dn = &dout[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            // dW[O, rows] += dout[O, P] * cols[rows, P]^T
            T::gemm(g.out_channels, npix, rows, T::one(), dn, false, cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                T::gemm(rows, g.out_channels, npix, T::one(), w, true, dn, false, T::one(), dxn);
            } else {
                T::gemm(rows, g.out_channels, npix, T::one(), w, true, dn, false, T::zero(), &mut dcol);
                col2im_add(g, &dcol, dxn);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let k = g.kernel;
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                s += w[((o * g.in_channels + c) * k + ki) * k + kj]
                                    * x[(c * g.height + iy as usize) * g.width + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_sum() {
        for (stride, pad, kernel) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3)] {
            let g = ConvGeom { in_channels: 2, out_channels: 3, height: 6, width: 5, kernel, stride, pad };
            let x: Vec<f64> = (0..2 * 30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * kernel * kernel).map(|i| ((i * 5) % 7) as f64 * 0.1).collect();
            let got = conv2d_forward(&g, 1, &x, &w, None);
            let want = direct(&g, &x, &w);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }
}
