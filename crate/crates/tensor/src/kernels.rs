//! Raw numeric kernels shared by the forward and backward passes.

use crate::scalar::{gemm, Scalar};

/// Geometry of a 2-D sliding window over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl Window {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if kernel == 0 || stride == 0 || padded_h < kernel || padded_w < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (padded_h - kernel) / stride + 1,
            out_width: (padded_w - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds one `[C,H,W]` image into `[C*k*k, Ho*Wo]` patch columns.
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &Window, cols: &mut [T]) {
    let k = g.kernel;
    let plane = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_line = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
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

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, img: &mut [T]) {
    let k = g.kernel;
    let plane = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_line = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_line[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation. `x: [B,Cin,H,W]`, `w: [Cout,Cin,k,k]`, output `[B,Cout,Ho,Wo]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Window,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_size = g.channels * g.height * g.width;
    let out_plane = g.col_cols();
    let mut out = vec![T::zero(); batch * cout * out_plane];
    let mut cols = vec![T::zero(); g.col_rows() * out_plane];
    for b in 0..batch {
        im2col(&x[b * in_size..(b + 1) * in_size], g, &mut cols);
        let y = &mut out[b * cout * out_plane..(b + 1) * cout * out_plane];
        gemm(false, false, cout, out_plane, g.col_rows(), w, &cols, T::zero(), y);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                y[co * out_plane..(co + 1) * out_plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Only the requested gradients are computed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &Window,
    w: &[T],
    cout: usize,
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    let in_size = g.channels * g.height * g.width;
    let out_plane = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * out_plane];
    for b in 0..batch {
        let gy = &grad_out[b * cout * out_plane..(b + 1) * cout * out_plane];
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(&x[b * in_size..(b + 1) * in_size], g, &mut cols);
            // gw[Cout, rows] += gy[Cout, P] * cols[rows, P]^T
            gemm(false, true, cout, rows, out_plane, gy, &cols, T::one(), gw);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            // dcols[rows, P] = w[Cout, rows]^T * gy[Cout, P]
            gemm(true, false, rows, out_plane, cout, w, gy, T::zero(), &mut cols);
            col2im(&cols, g, &mut gx[b * in_size..(b + 1) * in_size]);
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gy[co * out_plane..(co + 1) * out_plane].iter().copied().sum::<T>();
            }
        }
    }
}

/// Transposed convolution. `x: [B,Cin,Hin,Win]`, `w: [Cin,Cout,k,k]`.
/// `g` describes the adjoint convolution from the output `[Cout,Ho,Wo]` back to
/// the input grid, so `g.out_height == Hin`.
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &Window,
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_plane = g.col_cols();
    let out_size = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); batch * out_size];
    let mut cols = vec![T::zero(); g.col_rows() * in_plane];
    for b in 0..batch {
        let xb = &x[b * cin * in_plane..(b + 1) * cin * in_plane];
        gemm(true, false, g.col_rows(), in_plane, cin, w, xb, T::zero(), &mut cols);
        let y = &mut out[b * out_size..(b + 1) * out_size];
        col2im(&cols, g, y);
        if let Some(bias) = bias {
            let plane = g.height * g.width;
            for (co, &bv) in bias.iter().enumerate() {
                y[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    cin: usize,
    g: &Window,
    w: &[T],
    grad_out: &[T],
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    mut grad_b: Option<&mut [T]>,
) {
    let in_plane = g.col_cols();
    let out_size = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * in_plane];
    for b in 0..batch {
        let gy = &grad_out[b * out_size..(b + 1) * out_size];
        im2col(gy, g, &mut cols);
        if let Some(gx) = grad_x.as_deref_mut() {
            // gx[Cin, P] = w[Cin, rows] * cols[rows, P]
            gemm(
                false,
                false,
                cin,
                in_plane,
                rows,
                w,
                &cols,
                T::one(),
                &mut gx[b * cin * in_plane..(b + 1) * cin * in_plane],
            );
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            let xb = &x[b * cin * in_plane..(b + 1) * cin * in_plane];
            gemm(false, true, cin, rows, in_plane, xb, &cols, T::one(), gw);
        }
        if let Some(gb) = grad_b.as_deref_mut() {
            let plane = g.height * g.width;
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += gy[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }
}

/// Zero-padded 1-D convolution along the channel axis of `[B,C]`.
pub(crate) fn conv1d_channel_forward<T: Scalar>(x: &[T], batch: usize, channels: usize, w: &[T]) -> Vec<T> {
    let k = w.len();
    let pad = (k - 1) / 2;
    let mut out = vec![T::zero(); batch * channels];
    for b in 0..batch {
        let xb = &x[b * channels..(b + 1) * channels];
        for c in 0..channels {
            let mut acc = T::zero();
            for (j, &wj) in w.iter().enumerate() {
                let src = c as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < channels {
                    acc += wj * xb[src as usize];
                }
            }
            out[b * channels + c] = acc;
        }
    }
    out
}

/// Per-position channel statistics for 2-D layer normalisation.
pub(crate) struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); batch * plane];
    let inv_c = T::one() / T::lift(channels as f64);
    for b in 0..batch {
        let base = b * channels * plane;
        for p in 0..plane {
            let mut mean = T::zero();
            for c in 0..channels {
                mean += x[base + c * plane + p];
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for c in 0..channels {
                let d = x[base + c * plane + p] - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std[b * plane + p] = rstd;
            for c in 0..channels {
                let i = base + c * plane + p;
                let xh = (x[i] - mean) * rstd;
                normalized[i] = xh;
                out[i] = gain[c] * xh + bias[c];
            }
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_output_size() {
        let g = Window::new(3, 64, 64, 3, 2, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (32, 32));
        let g = Window::new(3, 16, 16, 3, 1, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (16, 16));
        assert!(Window::new(1, 2, 2, 5, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = Window::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
