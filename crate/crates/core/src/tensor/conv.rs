use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a convolution with respect to its input and filters.
#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub filters: Tensor,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &Tensor, filters: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, Self)> {
        let (n, c, h, w) = input.dims4()?;
        let (o, fc, kh, kw) = filters.dims4()?;
        if fc != c {
            return Err(Error::shape("conv2d", &[o, c, kh, kw], filters.shape()));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", &[n, c, kh, kw], input.shape()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok((
            n,
            o,
            Geometry {
                c,
                h,
                w,
                kh,
                kw,
                ho,
                wo,
                stride,
                pad,
            },
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one image (C×H×W) into a (C·kh·kw) × (Ho·Wo) matrix.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
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

    /// Folds a column matrix back onto an image, accumulating overlaps.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `C = alpha * op(A) * op(B) + beta * C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    // SAFETY: slice lengths are checked above and strides describe dense
    // row-major (or transposed row-major) matrices inside those slices.
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

/// 2-D cross-correlation of an NCHW input with OIHW filters, zero padding.
pub fn conv2d(input: &Tensor, filters: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (n, o, g) = Geometry::new(input, filters, stride, pad)?;
    let (patch, p) = (g.patch(), g.positions());
    let in_per = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; patch * p] };
    for s in 0..n {
        let img = &input.data()[s * in_per..(s + 1) * in_per];
        let b: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[s * o * p..(s + 1) * o * p];
        gemm(o, patch, p, filters.data(), false, b, false, dst, 0.0);
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] given the gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let (n, o, g) = Geometry::new(input, filters, stride, pad)?;
    let expected = [n, o, g.ho, g.wo];
    if grad_out.shape() != expected {
        return Err(Error::shape("conv2d_backward", &expected, grad_out.shape()));
    }
    let (patch, p) = (g.patch(), g.positions());
    let in_per = g.c * g.h * g.w;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_filters = Tensor::zeros(filters.shape());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; patch * p] };
    let mut d_cols = vec![0.0; patch * p];
    for s in 0..n {
        let img = &input.data()[s * in_per..(s + 1) * in_per];
        let gout = &grad_out.data()[s * o * p..(s + 1) * o * p];
        let b: &[f64] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        // dW (O × patch) += gout (O × P) · colsᵀ (P × patch)
        gemm(o, p, patch, gout, false, b, true, d_filters.data_mut(), 1.0);
        let d_img = &mut d_input.data_mut()[s * in_per..(s + 1) * in_per];
        if g.is_pointwise() {
            gemm(patch, o, p, filters.data(), true, gout, false, d_img, 0.0);
        } else {
            gemm(patch, o, p, filters.data(), true, gout, false, &mut d_cols, 0.0);
            g.col2im(&d_cols, d_img);
        }
    }
    Ok(Conv2dGrads {
        input: d_input,
        filters: d_filters,
    })
}
