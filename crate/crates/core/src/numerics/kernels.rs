//! Dense forward kernels shared by the tape and by callers that only need values.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
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
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the buffers have exactly the extents described by the strides above.
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

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::dim("transpose", format!("expected matrix, got {:?}", a.shape())));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim("softmax_rows", format!("expected matrix, got {:?}", x.shape())));
    }
    let n = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Geometry of a 3-D cross-correlation; 2-D convolutions use a unit depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        cin: usize,
        input: [usize; 3],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let (cout, wcin, kernel) = match *w_shape {
            [co, ci, kh, kw] => (co, ci, [1, kh, kw]),
            [co, ci, kt, kh, kw] => (co, ci, [kt, kh, kw]),
            _ => return Err(Error::dim(op, format!("bad kernel shape {w_shape:?}"))),
        };
        if wcin != cin {
            return Err(Error::dim(
                op,
                format!("input has {cin} channels but kernel {w_shape:?} expects {wcin}"),
            ));
        }
        if stride.contains(&0) {
            return Err(Error::dim(op, "stride must be positive"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if kernel[a] > padded {
                return Err(Error::dim(
                    op,
                    format!(
                        "kernel {w_shape:?} larger than padded input {input:?} (pad {pad:?})"
                    ),
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    /// Unfold one input item into a `patch_len x out_len` column matrix.
    pub(crate) fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let s = self.out_len();
        let mut row = 0;
        for c in 0..self.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let dst = &mut cols[row * s..(row + 1) * s];
                        let mut col = 0;
                        for z in 0..od {
                            let iz = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                                for xx in 0..ow {
                                    let ix =
                                        (xx * self.stride[2] + e) as isize - self.pad[2] as isize;
                                    dst[col] = if iz < 0
                                        || iy < 0
                                        || ix < 0
                                        || iz >= d as isize
                                        || iy >= h as isize
                                        || ix >= w as isize
                                    {
                                        0.0
                                    } else {
                                        x[((c * d + iz as usize) * h + iy as usize) * w
                                            + ix as usize]
                                    };
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatter-add columns back onto an input item.
    pub(crate) fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let s = self.out_len();
        let mut row = 0;
        for c in 0..self.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let src = &cols[row * s..(row + 1) * s];
                        let mut col = 0;
                        for z in 0..od {
                            let iz = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                                for xx in 0..ow {
                                    let ix =
                                        (xx * self.stride[2] + e) as isize - self.pad[2] as isize;
                                    if iz >= 0
                                        && iy >= 0
                                        && ix >= 0
                                        && iz < d as isize
                                        && iy < h as isize
                                        && ix < w as isize
                                    {
                                        dx[((c * d + iz as usize) * h + iy as usize) * w
                                            + ix as usize] += src[col];
                                    }
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Forward pass for `batch` items laid out contiguously.
    pub(crate) fn forward(&self, x: &[f64], w: &[f64], batch: usize) -> Vec<f64> {
        let (p, s) = (self.patch_len(), self.out_len());
        let in_len = self.in_len();
        let mut out = vec![0.0; batch * self.cout * s];
        let mut cols = vec![0.0; p * s];
        for n in 0..batch {
            self.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
            let dst = &mut out[n * self.cout * s..(n + 1) * self.cout * s];
            gemm(self.cout, p, s, 1.0, w, false, &cols, false, 0.0, dst);
        }
        out
    }

    /// Gradients with respect to input and kernel given the output gradient.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        dout: &[f64],
        batch: usize,
        need_dx: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>) {
        let (p, s) = (self.patch_len(), self.out_len());
        let in_len = self.in_len();
        let mut dw = vec![0.0; self.cout * p];
        let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
        let mut cols = vec![0.0; p * s];
        let mut dcols = vec![0.0; p * s];
        for n in 0..batch {
            let g = &dout[n * self.cout * s..(n + 1) * self.cout * s];
            self.im2col(&x[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(self.cout, s, p, 1.0, g, false, &cols, true, 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                gemm(p, self.cout, s, 1.0, w, true, g, false, 0.0, &mut dcols);
                self.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
        (dx, dw)
    }
}

/// Split a 2-D conv input into (batch, channels, height, width).
pub(crate) fn conv2d_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(usize, ConvGeom)> {
    let (batch, c, h, w) = match *x_shape {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::dim("conv2d", format!("bad input shape {x_shape:?}"))),
    };
    if w_shape.len() != 4 {
        return Err(Error::dim("conv2d", format!("bad kernel shape {w_shape:?}")));
    }
    let g = ConvGeom::new("conv2d", c, [1, h, w], w_shape, [1, stride, stride], [0, pad, pad])?;
    Ok((batch, g))
}

pub(crate) fn conv2d_out_shape(x_shape: &[usize], g: &ConvGeom) -> Vec<usize> {
    let mut shape = Vec::with_capacity(4);
    if x_shape.len() == 4 {
        shape.push(x_shape[0]);
    }
    shape.extend_from_slice(&[g.cout, g.output[1], g.output[2]]);
    shape
}

pub(crate) fn conv3d_geom(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<ConvGeom> {
    let [c, t, h, w] = *x_shape else {
        return Err(Error::dim("conv3d", format!("bad input shape {x_shape:?}")));
    };
    if w_shape.len() != 5 {
        return Err(Error::dim("conv3d", format!("bad kernel shape {w_shape:?}")));
    }
    ConvGeom::new("conv3d", c, [t, h, w], w_shape, stride, pad)
}

/// 2-D cross-correlation of `x` (`C×H×W` or `N×C×H×W`) with `w` (`Cout×C×kh×kw`).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (batch, g) = conv2d_geom(x.shape(), w.shape(), stride, pad)?;
    let out = g.forward(x.data(), w.data(), batch);
    Tensor::new(&conv2d_out_shape(x.shape(), &g), out)
}

/// 3-D cross-correlation of `x` (`C×T×H×W`) with `w` (`Cout×C×kt×kh×kw`).
pub fn conv3d(x: &Tensor, w: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Result<Tensor> {
    let g = conv3d_geom(x.shape(), w.shape(), stride, pad)?;
    let out = g.forward(x.data(), w.data(), 1);
    Tensor::new(&[g.cout, g.output[0], g.output[1], g.output[2]], out)
}

/// Binary mask of pixels that are `>=` every value in their edge-clamped 3×3
/// neighbourhood, channel by channel. Plateaus keep every tied pixel.
pub fn local_maxima(h: &Tensor) -> Result<Tensor> {
    let [k, rows, cols] = *h.shape() else {
        return Err(Error::dim("local_maxima", format!("expected K×H×W, got {:?}", h.shape())));
    };
    let src = h.data();
    let mut mask = vec![0.0; src.len()];
    for c in 0..k {
        let plane = &src[c * rows * cols..(c + 1) * rows * cols];
        for y in 0..rows {
            for x in 0..cols {
                let v = plane[y * cols + x];
                let mut peak = true;
                'scan: for ny in y.saturating_sub(1)..=(y + 1).min(rows - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(cols - 1) {
                        if plane[ny * cols + nx] > v {
                            peak = false;
                            break 'scan;
                        }
                    }
                }
                if peak {
                    mask[c * rows * cols + y * cols + x] = 1.0;
                }
            }
        }
    }
    Tensor::new(h.shape(), mask)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
