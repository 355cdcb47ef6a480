//! Numeric kernels shared by forward evaluation and first-order backward.

/// `C = A·B` (or `C += A·B` when `accumulate`), with `A` logically `[m×k]`
/// and `B` logically `[k×n]`, each optionally stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index touched by the strided
    // views stays inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a stride-`s`, unpadded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch()
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.positions()
    }
}

fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (ho, wo, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let p = ho * wo;
    let mut cols = vec![0.0; g.patch() * p];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let src = &plane[(oh * s + ki) * g.width..];
                    let out = &mut dst[oh * wo..(oh + 1) * wo];
                    for (ow, o) in out.iter_mut().enumerate() {
                        *o = src[ow * s + kj];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let (ho, wo, k, s) = (g.out_height(), g.out_width(), g.kernel, g.stride);
    let p = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..ho {
                    let base = (oh * s + ki) * g.width + kj;
                    for ow in 0..wo {
                        plane[base + ow * s] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
}

/// `y[o, i, j] = Σ_{c,ki,kj} w[o, c, ki, kj] · x[c, i·s + ki, j·s + kj]`.
pub fn conv2d(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let cols = im2col(g, x);
    let mut out = vec![0.0; g.output_len()];
    gemm(
        g.out_channels,
        g.patch(),
        g.positions(),
        w,
        false,
        &cols,
        false,
        &mut out,
        false,
    );
    out
}

/// Adjoint of [`conv2d`] in its input: `<conv2d(x, w), dy> = <x, result>`.
pub fn conv2d_input_grad(g: &ConvGeometry, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dcols = vec![0.0; g.patch() * g.positions()];
    gemm(
        g.patch(),
        g.out_channels,
        g.positions(),
        w,
        true,
        dy,
        false,
        &mut dcols,
        false,
    );
    let mut dx = vec![0.0; g.input_len()];
    col2im_add(g, &dcols, &mut dx);
    dx
}

/// Adjoint of [`conv2d`] in its weight: `<conv2d(x, w), dy> = <w, result>`.
pub fn conv2d_weight_grad(g: &ConvGeometry, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let cols = im2col(g, x);
    let mut dw = vec![0.0; g.weight_len()];
    gemm(
        g.out_channels,
        g.positions(),
        g.patch(),
        dy,
        false,
        &cols,
        true,
        &mut dw,
        false,
    );
    dw
}
