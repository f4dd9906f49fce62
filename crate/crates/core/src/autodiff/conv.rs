//! 2D convolution and its transpose, lowered to im2col + matrix products.
//!
//! Layouts follow the usual NCHW convention. A convolution kernel is
//! `[C_out, C_in, kh, kw]`; a transposed-convolution kernel is
//! `[C_in, C_out, kh, kw]`, so the same tensor used by `conv2d` maps the
//! convolution's output space back to its input space under `deconv2d`.

use super::gemm::{gemm_abt, gemm_acc, gemm_atb};
use super::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(extent + 2·pad − kernel) / stride + 1`, or `None` when the padded
/// extent is smaller than the kernel.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `(extent − 1)·stride − 2·pad + kernel`, or `None` if that is not positive.
pub fn deconv2d_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || extent == 0 {
        return None;
    }
    let full = (extent - 1) * stride + kernel;
    (full > 2 * pad).then(|| full - 2 * pad)
}

/// Geometry of a convolution from an image `[c, h, w]` to an output grid `[ho, wo]`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Calls `f(row, col, image_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + ki) as isize - self.ph as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        let base = (ci * self.h + ih as usize) * self.w;
                        for ow in 0..self.wo {
                            let iw = (ow * self.sw + kj) as isize - self.pw as isize;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            f(row, oh * self.wo + ow, base + iw as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        let n = self.cols();
        self.for_each_tap(|row, col, off| cols[row * n + col] = image[off]);
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let n = self.cols();
        self.for_each_tap(|row, col, off| image[off] += cols[row * n + col]);
    }
}

fn check_stride_pad(op: &'static str, stride: (usize, usize)) -> Result<()> {
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::invalid(op, format!("stride must be positive, got {stride:?}")));
    }
    Ok(())
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Geometry> {
    const OP: &str = "conv2d";
    input.expect_rank(OP, 4)?;
    kernel.expect_rank(OP, 4)?;
    check_stride_pad(OP, stride)?;
    let (c, h, w) = (input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw) = (kernel.dim(2), kernel.dim(3));
    if kernel.dim(1) != c {
        return Err(Error::shape(OP, "input channels (dim 1)", kernel.dim(1), c));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::invalid(OP, "kernel extents must be at least 1"));
    }
    let ho = conv2d_output_extent(h, kh, stride.0, pad.0)
        .ok_or_else(|| Error::shape(OP, "height (dim 2) + 2·pad", format!(">= {kh}"), h + 2 * pad.0))?;
    let wo = conv2d_output_extent(w, kw, stride.1, pad.1)
        .ok_or_else(|| Error::shape(OP, "width (dim 3) + 2·pad", format!(">= {kw}"), w + 2 * pad.1))?;
    Ok(Geometry { c, h, w, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1, ho, wo })
}

/// Geometry of the transposed convolution seen as the convolution it inverts:
/// the "image" is the deconv output and the "grid" is the deconv input.
fn deconv_geometry(input: &Tensor, kernel: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Geometry> {
    const OP: &str = "deconv2d";
    input.expect_rank(OP, 4)?;
    kernel.expect_rank(OP, 4)?;
    check_stride_pad(OP, stride)?;
    let (c_in, h, w) = (input.dim(1), input.dim(2), input.dim(3));
    if kernel.dim(0) != c_in {
        return Err(Error::shape(OP, "input channels (dim 1)", kernel.dim(0), c_in));
    }
    let (c_out, kh, kw) = (kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if kh == 0 || kw == 0 {
        return Err(Error::invalid(OP, "kernel extents must be at least 1"));
    }
    let ho = deconv2d_output_extent(h, kh, stride.0, pad.0)
        .ok_or_else(|| Error::shape(OP, "output height", "> 0", "<= 0"))?;
    let wo = deconv2d_output_extent(w, kw, stride.1, pad.1)
        .ok_or_else(|| Error::shape(OP, "output width", "> 0", "<= 0"))?;
    let geom =
        Geometry { c: c_out, h: ho, w: wo, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1, ho: h, wo: w };
    // Strided transposes can leave trailing rows that no input cell reaches;
    // they still have to map back onto exactly this grid.
    debug_assert_eq!(conv2d_output_extent(ho, kh, stride.0, pad.0), Some(h));
    Ok(geom)
}

fn conv_forward(input: &Tensor, kernel: &Tensor, g: &Geometry) -> Tensor {
    let n = input.dim(0);
    let c_out = kernel.dim(0);
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; n * c_out * cols];
    let mut buf = vec![0.0; rows * cols];
    for s in 0..n {
        let image = &input.data()[s * g.image_len()..(s + 1) * g.image_len()];
        g.im2col(image, &mut buf);
        let y = &mut out[s * c_out * cols..(s + 1) * c_out * cols];
        gemm_acc(c_out, rows, cols, kernel.data(), &buf, y);
    }
    Tensor::new(&[n, c_out, g.ho, g.wo], out).expect("conv output shape")
}

/// Input gradient of a convolution, which is also the forward pass of the
/// transposed convolution with the same kernel.
fn conv_input_grad(grad_out: &Tensor, kernel: &Tensor, g: &Geometry) -> Tensor {
    let n = grad_out.dim(0);
    let c_out = kernel.dim(0);
    let (rows, cols) = (g.rows(), g.cols());
    let mut dx = vec![0.0; n * g.image_len()];
    let mut buf = vec![0.0; rows * cols];
    for s in 0..n {
        buf.fill(0.0);
        let dy = &grad_out.data()[s * c_out * cols..(s + 1) * c_out * cols];
        gemm_atb(c_out, rows, cols, kernel.data(), dy, &mut buf);
        g.col2im(&buf, &mut dx[s * g.image_len()..(s + 1) * g.image_len()]);
    }
    Tensor::new(&[n, g.c, g.h, g.w], dx).expect("conv input-grad shape")
}

/// Kernel gradient: Σ_n dY_n · im2col(X_n)ᵀ.
fn conv_kernel_grad(image: &Tensor, grad_out: &Tensor, kernel_shape: &[usize], g: &Geometry) -> Tensor {
    let n = image.dim(0);
    let c_out = grad_out.dim(1);
    let (rows, cols) = (g.rows(), g.cols());
    let mut dk = vec![0.0; c_out * rows];
    let mut buf = vec![0.0; rows * cols];
    for s in 0..n {
        g.im2col(&image.data()[s * g.image_len()..(s + 1) * g.image_len()], &mut buf);
        let dy = &grad_out.data()[s * c_out * cols..(s + 1) * c_out * cols];
        gemm_abt(c_out, cols, rows, dy, &buf, &mut dk);
    }
    Tensor::new(kernel_shape, dk).expect("kernel grad shape")
}

struct Conv2d {
    geom: Geometry,
}

impl Function for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0], inputs[1]);
        let dx = needs[0].then(|| conv_input_grad(grad, k, &self.geom));
        let dk = needs[1].then(|| conv_kernel_grad(x, grad, k.shape(), &self.geom));
        vec![dx, dk]
    }
}

struct Deconv2d {
    geom: Geometry,
}

impl Function for Deconv2d {
    fn name(&self) -> &'static str {
        "deconv2d"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0], inputs[1]);
        // The transpose of a transposed convolution is the convolution itself.
        let dx = needs[0].then(|| conv_forward(grad, k, &self.geom));
        // dK[ci, :] = Σ_n X_n[ci] · im2col(dY_n)ᵀ
        let dk = needs[1].then(|| {
            let n = x.dim(0);
            let c_in = x.dim(1);
            let (rows, cols) = (self.geom.rows(), self.geom.cols());
            let mut dk = vec![0.0; c_in * rows];
            let mut buf = vec![0.0; rows * cols];
            for s in 0..n {
                let dy = &grad.data()[s * self.geom.image_len()..(s + 1) * self.geom.image_len()];
                self.geom.im2col(dy, &mut buf);
                let xs = &x.data()[s * c_in * cols..(s + 1) * c_in * cols];
                gemm_abt(c_in, cols, rows, xs, &buf, &mut dk);
            }
            Tensor::new(k.shape(), dk).expect("deconv kernel grad shape")
        });
        vec![dx, dk]
    }
}

impl Tape {
    /// Cross-correlation of `input [N, C_in, H, W]` with `kernel [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let geom = conv_geometry(self.value(input), self.value(kernel), stride, pad)?;
        let out = conv_forward(self.value(input), self.value(kernel), &geom);
        self.apply(Conv2d { geom }, &[input, kernel], out)
    }

    /// Transposed convolution of `input [N, C_in, H, W]` with `kernel [C_in, C_out, kh, kw]`.
    pub fn deconv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let geom = deconv_geometry(self.value(input), self.value(kernel), stride, pad)?;
        let out = conv_input_grad(self.value(input), self.value(kernel), &geom);
        self.apply(Deconv2d { geom }, &[input, kernel], out)
    }
}
