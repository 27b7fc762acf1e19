//! Convolution and transposed convolution through im2col + GEMM.
//!
//! Weights follow the usual layouts: `[C_out, C_in, k, k]` for `conv2d`
//! and `[C_in, C_out, k, k]` for `conv_transpose2d`. The transposed
//! convolution is computed as the data-gradient of `conv2d`, so the two
//! share the same im2col/col2im geometry.

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

/// Zero padding applied to (top, left, bottom, right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const ZERO: Padding = Padding::same(0);

    pub const fn same(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }

    pub const fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn vertical(&self) -> usize {
        self.top + self.bottom
    }

    pub fn horizontal(&self) -> usize {
        self.left + self.right
    }
}

/// Output extent of a strided window sweep, `None` if the kernel does not fit.
pub fn conv_out_size(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || size + pad < kernel {
        return None;
    }
    Some((size + pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_size(size: usize, pad: usize, kernel: usize, stride: usize) -> Option<usize> {
    ((size.checked_sub(1)?) * stride + kernel).checked_sub(pad)
}

/// Geometry of a convolution over an input plane of `channels x height x width`.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: Padding,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(
        op: &'static str,
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: Padding,
    ) -> Result<Self> {
        let out_h = conv_out_size(height, pad.vertical(), kernel, stride);
        let out_w = conv_out_size(width, pad.horizontal(), kernel, stride);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(Self {
                channels,
                height,
                width,
                kernel,
                stride,
                pad,
                out_h,
                out_w,
            }),
            _ => Err(Error::Contract(format!(
                "{op}: kernel {kernel} stride {stride} does not fit {height}x{width} with padding {pad:?}"
            ))),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == Padding::ZERO
    }

    /// Valid output range `[lo, hi)` along one axis for a kernel offset.
    fn valid_range(out: usize, size: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
        // input index = o * stride + offset - pad must lie in [0, size)
        let lo = if pad > offset {
            (pad - offset).div_ceil(stride)
        } else {
            0
        };
        let hi = if size + pad > offset {
            ((size + pad - offset - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        let n = self.cols();
        let (oh, ow) = (self.out_h, self.out_w);
        for c in 0..self.channels {
            let plane = &input[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                let (ylo, yhi) = Self::valid_range(oh, self.height, ky, self.pad.top, s);
                for kx in 0..k {
                    let (xlo, xhi) = Self::valid_range(ow, self.width, kx, self.pad.left, s);
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if oy < ylo || oy >= yhi || xlo >= xhi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let iy = oy * s + ky - self.pad.top;
                        let src = &plane[iy * self.width..(iy + 1) * self.width];
                        dst[..xlo].fill(T::zero());
                        dst[xhi..].fill(T::zero());
                        let ix0 = xlo * s + kx - self.pad.left;
                        if s == 1 {
                            dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for (j, d) in dst[xlo..xhi].iter_mut().enumerate() {
                                *d = src[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add of columns back into the input plane.
    fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        let (k, s) = (self.kernel, self.stride);
        let n = self.cols();
        let (oh, ow) = (self.out_h, self.out_w);
        for c in 0..self.channels {
            let plane = &mut out[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                let (ylo, yhi) = Self::valid_range(oh, self.height, ky, self.pad.top, s);
                for kx in 0..k {
                    let (xlo, xhi) = Self::valid_range(ow, self.width, kx, self.pad.left, s);
                    if xlo >= xhi {
                        continue;
                    }
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in ylo..yhi {
                        let iy = oy * s + ky - self.pad.top;
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        let src = &row[oy * ow..(oy + 1) * ow];
                        let ix0 = xlo * s + kx - self.pad.left;
                        for (j, &v) in src[xlo..xhi].iter().enumerate() {
                            dst[ix0 + j * s] = dst[ix0 + j * s] + v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(Error::shape(op, format!("{channels} bias values"), b.len()));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = dy.shape();
    let mut db = Tensor::zeros([1, 1, 1, c]);
    for bi in 0..b {
        for (ci, chunk) in dy.item(bi).chunks(h * w).enumerate() {
            let acc = chunk.iter().copied().sum::<T>();
            db.data_mut()[ci] = db.data()[ci] + acc;
        }
    }
    db
}

fn conv_geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Geometry> {
    let [_, c_in, h, w] = input.shape();
    let [_, wc_in, kh, kw] = weight.shape();
    if wc_in != c_in || kh != kw {
        return Err(Error::shape(
            op,
            format!("weight [_, {c_in}, k, k]"),
            shape_str(weight.shape()),
        ));
    }
    Geometry::new(op, c_in, h, w, kh, stride, pad)
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let geo = conv_geometry("conv2d", input, weight, stride, pad)?;
    let c_out = weight.shape()[0];
    check_bias("conv2d", bias, c_out)?;
    let batch = input.batch();
    let (rows, n) = (geo.rows(), geo.cols());
    let mut out = Tensor::zeros([batch, c_out, geo.out_h, geo.out_w]);
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * n]
    };
    for b in 0..batch {
        let x = input.item(b);
        let rhs: &[T] = if geo.is_pointwise() {
            x
        } else {
            geo.im2col(x, &mut cols);
            &cols
        };
        let y = out.item_mut(b);
        T::gemm(false, false, c_out, n, rows, T::one(), weight.data(), rhs, T::zero(), y);
        add_bias(y, bias, n);
    }
    Ok(out)
}

/// Gradients of `conv2d`; `dx` only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: Padding,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let geo = conv_geometry("conv2d_backward", input, weight, stride, pad)?;
    let c_out = weight.shape()[0];
    let batch = input.batch();
    grad_out.expect_shape("conv2d_backward", [batch, c_out, geo.out_h, geo.out_w])?;
    let (rows, n) = (geo.rows(), geo.cols());
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); rows * n];
    for b in 0..batch {
        let dy = grad_out.item(b);
        let x = input.item(b);
        let rhs: &[T] = if geo.is_pointwise() {
            x
        } else {
            geo.im2col(x, &mut cols);
            &cols
        };
        T::gemm(false, true, c_out, rows, n, T::one(), dy, rhs, T::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            if geo.is_pointwise() {
                T::gemm(
                    true,
                    false,
                    rows,
                    n,
                    c_out,
                    T::one(),
                    weight.data(),
                    dy,
                    T::zero(),
                    dx.item_mut(b),
                );
            } else {
                T::gemm(
                    true,
                    false,
                    rows,
                    n,
                    c_out,
                    T::one(),
                    weight.data(),
                    dy,
                    T::zero(),
                    &mut cols,
                );
                geo.col2im(&cols, dx.item_mut(b));
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: bias_grad(grad_out),
    })
}

/// Input-gradient of `conv2d` for an explicit input extent.
///
/// This is the adjoint map the transposed convolution is built on; it is
/// exposed for the adjoint identity tests.
pub fn conv2d_backward_data<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_hw: (usize, usize),
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let [c_out, c_in, k, _] = weight.shape();
    let geo = Geometry::new("conv2d_backward_data", c_in, input_hw.0, input_hw.1, k, stride, pad)?;
    let batch = grad_out.batch();
    grad_out.expect_shape("conv2d_backward_data", [batch, c_out, geo.out_h, geo.out_w])?;
    let mut dx = Tensor::zeros([batch, c_in, input_hw.0, input_hw.1]);
    let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
    for b in 0..batch {
        T::gemm(
            true,
            false,
            geo.rows(),
            geo.cols(),
            c_out,
            T::one(),
            weight.data(),
            grad_out.item(b),
            T::zero(),
            &mut cols,
        );
        geo.col2im(&cols, dx.item_mut(b));
    }
    Ok(dx)
}

fn convt_geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Geometry> {
    let [_, c_in, h, w] = input.shape();
    let [wc_in, c_out, kh, kw] = weight.shape();
    if wc_in != c_in || kh != kw {
        return Err(Error::shape(
            op,
            format!("weight [{c_in}, _, k, k]"),
            shape_str(weight.shape()),
        ));
    }
    let oh = conv_transpose_out_size(h, pad.vertical(), kh, stride);
    let ow = conv_transpose_out_size(w, pad.horizontal(), kw, stride);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::Contract(format!("{op}: padding exceeds output extent")));
    };
    // geometry of the adjoint convolution, whose input is our output
    let geo = Geometry::new(op, c_out, oh, ow, kh, stride, pad)?;
    if geo.out_h != h || geo.out_w != w {
        return Err(Error::Contract(format!("{op}: inconsistent transposed geometry")));
    }
    Ok(geo)
}

pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let geo = convt_geometry("conv_transpose2d", input, weight, stride, pad)?;
    let [c_in, c_out, _, _] = weight.shape();
    check_bias("conv_transpose2d", bias, c_out)?;
    let batch = input.batch();
    let mut out = Tensor::zeros([batch, c_out, geo.height, geo.width]);
    let mut cols = vec![T::zero(); geo.rows() * geo.cols()];
    for b in 0..batch {
        T::gemm(
            true,
            false,
            geo.rows(),
            geo.cols(),
            c_in,
            T::one(),
            weight.data(),
            input.item(b),
            T::zero(),
            &mut cols,
        );
        let y = out.item_mut(b);
        geo.col2im(&cols, y);
        add_bias(y, bias, geo.height * geo.width);
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: Padding,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let geo = convt_geometry("conv_transpose2d_backward", input, weight, stride, pad)?;
    let [c_in, c_out, _, _] = weight.shape();
    let batch = input.batch();
    grad_out.expect_shape("conv_transpose2d_backward", [batch, c_out, geo.height, geo.width])?;
    let (rows, n) = (geo.rows(), geo.cols());
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_input.then(|| Tensor::zeros(input.shape()));
    let mut cols = vec![T::zero(); rows * n];
    for b in 0..batch {
        geo.im2col(grad_out.item(b), &mut cols);
        T::gemm(
            false,
            true,
            c_in,
            rows,
            n,
            T::one(),
            input.item(b),
            &cols,
            T::one(),
            dw.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                false,
                false,
                c_in,
                n,
                rows,
                T::one(),
                weight.data(),
                &cols,
                T::zero(),
                dx.item_mut(b),
            );
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: bias_grad(grad_out),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: Padding) -> Tensor<f64> {
        let [bn, cin, h, wd] = x.shape();
        let [cout, _, k, _] = w.shape();
        let oh = (h + pad.vertical() - k) / stride + 1;
        let ow = (wd + pad.horizontal() - k) / stride + 1;
        Tensor::from_fn([bn, cout, oh, ow], |[b, co, oy, ox]| {
            let mut acc = bias[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad.top as isize;
                        let ix = (ox * stride + kx) as isize - pad.left as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(co, ci, ky, kx) * x.at(b, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform([2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        let b = Tensor::zeros([1, 1, 1, 3]);
        let y = conv2d(&x, &w, Some(&b), 1, Padding::ZERO).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::uniform([1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let w = Tensor::<f64>::uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bias = Tensor::<f64>::uniform([1, 1, 1, 3], -1.0, 1.0, &mut rng);
        for (stride, pad) in [
            (1, Padding::same(1)),
            (1, Padding::ZERO),
            (2, Padding::same(1)),
            (1, Padding::new(1, 1, 2, 2)),
            (2, Padding::new(0, 2, 1, 0)),
        ] {
            let got = conv2d(&x, &w, Some(&bias), stride, pad).unwrap();
            let want = conv_oracle(&x, &w, bias.data(), stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {stride} pad {pad:?}");
        }
    }

    #[test]
    fn asymmetric_padding_preserves_size_for_kernel_four() {
        let x = Tensor::<f32>::zeros([1, 2, 16, 16]);
        let w = Tensor::<f32>::zeros([4, 2, 4, 4]);
        let y = conv2d(&x, &w, None, 1, Padding::new(1, 1, 2, 2)).unwrap();
        assert_eq!(y.shape(), [1, 4, 16, 16]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 8, 8]);
        let w = Tensor::<f32>::zeros([4, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, Padding::ZERO),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn transpose_output_size() {
        let x = Tensor::<f32>::zeros([1, 8, 16, 16]);
        let w = Tensor::<f32>::zeros([8, 4, 4, 4]);
        let y = conv_transpose2d(&x, &w, None, 2, Padding::same(1)).unwrap();
        assert_eq!(y.shape(), [1, 4, 32, 32]);
    }

    #[test]
    fn transpose_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::from_fn([3, 3, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        let y = conv_transpose2d(&x, &w, None, 1, Padding::ZERO).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn transpose_equals_conv_backward_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // conv maps 2 channels at 8x8 -> 3 channels at 4x4
        let w = Tensor::<f64>::uniform([3, 2, 4, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform([2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let pad = Padding::same(1);
        let adj = conv2d_backward_data(&y, &w, (8, 8), 2, pad).unwrap();
        // same weight read as [C_in=3, C_out=2, k, k] for the transposed op
        let t = conv_transpose2d(&y, &w, None, 2, pad).unwrap();
        assert!(t.max_abs_diff(&adj) < 1e-12);
    }

    #[test]
    fn bias_gradient_is_spatial_sum() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full([2, 1, 1, 1], 1.0);
        let dy = Tensor::<f64>::full([2, 2, 3, 3], 0.5);
        let g = conv2d_backward(&x, &w, &dy, 1, Padding::ZERO, false).unwrap();
        assert_eq!(g.bias.data(), &[9.0, 9.0]);
        assert!(g.input.is_none());
    }
}
