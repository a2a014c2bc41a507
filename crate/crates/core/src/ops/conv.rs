//! 2-D convolution via im2col + [`gemm`].

use crate::ops::gemm::gemm;
use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

fn geometry<R: Real>(
    op: &'static str,
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeometry), TensorError> {
    let (n, c, h, w) = input.dims4(op)?;
    let (o, ci, kh, kw) = kernel.dims4(op)?;
    if ci != c {
        return Err(shape_err(op, format!("kernel input channels {c}"), ci));
    }
    if stride == 0 {
        return Err(TensorError::Invalid { op, msg: "stride must be positive".into() });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(shape_err(op, format!("padded input at least {kh}x{kw}"), format!("{}x{}", h + 2 * pad, w + 2 * pad)));
    }
    Ok((
        n,
        o,
        ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
        },
    ))
}

/// Output columns `lo..hi` whose unit-stride tap `kj` lands inside the row.
fn unit_stride_span(g: &ConvGeometry, kj: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(ow);
    let hi = (g.width + g.pad).saturating_sub(kj).clamp(lo, ow);
    (lo, hi)
}

fn im2col<R: Real>(x: &[R], g: &ConvGeometry, cols: &mut [R]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let src = &x[c * g.height * g.width..][..g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..][..ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.iter_mut().for_each(|v| *v = R::ZERO);
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..][..g.width];
                    if g.stride == 1 {
                        let (lo, hi) = unit_stride_span(g, kj, ow);
                        drow[..lo].iter_mut().for_each(|v| *v = R::ZERO);
                        drow[lo..hi].copy_from_slice(&srow[lo + kj - g.pad..hi + kj - g.pad]);
                        drow[hi..].iter_mut().for_each(|v| *v = R::ZERO);
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize { R::ZERO } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(cols: &[R], g: &ConvGeometry, dx: &mut [R]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.channels {
        let dst = &mut dx[c * g.height * g.width..][..g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.width..][..g.width];
                    if g.stride == 1 {
                        let (lo, hi) = unit_stride_span(g, kj, ow);
                        let srow = &src[oy * ow..][..ow];
                        for (d, &v) in drow[lo + kj - g.pad..hi + kj - g.pad].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW batch with an OIHW kernel plus per-output bias.
pub fn conv2d_forward<R: Real>(
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<R>, TensorError> {
    let op = "conv2d_forward";
    let (n, o, g) = geometry(op, input, kernel, stride, pad)?;
    bias.expect_shape(op, &[o])?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![R::ZERO; g.col_rows() * plane] };
    for b in 0..n {
        let x = input.outer(b);
        let cols_ref: &[R] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        let y = out.outer_mut(b);
        gemm(false, false, o, plane, g.col_rows(), kernel.data(), cols_ref, y, false);
        for (oc, &bv) in bias.data().iter().enumerate() {
            y[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

pub struct ConvGrads<R> {
    pub input: Tensor<R>,
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel and bias.
pub fn conv2d_backward<R: Real>(
    upstream: &Tensor<R>,
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<R>, TensorError> {
    conv2d_backward_opt(upstream, input, kernel, stride, pad, true)
}

/// As [`conv2d_backward`]; `need_input == false` skips the input gradient
/// (first layer) and returns zeros in its place.
pub fn conv2d_backward_opt<R: Real>(
    upstream: &Tensor<R>,
    input: &Tensor<R>,
    kernel: &Tensor<R>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<R>, TensorError> {
    let op = "conv2d_backward";
    let (n, o, g) = geometry(op, input, kernel, stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    upstream.expect_shape(op, &[n, o, oh, ow])?;
    let plane = oh * ow;
    let rows = g.col_rows();
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(&[o]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![R::ZERO; rows * plane] };
    let mut d_cols = vec![R::ZERO; if need_input && !g.is_pointwise() { rows * plane } else { 0 }];
    for b in 0..n {
        let up = upstream.outer(b);
        for (oc, db) in d_bias.data_mut().iter_mut().enumerate() {
            *db += up[oc * plane..(oc + 1) * plane].iter().copied().sum::<R>();
        }
        let x = input.outer(b);
        let cols_ref: &[R] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut cols);
            &cols
        };
        gemm(false, true, o, rows, plane, up, cols_ref, d_kernel.data_mut(), true);
        if need_input {
            if g.is_pointwise() {
                gemm(true, false, rows, plane, o, kernel.data(), up, d_input.outer_mut(b), false);
            } else {
                gemm(true, false, rows, plane, o, kernel.data(), up, &mut d_cols, false);
                col2im(&d_cols, &g, d_input.outer_mut(b));
            }
        }
    }
    Ok(ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn naive_conv(x: &Tensor<f32>, k: &Tensor<f32>, bias: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, w) = x.dims4("").unwrap();
        let (o, _, kh, kw) = k.dims4("").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f64; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias.data()[oc] as f64;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize] as f64
                                        * k.data()[((oc * c + ic) * kh + ki) * kw + kj] as f64;
                                }
                            }
                        }
                        out[((b * o + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unit_kernel_scales_input() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0f32);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 6, 5], &mut rng);
        let k = Tensor::zeros(&[2, 3, 3, 3]);
        let bias = Tensor::from_vec(&[2], vec![0.25f32, -1.5]).unwrap();
        let y = conv2d_forward(&x, &k, &bias, 1, 1).unwrap();
        for b in 0..2 {
            let item = y.outer(b);
            assert!(item[..30].iter().all(|&v| v == 0.25));
            assert!(item[30..].iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let x = random(&[2, 3, 8, 8], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let bias = random(&[4], &mut rng);
            let y = conv2d_forward(&x, &k, &bias, stride, pad).unwrap();
            let expect = naive_conv(&x, &k, &bias, stride, pad);
            assert_eq!(y.len(), expect.len());
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::<f32>::zeros(&[1, 2, 9, 7]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[3]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn shape_errors_are_structured() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[3, 5, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &k, &Tensor::zeros(&[3]), 1, 1), Err(TensorError::Shape { .. })));
        let k = Tensor::zeros(&[3, 2, 7, 7]);
        assert!(conv2d_forward(&x, &k, &Tensor::zeros(&[3]), 1, 1).is_err());
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        let up = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_backward(&up, &x, &k, 1, 1).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        let g = conv2d_backward(&Tensor::zeros(&[2, 4, 5, 5]), &x, &k, 1, 1).unwrap();
        assert!(g.input.data().iter().chain(g.kernel.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_kernel_scales_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1], -0.75f32);
        let up = random(&[1, 1, 4, 4], &mut rng);
        let g = conv2d_backward(&up, &x, &k, 1, 0).unwrap();
        for (d, u) in g.input.data().iter().zip(up.data()) {
            assert_eq!(*d, u * -0.75);
        }
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 3, 7, 7], &mut rng);
        let y = random(&[1, 3, 7, 7], &mut rng);
        let k = random(&[2, 3, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[2]);
        let (a, b) = (1.7f32, -0.4f32);
        let mix = Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d_forward(&mix, &k, &zero, 1, 1).unwrap();
        let cx = conv2d_forward(&x, &k, &zero, 1, 1).unwrap();
        let cy = conv2d_forward(&y, &k, &zero, 1, 1).unwrap();
        for i in 0..lhs.len() {
            assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() <= 1e-4);
        }
    }
}
