use crate::ops::gemm::gemm;
use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

/// `y[N×out] = x[N×in] · wᵀ + b` with `w` stored `out×in`.
pub fn linear_forward<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
    let (n, fan_in) = x.dims2("linear_forward")?;
    let (out, w_in) = weight.dims2("linear_forward")?;
    if w_in != fan_in {
        return Err(shape_err("linear_forward", format!("weight fan-in {fan_in}"), w_in));
    }
    bias.expect_shape("linear_forward", &[out])?;
    let mut y = Tensor::zeros(&[n, out]);
    gemm(false, true, n, out, fan_in, x.data(), weight.data(), y.data_mut(), false);
    for row in y.data_mut().chunks_exact_mut(out.max(1)) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

pub struct LinearGrads<R> {
    pub input: Tensor<R>,
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

pub fn linear_backward<R: Real>(upstream: &Tensor<R>, x: &Tensor<R>, weight: &Tensor<R>) -> Result<LinearGrads<R>, TensorError> {
    let (n, fan_in) = x.dims2("linear_backward")?;
    let (out, _) = weight.dims2("linear_backward")?;
    upstream.expect_shape("linear_backward", &[n, out])?;
    let mut d_input = Tensor::zeros(&[n, fan_in]);
    gemm(false, false, n, fan_in, out, upstream.data(), weight.data(), d_input.data_mut(), false);
    let mut d_weight = Tensor::zeros(&[out, fan_in]);
    gemm(true, false, out, fan_in, n, upstream.data(), x.data(), d_weight.data_mut(), false);
    let mut d_bias = Tensor::zeros(&[out]);
    for row in upstream.data().chunks_exact(out.max(1)) {
        for (d, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok(LinearGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    })
}
