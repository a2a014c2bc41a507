use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

pub fn relu_forward<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| if v > R::ZERO { v } else { R::ZERO })
}

pub fn relu_inplace<R: Real>(x: &mut Tensor<R>) {
    x.data_mut().iter_mut().for_each(|v| {
        if !(*v > R::ZERO) {
            *v = R::ZERO
        }
    });
}

/// Gradient of ReLU given its forward *output*.
pub fn relu_backward<R: Real>(upstream: &Tensor<R>, output: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
    if upstream.shape() != output.shape() {
        return Err(shape_err("relu_backward", format!("{:?}", output.shape()), format!("{:?}", upstream.shape())));
    }
    let data = upstream
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > R::ZERO { g } else { R::ZERO })
        .collect();
    Tensor::from_vec(upstream.shape(), data)
}
