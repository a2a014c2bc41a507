use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input
/// index that won.
pub fn maxpool2_forward<R: Real>(x: &Tensor<R>) -> Result<(Tensor<R>, Vec<u32>), TensorError> {
    let (n, c, h, w) = x.dims4("maxpool2_forward")?;
    if h < 2 || w < 2 {
        return Err(shape_err("maxpool2_forward", "spatial dims >= 2", format!("{h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                dst[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<R: Real>(upstream: &Tensor<R>, argmax: &[u32], input_shape: &[usize]) -> Result<Tensor<R>, TensorError> {
    if upstream.len() != argmax.len() {
        return Err(shape_err("maxpool2_backward", argmax.len(), upstream.len()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in upstream.data().iter().zip(argmax) {
        d[i as usize] += g;
    }
    Ok(dx)
}
