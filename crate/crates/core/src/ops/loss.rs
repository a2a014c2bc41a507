use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

/// Mean softmax cross-entropy over `logits[N×K]` and integer targets.
/// Returns the loss and `∂loss/∂logits`.
pub fn softmax_cross_entropy<R: Real>(logits: &Tensor<R>, targets: &[usize]) -> Result<(R, Tensor<R>), TensorError> {
    let op = "softmax_cross_entropy";
    let (n, k) = logits.dims2(op)?;
    if targets.len() != n {
        return Err(crate::tensor::shape_err(op, n, targets.len()));
    }
    if n == 0 {
        return Err(TensorError::EmptyReduction { op });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(TensorError::InvalidClass { op, index: bad, classes: k });
    }
    let scale = R::ONE / R::from_usize(n);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = R::ZERO;
    for (i, (row, &t)) in logits.data().chunks_exact(k).zip(targets).enumerate() {
        let max = row.iter().copied().fold(row[0], R::max);
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        let mut z = R::ZERO;
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp();
            z += *gj;
        }
        total += z.ln() - (row[t] - max);
        for gj in g.iter_mut() {
            *gj = *gj / z * scale;
        }
        g[t] -= scale;
    }
    Ok((total * scale, grad))
}

/// Row-wise softmax of `logits[N×K]`.
pub fn softmax<R: Real>(logits: &Tensor<R>) -> Result<Tensor<R>, TensorError> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(row[0], R::max);
        let mut z = R::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Element-wise Huber penalty with unit transition point.
#[inline]
pub fn smooth_l1_value<R: Real>(d: R) -> R {
    let a = d.abs();
    if a < R::ONE {
        R::from_f64(0.5) * d * d
    } else {
        a - R::from_f64(0.5)
    }
}

#[inline]
fn smooth_l1_slope<R: Real>(d: R) -> R {
    if d.abs() < R::ONE {
        d
    } else if d > R::ZERO {
        R::ONE
    } else {
        -R::ONE
    }
}

/// `Σ smooth_l1(pred − target) / normalizer`, with gradient w.r.t. `pred`.
pub fn smooth_l1<R: Real>(pred: &[R], target: &[R], normalizer: usize) -> Result<(R, Vec<R>), TensorError> {
    let op = "smooth_l1";
    if pred.len() != target.len() {
        return Err(crate::tensor::shape_err(op, pred.len(), target.len()));
    }
    if normalizer == 0 {
        return Err(TensorError::EmptyReduction { op });
    }
    let scale = R::ONE / R::from_usize(normalizer);
    let mut loss = R::ZERO;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += smooth_l1_value(d);
            smooth_l1_slope(d) * scale
        })
        .collect();
    Ok((loss * scale, grad))
}
