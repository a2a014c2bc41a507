//! Statistics-only adaptation: replace every batch-norm running estimate
//! with the equal-weight mean of per-batch statistics over one pass of
//! target data, with all weights frozen.

use std::borrow::Borrow;

use thiserror::Error;

use crate::detector::{backbone_forward, DetectorError, ModelState, StatsMode};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AdaBnError {
    #[error("target stream is empty")]
    Empty,
    #[error("model has no batch-norm layers")]
    NoBatchNorm,
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// One forward sweep per batch with batch statistics in every layer (later
/// layers see activations normalized by the earlier layers' batch
/// statistics). Running means and variances become the average of the
/// per-batch values; every other entry is copied unchanged.
pub fn collect_target_statistics<R: Real, I>(model: &ModelState<R>, batches: I) -> Result<ModelState<R>, AdaBnError>
where
    I: IntoIterator,
    I::Item: Borrow<Tensor<R>>,
{
    let layers = model.num_bn_layers();
    if layers == 0 {
        return Err(AdaBnError::NoBatchNorm);
    }
    let mut sums: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
    let mut count = 0usize;
    for batch in batches {
        let out = backbone_forward(model, batch.borrow(), StatsMode::BatchOnly, false)?;
        let acc = sums.get_or_insert_with(|| out.batch_stats.iter().map(|(m, _)| (vec![0.0; m.len()], vec![0.0; m.len()])).collect());
        for ((sm, sv), (m, v)) in acc.iter_mut().zip(&out.batch_stats) {
            sm.iter_mut().zip(m).for_each(|(s, x)| *s += x.to_f64());
            sv.iter_mut().zip(v).for_each(|(s, x)| *s += x.to_f64());
        }
        count += 1;
    }
    let sums = sums.ok_or(AdaBnError::Empty)?;
    let mut adapted = model.clone();
    for (i, (sm, sv)) in sums.iter().enumerate() {
        let mean = adapted.get_mut(&format!("backbone.{i}.bn.running_mean")).map_err(DetectorError::from)?;
        mean.data_mut().iter_mut().zip(sm).for_each(|(d, s)| *d = R::from_f64(s / count as f64));
        let var = adapted.get_mut(&format!("backbone.{i}.bn.running_var")).map_err(DetectorError::from)?;
        var.data_mut().iter_mut().zip(sv).for_each(|(d, s)| *d = R::from_f64(s / count as f64));
    }
    Ok(adapted)
}

/// Consecutive batches of at most `batch_size` `[C,H,W]` images, in order.
pub fn batches_of<'a>(images: &'a [&'a Tensor<f32>], batch_size: usize) -> impl Iterator<Item = Tensor<f32>> + 'a {
    images.chunks(batch_size.max(1)).map(stack)
}

/// Stacks `[C,H,W]` images into `[N,C,H,W]`.
pub fn stack(images: &[&Tensor<f32>]) -> Tensor<f32> {
    let shape = images.first().map(|t| t.shape().to_vec()).unwrap_or_else(|| vec![0, 0, 0]);
    let mut data = Vec::with_capacity(images.len() * images.first().map_or(0, |t| t.len()));
    for t in images {
        assert_eq!(t.shape(), shape.as_slice(), "stack: mixed image shapes");
        data.extend_from_slice(t.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data).expect("stack shape")
}
