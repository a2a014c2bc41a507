use thiserror::Error;

use crate::detector::{Grads, ModelState};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("gradient entry {index} is `{found}`, parameter is `{expected}`")]
    Name { index: usize, expected: String, found: String },
    #[error("gradient `{name}` has shape {found:?}, parameter has {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

fn check_aligned<R: Real>(params: &ModelState<R>, grads: &Grads<R>) -> Result<(), OptimError> {
    if params.len() != grads.names().len() {
        return Err(OptimError::Name {
            index: params.len().min(grads.names().len()),
            expected: format!("{} entries", params.len()),
            found: format!("{} entries", grads.names().len()),
        });
    }
    for (i, ((name, _, t), (gname, g))) in params.entries().zip(grads.names().iter().zip(grads.tensors())).enumerate() {
        if name != gname {
            return Err(OptimError::Name {
                index: i,
                expected: name.to_string(),
                found: gname.clone(),
            });
        }
        if t.shape() != g.shape() {
            return Err(OptimError::Shape {
                name: name.to_string(),
                expected: t.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// `w ← w − lr·g` for every trainable entry; batch-norm running statistics
/// are left alone.
pub fn sgd_step<R: Real>(params: &mut ModelState<R>, grads: &Grads<R>, lr: f64) -> Result<(), OptimError> {
    check_aligned(params, grads)?;
    let lr = R::from_f64(lr);
    let kinds = params.kinds().to_vec();
    for ((t, g), kind) in params.tensors_mut().iter_mut().zip(grads.tensors()).zip(kinds) {
        if !kind.trainable() {
            continue;
        }
        for (w, &d) in t.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
/// With `momentum == 0` this is exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd<R = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Grads<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: None }
    }

    pub fn step(&mut self, params: &mut ModelState<R>, grads: &Grads<R>) -> Result<(), OptimError> {
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.lr);
        }
        check_aligned(params, grads)?;
        let mu = R::from_f64(self.momentum);
        let v = self.velocity.get_or_insert_with(|| Grads::zeros_like(params));
        for (vt, g) in v.tensors_mut().iter_mut().zip(grads.tensors()) {
            for (a, &b) in vt.data_mut().iter_mut().zip(g.data()) {
                *a = mu * *a + b;
            }
        }
        sgd_step(params, v, self.lr)
    }
}
