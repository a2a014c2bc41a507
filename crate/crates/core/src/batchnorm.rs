//! Per-channel batch normalization over NCHW activations.
//!
//! Train mode normalizes with the biased batch statistics and folds them
//! into the running estimates; Eval mode reads the running estimates and
//! mutates nothing.

use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Owned batch-norm parameters and statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<R = f32> {
    pub gamma: Vec<R>,
    pub beta: Vec<R>,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    /// Weight of the newest batch in the running update.
    pub momentum: f64,
    pub eps: f64,
}

impl<R: Real> BnState<R> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![R::ONE; channels],
            beta: vec![R::ZERO; channels],
            running_mean: vec![R::ZERO; channels],
            running_var: vec![R::ONE; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn view(&mut self) -> BnView<'_, R> {
        BnView {
            gamma: &self.gamma,
            beta: &self.beta,
            running_mean: &mut self.running_mean,
            running_var: &mut self.running_var,
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

/// Borrowed layer parameters, as stored inside a model state.
pub struct BnView<'a, R> {
    pub gamma: &'a [R],
    pub beta: &'a [R],
    pub running_mean: &'a mut [R],
    pub running_var: &'a mut [R],
    pub momentum: f64,
    pub eps: f64,
}

/// Values saved by [`bn_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub enum BnCache<R> {
    Train {
        xhat: Tensor<R>,
        inv_std: Vec<R>,
        batch_mean: Vec<R>,
        batch_var: Vec<R>,
    },
    Eval,
}

impl<R: Real> BnCache<R> {
    /// Biased batch statistics seen by a Train-mode forward.
    pub fn batch_stats(&self) -> Option<(&[R], &[R])> {
        match self {
            BnCache::Train { batch_mean, batch_var, .. } => Some((batch_mean, batch_var)),
            BnCache::Eval => None,
        }
    }
}

pub fn bn_forward<R: Real>(x: &Tensor<R>, p: BnView<'_, R>, mode: BnMode) -> Result<(Tensor<R>, BnCache<R>), TensorError> {
    let op = "bn_forward";
    let (n, c, h, w) = x.dims4(op)?;
    if p.gamma.len() != c || p.beta.len() != c || p.running_mean.len() != c || p.running_var.len() != c {
        return Err(shape_err(op, format!("{c} channels"), p.gamma.len()));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = R::from_f64(p.eps);
    let mut out = Tensor::zeros(x.shape());
    match mode {
        BnMode::Eval => {
            for ch in 0..c {
                let scale = p.gamma[ch] / (p.running_var[ch] + eps).sqrt();
                let shift = p.beta[ch] - p.running_mean[ch] * scale;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    let src = &x.data()[off..off + plane];
                    let dst = &mut out.data_mut()[off..off + plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * scale + shift;
                    }
                }
            }
            Ok((out, BnCache::Eval))
        }
        BnMode::Train => {
            if count < 2 {
                return Err(TensorError::Invalid {
                    op,
                    msg: format!("train mode needs at least 2 values per channel, got {count}"),
                });
            }
            let inv_count = R::ONE / R::from_usize(count);
            let momentum = R::from_f64(p.momentum);
            let mut xhat = Tensor::zeros(x.shape());
            let mut inv_std = vec![R::ZERO; c];
            let mut batch_mean = vec![R::ZERO; c];
            let mut batch_var = vec![R::ZERO; c];
            for ch in 0..c {
                let planes = (0..n).map(|b| (b * c + ch) * plane);
                let mut sum = R::ZERO;
                for off in planes.clone() {
                    sum += x.data()[off..off + plane].iter().copied().sum::<R>();
                }
                let mean = sum * inv_count;
                let mut sq = R::ZERO;
                for off in planes.clone() {
                    sq += x.data()[off..off + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<R>();
                }
                let var = sq * inv_count;
                let istd = R::ONE / (var + eps).sqrt();
                for off in planes {
                    let src = &x.data()[off..off + plane];
                    let xh = &mut xhat.data_mut()[off..off + plane];
                    for (d, &s) in xh.iter_mut().zip(src) {
                        *d = (s - mean) * istd;
                    }
                    let dst = &mut out.data_mut()[off..off + plane];
                    for (d, &v) in dst.iter_mut().zip(xh.iter()) {
                        *d = p.gamma[ch] * v + p.beta[ch];
                    }
                }
                p.running_mean[ch] = (R::ONE - momentum) * p.running_mean[ch] + momentum * mean;
                p.running_var[ch] = (R::ONE - momentum) * p.running_var[ch] + momentum * var;
                inv_std[ch] = istd;
                batch_mean[ch] = mean;
                batch_var[ch] = var;
            }
            Ok((
                out,
                BnCache::Train {
                    xhat,
                    inv_std,
                    batch_mean,
                    batch_var,
                },
            ))
        }
    }
}

pub struct BnGrads<R> {
    pub input: Tensor<R>,
    pub gamma: Vec<R>,
    pub beta: Vec<R>,
}

pub fn bn_backward<R: Real>(upstream: &Tensor<R>, cache: &BnCache<R>, gamma: &[R]) -> Result<BnGrads<R>, TensorError> {
    let op = "bn_backward";
    let (xhat, inv_std) = match cache {
        BnCache::Train { xhat, inv_std, .. } => (xhat, inv_std),
        BnCache::Eval => {
            return Err(TensorError::Invalid {
                op,
                msg: "no gradient path through eval-mode running statistics".into(),
            })
        }
    };
    if upstream.shape() != xhat.shape() {
        return Err(shape_err(op, format!("{:?}", xhat.shape()), format!("{:?}", upstream.shape())));
    }
    let (n, c, h, w) = upstream.dims4(op)?;
    let plane = h * w;
    let m = R::from_usize(n * plane);
    let mut d_input = Tensor::zeros(upstream.shape());
    let mut d_gamma = vec![R::ZERO; c];
    let mut d_beta = vec![R::ZERO; c];
    for ch in 0..c {
        let mut sum_g = R::ZERO;
        let mut sum_gx = R::ZERO;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for (&g, &xh) in upstream.data()[off..off + plane].iter().zip(&xhat.data()[off..off + plane]) {
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        d_beta[ch] = sum_g;
        d_gamma[ch] = sum_gx;
        let k = gamma[ch] * inv_std[ch] / m;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            let up = &upstream.data()[off..off + plane];
            let xh = &xhat.data()[off..off + plane];
            let dst = &mut d_input.data_mut()[off..off + plane];
            for i in 0..plane {
                dst[i] = k * (m * up[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    Ok(BnGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut st = BnState::<f32>::new(2);
        st.beta = vec![0.3, -0.7];
        st.gamma = vec![5.0, 2.0];
        let mut x = Tensor::zeros(&[3, 2, 2, 2]);
        for b in 0..3 {
            x.outer_mut(b)[..4].iter_mut().for_each(|v| *v = 4.0);
            x.outer_mut(b)[4..].iter_mut().for_each(|v| *v = -1.0);
        }
        let (y, _) = bn_forward(&x, st.view(), BnMode::Train).unwrap();
        for b in 0..3 {
            assert!(y.outer(b)[..4].iter().all(|&v| v == 0.3));
            assert!(y.outer(b)[4..].iter().all(|&v| v == -0.7));
        }
    }

    #[test]
    fn worked_example_zero_two() {
        let mut st = BnState::<f64>::new(1);
        st.gamma = vec![2.0];
        st.beta = vec![1.0];
        st.eps = 1e-12;
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let (y, cache) = bn_forward(&x, st.view(), BnMode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 3.0).abs() < 1e-9);
        let (m, v) = cache.batch_stats().unwrap();
        assert_eq!((m[0], v[0]), (1.0, 1.0));
    }

    #[test]
    fn eval_mode_identity_stats_and_no_mutation() {
        let mut st = BnState::<f32>::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let before = st.clone();
        let (y1, cache) = bn_forward(&x, st.view(), BnMode::Eval).unwrap();
        let (y2, _) = bn_forward(&x, st.view(), BnMode::Eval).unwrap();
        assert_eq!(st, before);
        assert_eq!(y1, y2);
        let s = 1.0 / (1.0f32 + 1e-5).sqrt();
        for (a, b) in y1.data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-6);
        }
        assert!(bn_backward(&y1, &cache, &st.gamma).is_err());
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut st = BnState::<f64>::new(1);
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        bn_forward(&x, st.view(), BnMode::Train).unwrap();
        assert!((st.running_mean[0] - 0.3).abs() < 1e-12);
        assert!((st.running_var[0] - (0.9 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_single_value() {
        let mut st = BnState::<f32>::new(1);
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(bn_forward(&x, st.view(), BnMode::Train).is_err());
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(bn_forward(&x, st.view(), BnMode::Eval), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn zero_upstream_and_beta_gradient() {
        let mut st = BnState::<f64>::new(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_vec(&[2, 2, 3, 3], (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, cache) = bn_forward(&x, st.view(), BnMode::Train).unwrap();
        let g = bn_backward(&Tensor::zeros(x.shape()), &cache, &st.gamma).unwrap();
        assert!(g.input.data().iter().chain(&g.gamma).chain(&g.beta).all(|&v| v == 0.0));
        let up = Tensor::from_vec(x.shape(), (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = bn_backward(&up, &cache, &st.gamma).unwrap();
        for ch in 0..2 {
            let expect: f64 = (0..2).map(|b| up.data()[(b * 2 + ch) * 9..][..9].iter().sum::<f64>()).sum();
            assert!((g.beta[ch] - expect).abs() < 1e-12);
        }
    }
}
