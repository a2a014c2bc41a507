//! Supervised source training and dataset-level evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adabn::stack;
use crate::augment::weak_augment;
use crate::boxes::{evaluate_ap50, Detection, EvalResult};
use crate::detector::{detect_batch, forward_train, DetectorError, InferenceConfig, LossBreakdown, ModelState, SamplingConfig, StatsMode, TrainOptions};
use crate::optim::{OptimError, Sgd};
use crate::rng::derive_rng;
use crate::synth::Scene;

/// Images per inference batch during evaluation.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training scenes")]
    Empty,
    #[error("diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: DetectorError,
    },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Linear learning-rate warmup length.
    pub warmup_steps: usize,
    /// Step after which the learning rate drops tenfold (`None` keeps it).
    pub decay_step: Option<usize>,
    pub include_reg: bool,
    pub seed: u64,
    pub sampling: SamplingConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 4,
            warmup_steps: 100,
            decay_step: Some(2250),
            include_reg: true,
            seed: 0,
            sampling: SamplingConfig::default(),
        }
    }
}

impl SourceConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step <= self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = match self.decay_step {
            Some(d) if step > d => 0.1,
            _ => 1.0,
        };
        self.lr * warm * decay
    }
}

/// Detections for every scene, computed in batches of [`EVAL_BATCH`].
pub fn detect_scenes(model: &ModelState<f32>, scenes: &[Scene], cfg: &InferenceConfig, stats: StatsMode) -> Result<Vec<Vec<Detection>>, DetectorError> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(EVAL_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        out.extend(detect_batch(model, &stack(&images), cfg, stats)?);
    }
    Ok(out)
}

/// AP50 / mAP of `model` (running statistics) on labelled scenes.
pub fn evaluate(model: &ModelState<f32>, scenes: &[Scene], cfg: &InferenceConfig) -> Result<EvalResult, DetectorError> {
    let dets = detect_scenes(model, scenes, cfg, StatsMode::Running)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.annotations.clone()).collect();
    Ok(evaluate_ap50(&dets, &gts, model.arch().num_classes))
}

/// Supervised training on labelled scenes with random horizontal flips.
/// Scenes are visited in reshuffled epochs. `on_step` sees every step's
/// losses after the update.
pub fn train_source(
    model: &mut ModelState<f32>,
    scenes: &[Scene],
    cfg: &SourceConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown, &ModelState<f32>),
) -> Result<(), TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut rng = derive_rng(cfg.seed, &[0x50_u64]);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=cfg.steps {
        let mut views = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            views.push(weak_augment(&scenes[idx], &mut rng).0);
        }
        let images: Vec<_> = views.iter().map(|s| &s.image).collect();
        let targets: Vec<_> = views.iter().map(|s| s.annotations.clone()).collect();
        let opts = TrainOptions {
            include_reg: cfg.include_reg,
            sampling: &cfg.sampling,
            fixed_proposals: None,
        };
        let out = match forward_train(model, &stack(&images), &targets, &opts, &mut rng) {
            Ok(o) => o,
            Err(e @ DetectorError::NonFinite(_)) => return Err(TrainError::Diverged { step, source: e }),
            Err(e) => return Err(e.into()),
        };
        opt.lr = cfg.lr_at(step);
        opt.step(model, &out.grads)?;
        on_step(step, &out.losses, model);
    }
    Ok(())
}
