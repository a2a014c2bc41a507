//! Self-training adaptation without source data: statistics adaptation,
//! pseudo-labelling, mean teacher and fixed pseudo-labels, with optional
//! weak/strong augmentation and mosaic.

mod config;
mod ema;
mod trace;

pub use config::{preset, strategy_presets, AdaptConfig, ConfigError, DEFAULT_TAU, MEAN_TEACHER_ALPHA, PRESET_NAMES};
pub use ema::ema_update;
pub use trace::{AdaptTrace, TraceRow, TRACE_COLUMNS};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adabn::{batches_of, collect_target_statistics, stack, AdaBnError};
use crate::augment::{flip_image, mosaic, strong_augment_image};
use crate::boxes::{Detection, GroundTruth};
use crate::detector::{detect_batch, forward_train, DetectorError, InferenceConfig, ModelState, StateError, StatsMode, TrainOptions};
use crate::optim::{OptimError, Sgd};
use crate::rng::derive_rng;
use crate::synth::Scene;
use crate::tensor::Tensor;
use crate::train::{evaluate, EVAL_BATCH};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("target training set is empty")]
    NoTargetData,
    #[error(transparent)]
    AdaBn(#[from] AdaBnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    /// Non-finite loss or gradient. The trace up to the failing step is kept.
    #[error("diverged at step {step}: {message}")]
    Diverged { step: usize, message: String, trace: AdaptTrace },
}

/// Confident detections per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub tau: f32,
    pub labels: Vec<Vec<Detection>>,
}

impl PseudoLabelSet {
    pub fn total(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }
}

/// Keeps detections whose class confidence is at least `tau`.
pub fn filter_confident(dets: &[Detection], tau: f32) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau).copied().collect()
}

/// Full inference with `labeler`, then the confidence filter.
pub fn generate_pseudo_labels(
    labeler: &ModelState<f32>,
    images: &[&Tensor<f32>],
    tau: f32,
    cfg: &InferenceConfig,
    stats: StatsMode,
) -> Result<PseudoLabelSet, DetectorError> {
    let mut labels = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        for dets in detect_batch(labeler, &stack(chunk), cfg, stats)? {
            labels.push(filter_confident(&dets, tau));
        }
    }
    Ok(PseudoLabelSet { tau, labels })
}

/// Hooks into a running adaptation.
pub trait AdaptObserver {
    fn row(&mut self, _row: &TraceRow) {}
    fn step(&mut self, _step: usize, _teacher: &ModelState<f32>, _student: &ModelState<f32>) {}
}

impl AdaptObserver for () {}

pub struct AdaptOutcome {
    /// Model both networks start from (after AdaBN when enabled).
    pub initial: ModelState<f32>,
    pub final_model: ModelState<f32>,
    pub best_model: ModelState<f32>,
    pub best_step: usize,
    pub teacher: ModelState<f32>,
    pub student: ModelState<f32>,
    pub trace: AdaptTrace,
    /// Labels of the un-flipped and flipped target images, when fixed.
    pub fixed_labels: Option<[PseudoLabelSet; 2]>,
    /// Pseudo-label generations performed inside the training loop.
    pub loop_label_calls: usize,
}

struct Pick {
    index: usize,
    flip: bool,
}

fn to_targets(dets: &[Detection]) -> Vec<GroundTruth> {
    dets.iter().map(|d| GroundTruth { bbox: d.bbox, class_id: d.class_id }).collect()
}

fn weak_view(image: &Tensor<f32>, flip: bool) -> Tensor<f32> {
    if flip {
        flip_image(image)
    } else {
        image.clone()
    }
}

/// Runs one adaptation from `source` on unlabelled `target` images,
/// evaluating on the labelled `eval_set` every `eval_period` steps (and at
/// step 0 and the last step).
pub fn adapt(
    source: &ModelState<f32>,
    target: &[&Tensor<f32>],
    eval_set: &[Scene],
    cfg: &AdaptConfig,
    observer: &mut dyn AdaptObserver,
) -> Result<AdaptOutcome, AdaptError> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(AdaptError::NoTargetData);
    }
    let initial = if cfg.adabn_first {
        collect_target_statistics(source, batches_of(target, cfg.batch_size))?
    } else {
        source.clone()
    };
    let mut student = initial.clone();
    let mut teacher = initial.clone();
    let mut trace = AdaptTrace::default();
    let size = source.arch().input_size;

    let evaluate_row = |model: &ModelState<f32>| -> Result<Option<crate::boxes::EvalResult>, DetectorError> {
        if eval_set.is_empty() {
            Ok(None)
        } else {
            evaluate(model, eval_set, &cfg.inference).map(Some)
        }
    };

    let first = TraceRow {
        step: 0,
        losses: None,
        num_pls: None,
        eval: evaluate_row(&initial)?,
    };
    observer.row(&first);
    let mut best = (0usize, first.eval.as_ref().map_or(f64::NEG_INFINITY, |e| e.map));
    let mut best_model = initial.clone();
    trace.rows.push(first);

    let steps = if cfg.self_training { cfg.max_steps } else { 0 };
    let fixed_labels = if cfg.fixed_pls && steps > 0 {
        let flipped: Vec<Tensor<f32>> = target.iter().map(|t| flip_image(t)).collect();
        let flipped_refs: Vec<&Tensor<f32>> = flipped.iter().collect();
        Some([
            generate_pseudo_labels(&initial, target, cfg.tau, &cfg.inference, cfg.teacher_stats)?,
            generate_pseudo_labels(&initial, &flipped_refs, cfg.tau, &cfg.inference, cfg.teacher_stats)?,
        ])
    } else {
        None
    };

    let mut rng = derive_rng(cfg.seed, &[0xADA97]);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut loop_label_calls = 0;
    let parts = if cfg.mosaic { 4 } else { 1 };
    for step in 1..=steps {
        let picks: Vec<Pick> = (0..cfg.batch_size * parts)
            .map(|_| Pick {
                index: rng.gen_range(0..target.len()),
                flip: rng.gen_bool(0.5),
            })
            .collect();
        let weak: Vec<Tensor<f32>> = picks.iter().map(|p| weak_view(target[p.index], p.flip)).collect();
        let labels: Vec<Vec<Detection>> = match &fixed_labels {
            Some(sets) => picks.iter().map(|p| sets[p.flip as usize].labels[p.index].clone()).collect(),
            None => {
                loop_label_calls += 1;
                let refs: Vec<&Tensor<f32>> = weak.iter().collect();
                generate_pseudo_labels(&teacher, &refs, cfg.tau, &cfg.inference, cfg.teacher_stats)?.labels
            }
        };
        let num_pls = labels.iter().map(Vec::len).sum();
        let views: Vec<Scene> = weak
            .into_iter()
            .zip(&labels)
            .map(|(img, dets)| Scene {
                id: String::new(),
                image: if cfg.weak_strong { strong_augment_image(&img, &cfg.strong, &mut rng) } else { img },
                annotations: to_targets(dets),
            })
            .collect();
        let samples: Vec<Scene> = if cfg.mosaic {
            views.chunks(4).map(|q| mosaic([&q[0], &q[1], &q[2], &q[3]], size)).collect()
        } else {
            views
        };
        let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
        let targets: Vec<Vec<GroundTruth>> = samples.iter().map(|s| s.annotations.clone()).collect();
        let opts = TrainOptions {
            include_reg: cfg.include_reg,
            sampling: &cfg.sampling,
            fixed_proposals: None,
        };
        let out = match forward_train(&mut student, &stack(&images), &targets, &opts, &mut rng) {
            Ok(o) => o,
            Err(DetectorError::NonFinite(message)) => return Err(AdaptError::Diverged { step, message, trace }),
            Err(e) => return Err(e.into()),
        };
        opt.step(&mut student, &out.grads)?;
        if !cfg.fixed_pls {
            ema_update(&mut teacher, &student, cfg.alpha)?;
        }
        observer.step(step, &teacher, &student);

        let reported = if cfg.evaluates_teacher() { &teacher } else { &student };
        let eval = if step % cfg.eval_period == 0 || step == steps {
            evaluate_row(reported)?
        } else {
            None
        };
        if let Some(e) = &eval {
            if e.map > best.1 {
                best = (step, e.map);
                best_model = reported.clone();
            }
        }
        let row = TraceRow {
            step,
            losses: Some(out.losses),
            num_pls: Some(num_pls),
            eval,
        };
        observer.row(&row);
        trace.rows.push(row);
    }

    let final_model = if cfg.evaluates_teacher() { teacher.clone() } else { student.clone() };
    Ok(AdaptOutcome {
        initial,
        final_model,
        best_model,
        best_step: best.0,
        teacher,
        student,
        trace,
        fixed_labels,
        loop_label_calls,
    })
}
