//! Adaptation configuration and the named strategy presets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::StrongAugParams;
use crate::detector::{InferenceConfig, SamplingConfig, StatsMode};

/// EMA rate of the mean-teacher presets.
pub const MEAN_TEACHER_ALPHA: f64 = 0.9996;
/// Pseudo-label confidence threshold of every preset.
pub const DEFAULT_TAU: f32 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub strategy: String,
    /// Teacher EMA rate: `θt ← α·θt + (1−α)·θs`.
    pub alpha: f64,
    pub tau: f32,
    /// Student trains on strongly augmented views of the teacher's input.
    pub weak_strong: bool,
    /// Pseudo-labels come from the initial model once and never change.
    pub fixed_pls: bool,
    /// Replace BN statistics with target statistics before anything else.
    pub adabn_first: bool,
    pub mosaic: bool,
    pub include_reg: bool,
    /// `false` for statistics-only strategies: no gradient steps at all.
    pub self_training: bool,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_period: usize,
    pub seed: u64,
    /// Batch-norm statistics the teacher uses while labelling.
    pub teacher_stats: StatsMode,
    pub strong: StrongAugParams,
    pub sampling: SamplingConfig,
    pub inference: InferenceConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategy: "custom".into(),
            alpha: MEAN_TEACHER_ALPHA,
            tau: DEFAULT_TAU,
            weak_strong: true,
            fixed_pls: false,
            adabn_first: false,
            mosaic: false,
            include_reg: true,
            self_training: true,
            lr: 0.001,
            momentum: 0.9,
            batch_size: 4,
            max_steps: 4000,
            eval_period: 100,
            seed: 0,
            teacher_stats: StatsMode::Running,
            strong: StrongAugParams::default(),
            sampling: SamplingConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown strategy `{0}` (known: {known})", known = PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error("invalid adaptation config: {0}")]
    Invalid(String),
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0,1]");
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return bad("tau must be a non-negative number");
        }
        if self.batch_size == 0 || self.eval_period == 0 {
            return bad("batch_size and eval_period must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("lr must be non-negative and momentum in [0,1)");
        }
        if self.mosaic && !self.fixed_pls {
            return bad("mosaic composes fixed pseudo-labels and needs fixed_pls");
        }
        if self.teacher_stats == StatsMode::Train {
            return bad("teacher_stats must be `running` or `batch_only`");
        }
        self.strong.validate().map_err(ConfigError::Invalid)
    }

    /// The model reported and returned: the teacher for a moving EMA
    /// teacher, otherwise the student (the teacher is then either a copy of
    /// the student or frozen).
    pub fn evaluates_teacher(&self) -> bool {
        !self.fixed_pls && self.alpha > 0.0 && self.alpha < 1.0
    }
}

pub const PRESET_NAMES: [&str; 11] = [
    "adabn",
    "sf_pl",
    "sf_fm",
    "fixed_sf_pl",
    "fixed_sf_fm",
    "adabn_fixed_sf_pl",
    "adabn_fixed_sf_fm",
    "mean_teacher",
    "sf_ut",
    "adabn_fixed_sf_pl_mosaic",
    "adabn_fixed_sf_fm_mosaic",
];

/// The named strategy grid.
pub fn preset(name: &str) -> Result<AdaptConfig, ConfigError> {
    let base = AdaptConfig {
        strategy: name.to_string(),
        ..AdaptConfig::default()
    };
    let fixed = |adabn_first: bool, weak_strong: bool, mosaic: bool| AdaptConfig {
        alpha: 1.0,
        fixed_pls: true,
        adabn_first,
        weak_strong,
        mosaic,
        ..base.clone()
    };
    Ok(match name {
        "adabn" => AdaptConfig {
            adabn_first: true,
            self_training: false,
            weak_strong: false,
            max_steps: 0,
            ..base
        },
        "sf_pl" => AdaptConfig {
            alpha: 0.0,
            weak_strong: false,
            ..base
        },
        "sf_fm" => AdaptConfig { alpha: 0.0, ..base },
        "fixed_sf_pl" => fixed(false, false, false),
        "fixed_sf_fm" => fixed(false, true, false),
        "adabn_fixed_sf_pl" => fixed(true, false, false),
        "adabn_fixed_sf_fm" => fixed(true, true, false),
        "adabn_fixed_sf_pl_mosaic" => fixed(true, false, true),
        "adabn_fixed_sf_fm_mosaic" => fixed(true, true, true),
        "mean_teacher" => AdaptConfig {
            weak_strong: false,
            ..base
        },
        "sf_ut" => base,
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    })
}

pub fn strategy_presets() -> Vec<AdaptConfig> {
    PRESET_NAMES.iter().map(|n| preset(n).expect("listed preset")).collect()
}
