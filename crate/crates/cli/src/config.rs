//! Flat `key = value` configuration files (UTF-8, `#` comments).

use std::fs;
use std::path::Path;
use std::str::FromStr;

use sfod::adapt::AdaptConfig;
use sfod::detector::{ArchDescriptor, StatsMode};
use sfod::synth::{DataSpec, DomainSpec, Shift};
use sfod::train::SourceConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigFileError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}`: {msg}")]
    Value { line: usize, key: String, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    /// `(key, value, line)` in file order; later duplicates win.
    pub entries: Vec<(String, String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, ConfigFileError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigFileError::Syntax {
                line: i + 1,
                msg: format!("expected `key = value`, found {line:?}"),
            })?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigFileError::Syntax {
                    line: i + 1,
                    msg: format!("bad key {key:?}"),
                });
            }
            entries.push((key.to_string(), v.trim().to_string(), i + 1));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigFileError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Applies every entry through `set`; `Ok(false)` from `set` marks the
    /// key as unknown.
    fn apply<T>(&self, target: &mut T, set: impl Fn(&mut T, &str, &str) -> Result<bool, String>) -> Result<(), ConfigFileError> {
        for (key, value, line) in &self.entries {
            match set(target, key, value) {
                Ok(true) => {}
                Ok(false) => {
                    return Err(ConfigFileError::UnknownKey {
                        line: *line,
                        key: key.clone(),
                    })
                }
                Err(msg) => {
                    return Err(ConfigFileError::Value {
                        line: *line,
                        key: key.clone(),
                        msg,
                    })
                }
            }
        }
        Ok(())
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true/false, found {v:?}")),
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|p| num(p.trim())).collect()
}

fn triple(v: &str) -> Result<[f32; 3], String> {
    let l: Vec<f32> = list(v)?;
    l.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
}

fn set_arch(a: &mut ArchDescriptor, key: &str, v: &str) -> Result<bool, String> {
    match key {
        "channels" => a.backbone_channels = list(v)?,
        "rpn_channels" => a.rpn_channels = num(v)?,
        "roi_hidden" => a.roi_hidden = num(v)?,
        "roi_pool_size" => a.roi_pool_size = num(v)?,
        "anchor_scales" => a.anchor_scales = list(v)?,
        "anchor_aspects" => a.anchor_aspects = list(v)?,
        "bn_momentum" => a.bn_momentum = num(v)?,
        "bn_eps" => a.bn_eps = num(v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Keys: `steps lr momentum batch_size warmup_steps decay_step seed
/// include_reg` plus architecture keys `channels rpn_channels roi_hidden
/// roi_pool_size anchor_scales anchor_aspects bn_momentum bn_eps`.
pub fn apply_source(kv: &KvFile, cfg: &mut SourceConfig, arch: &mut ArchDescriptor) -> Result<(), ConfigFileError> {
    let mut pair = (cfg.clone(), arch.clone());
    kv.apply(&mut pair, |(c, a), key, v| {
        match key {
            "steps" => c.steps = num(v)?,
            "lr" => c.lr = num(v)?,
            "momentum" => c.momentum = num(v)?,
            "batch_size" => c.batch_size = num(v)?,
            "warmup_steps" => c.warmup_steps = num(v)?,
            "decay_step" => c.decay_step = if v == "none" { None } else { Some(num(v)?) },
            "seed" => c.seed = num(v)?,
            "include_reg" => c.include_reg = boolean(v)?,
            _ => return set_arch(a, key, v),
        }
        Ok(true)
    })?;
    (*cfg, *arch) = pair;
    Ok(())
}

/// Keys: strategy axes (`alpha tau weak_strong fixed_pls adabn_first mosaic
/// include_reg`), optimisation (`lr momentum batch_size steps eval_period
/// seed`), `teacher_stats = running|batch`, strong augmentation
/// (`brightness contrast saturation jitter_p grayscale_p blur_sigma blur_p
/// cutout_count cutout_size cutout_fill cutout_p`, ranges as `lo,hi`) and
/// inference (`score_floor nms_iou max_dets rpn_top`).
pub fn apply_adapt(kv: &KvFile, cfg: &mut AdaptConfig) -> Result<(), ConfigFileError> {
    let mut c = cfg.clone();
    kv.apply(&mut c, |c, key, v| {
        let range = |v: &str| -> Result<(f32, f32), String> {
            let l: Vec<f32> = list(v)?;
            match l[..] {
                [a, b] => Ok((a, b)),
                _ => Err("expected `lo,hi`".into()),
            }
        };
        match key {
            "alpha" => c.alpha = num(v)?,
            "tau" => c.tau = num(v)?,
            "weak_strong" => c.weak_strong = boolean(v)?,
            "fixed_pls" => c.fixed_pls = boolean(v)?,
            "adabn_first" => c.adabn_first = boolean(v)?,
            "mosaic" => c.mosaic = boolean(v)?,
            "include_reg" => c.include_reg = boolean(v)?,
            "lr" => c.lr = num(v)?,
            "momentum" => c.momentum = num(v)?,
            "batch_size" => c.batch_size = num(v)?,
            "steps" => c.max_steps = num(v)?,
            "eval_period" => c.eval_period = num(v)?,
            "seed" => c.seed = num(v)?,
            "teacher_stats" => {
                c.teacher_stats = match v {
                    "running" => StatsMode::Running,
                    "batch" => StatsMode::BatchOnly,
                    _ => return Err("expected `running` or `batch`".into()),
                }
            }
            "brightness" => c.strong.brightness = num(v)?,
            "contrast" => c.strong.contrast = num(v)?,
            "saturation" => c.strong.saturation = num(v)?,
            "jitter_p" => c.strong.jitter_p = num(v)?,
            "grayscale_p" => c.strong.grayscale_p = num(v)?,
            "blur_sigma" => c.strong.blur_sigma = range(v)?,
            "blur_p" => c.strong.blur_p = num(v)?,
            "cutout_count" => {
                let (a, b) = range(v)?;
                c.strong.cutout_count = (a as usize, b as usize);
            }
            "cutout_size" => c.strong.cutout_size = range(v)?,
            "cutout_fill" => c.strong.cutout_fill = num(v)?,
            "cutout_p" => c.strong.cutout_p = num(v)?,
            "score_floor" => c.inference.score_floor = num(v)?,
            "nms_iou" => c.inference.nms_iou = num(v)?,
            "max_dets" => c.inference.max_dets = num(v)?,
            "rpn_top" => c.inference.rpn_top = num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    })?;
    *cfg = c;
    Ok(())
}

fn set_domain(d: &mut DomainSpec, key: &str, v: &str) -> Result<bool, String> {
    match key {
        "background_min" => d.background.0 = num(v)?,
        "background_max" => d.background.1 = num(v)?,
        "noise_scale" => d.noise_scale = num(v)?,
        "pixel_noise" => d.pixel_noise = num(v)?,
        "objects_min" => d.object_count.0 = num(v)?,
        "objects_max" => d.object_count.1 = num(v)?,
        "size_min" => d.object_size.0 = num(v)?,
        "size_max" => d.object_size.1 = num(v)?,
        "min_contrast" => d.min_contrast = num(v)?,
        "max_overlap" => d.max_overlap = num(v)?,
        "shift" => {
            d.shift = match v {
                "none" => Shift::None,
                "fog" => Shift::Fog {
                    strength: sfod::synth::DEFAULT_FOG,
                    haze: [0.8; 3],
                },
                "color" => Shift::Color { cast: [0.0; 3] },
                "scale" => Shift::Scale { factor: 1.0 },
                _ => return Err("expected none|fog|color|scale".into()),
            }
        }
        "fog_strength" | "haze" | "cast" | "scale_factor" => match (&mut d.shift, key) {
            (Shift::Fog { strength, .. }, "fog_strength") => *strength = num(v)?,
            (Shift::Fog { haze, .. }, "haze") => *haze = triple(v)?,
            (Shift::Color { cast }, "cast") => *cast = triple(v)?,
            (Shift::Scale { factor }, "scale_factor") => *factor = num(v)?,
            _ => return Err("does not apply to the current shift (set `shift` first)".into()),
        },
        _ => return Ok(false),
    }
    Ok(true)
}

/// Keys: `image_size source_train source_test target_train target_test`
/// and per-domain keys prefixed `source.` / `target.`: `background_min
/// background_max noise_scale pixel_noise objects_min objects_max size_min
/// size_max min_contrast max_overlap shift fog_strength haze cast
/// scale_factor`.
pub fn apply_data_spec(kv: &KvFile, spec: &mut DataSpec) -> Result<(), ConfigFileError> {
    let mut s = spec.clone();
    kv.apply(&mut s, |s, key, v| {
        match key {
            "image_size" => s.image_size = num(v)?,
            "source_train" => s.source_train = num(v)?,
            "source_test" => s.source_test = num(v)?,
            "target_train" => s.target_train = num(v)?,
            "target_test" => s.target_test = num(v)?,
            _ => {
                return match key.split_once('.') {
                    Some(("source", k)) => set_domain(&mut s.source, k, v),
                    Some(("target", k)) => set_domain(&mut s.target, k, v),
                    _ => Ok(false),
                }
            }
        }
        Ok(true)
    })?;
    *spec = s;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let kv = KvFile::parse("# header\nalpha = 0.5  # inline\n\ntau=0.7\nweak_strong = false\nblur_sigma = 0.5, 1.5\n").unwrap();
        let mut c = AdaptConfig::default();
        apply_adapt(&kv, &mut c).unwrap();
        assert_eq!((c.alpha, c.tau, c.weak_strong, c.strong.blur_sigma), (0.5, 0.7, false, (0.5, 1.5)));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(KvFile::parse("alpha 0.5"), Err(ConfigFileError::Syntax { line: 1, .. })));
        let kv = KvFile::parse("\nbogus = 1").unwrap();
        assert_eq!(
            apply_adapt(&kv, &mut AdaptConfig::default()),
            Err(ConfigFileError::UnknownKey {
                line: 2,
                key: "bogus".into()
            })
        );
        let kv = KvFile::parse("tau = high").unwrap();
        assert!(matches!(apply_adapt(&kv, &mut AdaptConfig::default()), Err(ConfigFileError::Value { line: 1, .. })));
    }

    #[test]
    fn data_spec_keys() {
        let kv = KvFile::parse("target_train = 7\ntarget.shift = fog\ntarget.fog_strength = 0.3\nsource.objects_max = 4").unwrap();
        let mut s = DataSpec::default();
        apply_data_spec(&kv, &mut s).unwrap();
        assert_eq!(s.target_train, 7);
        assert_eq!(s.source.object_count.1, 4);
        assert!(matches!(s.target.shift, Shift::Fog { strength, .. } if strength == 0.3));
        let kv = KvFile::parse("source.cast = 1,2,3").unwrap();
        assert!(apply_data_spec(&kv, &mut DataSpec::default()).is_err());
    }

    #[test]
    fn source_and_arch_keys() {
        let kv = KvFile::parse("steps = 10\nchannels = 8,16,32,32\nroi_hidden = 64\ndecay_step = none").unwrap();
        let (mut c, mut a) = (SourceConfig::default(), ArchDescriptor::default());
        apply_source(&kv, &mut c, &mut a).unwrap();
        assert_eq!((c.steps, c.decay_step, a.roi_hidden), (10, None, 64));
        assert_eq!(a.backbone_channels, vec![8, 16, 32, 32]);
    }
}
