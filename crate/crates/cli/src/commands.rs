//! Command implementations. Every failure maps onto an [`ExitKind`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfod::adapt::{adapt, preset, AdaptConfig, AdaptError, AdaptObserver, TraceRow};
use sfod::boxes::EvalResult;
use sfod::detector::{ArchDescriptor, DetectorError, InferenceConfig, ModelState};
use sfod::synth::{read_split, write_splits, BenchmarkManifest, DataError, DataSpec, CLASS_NAMES};
use sfod::train::{evaluate, train_source, SourceConfig, TrainError};

use crate::checkpoint::{self, CheckpointError, CheckpointMeta};
use crate::config::{apply_adapt, apply_data_spec, apply_source, ConfigFileError, KvFile};
use crate::report::{config_hash, load_run, table_csv, trace_svg, ReportError, RunReport, REPORT_FILE, TRACE_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage,
    Data,
    Divergence,
    Internal,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Usage => 2,
            ExitKind::Data => 3,
            ExitKind::Divergence => 4,
            ExitKind::Internal => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ExitKind::Usage => "usage",
            ExitKind::Data => "data",
            ExitKind::Divergence => "divergence",
            ExitKind::Internal => "internal",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl fmt::Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    /// `error[<code>:<tag>]: <message>` on a single line.
    pub fn line(&self) -> String {
        format!("error[{}:{}]: {}", self.kind.code(), self.kind.tag(), self.message.replace('\n', " "))
    }
}

impl From<ConfigFileError> for CliError {
    fn from(e: ConfigFileError) -> Self {
        CliError::new(ExitKind::Usage, format!("config: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::new(ExitKind::Data, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::new(ExitKind::Data, format!("checkpoint: {e}"))
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::new(ExitKind::Data, e)
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        match e {
            DetectorError::NonFinite(_) => CliError::new(ExitKind::Divergence, e),
            DetectorError::Input(_) | DetectorError::Target(_) => CliError::new(ExitKind::Data, e),
            _ => CliError::new(ExitKind::Internal, e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::new(ExitKind::Divergence, e),
            TrainError::Empty => CliError::new(ExitKind::Data, e),
            TrainError::Detector(d) => d.into(),
            TrainError::Optim(_) => CliError::new(ExitKind::Internal, e),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::new(ExitKind::Data, format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::new(ExitKind::Data, format!("{}: {e}", path.display())))
}

fn load_kv(path: Option<&Path>) -> Result<KvFile, CliError> {
    Ok(match path {
        Some(p) => KvFile::load(p)?,
        None => KvFile::default(),
    })
}

pub fn make_data(spec_file: Option<&Path>, out: &Path, seed: u64) -> Result<BenchmarkManifest, CliError> {
    let mut spec = DataSpec::default();
    apply_data_spec(&load_kv(spec_file)?, &mut spec)?;
    spec.validate().map_err(|e| CliError::new(ExitKind::Usage, e))?;
    Ok(write_splits(&spec, seed, out)?)
}

pub struct SourceArgs<'a> {
    pub data: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
}

/// Effective source-training configuration: defaults, then file, then flags.
pub fn source_config(args: &SourceArgs<'_>) -> Result<(SourceConfig, ArchDescriptor), CliError> {
    let (mut cfg, mut arch) = (SourceConfig::default(), ArchDescriptor::default());
    apply_source(&load_kv(args.config)?, &mut cfg, &mut arch)?;
    if let Some(s) = args.steps {
        cfg.steps = s;
        if cfg.decay_step.is_some_and(|d| d >= s) {
            cfg.decay_step = Some(s * 3 / 4);
        }
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    arch.validate().map_err(|e| CliError::new(ExitKind::Usage, e))?;
    Ok((cfg, arch))
}

pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".losses.csv");
    ckpt.with_file_name(name)
}

/// Trains from a seeded initialization; writes the checkpoint and a loss
/// CSV next to it. Returns the source-test evaluation when that split has
/// scenes.
pub fn train_source_cmd(args: &SourceArgs<'_>) -> Result<Option<EvalResult>, CliError> {
    let (cfg, mut arch) = source_config(args)?;
    let scenes = read_split(args.data, "source_train")?;
    let first = scenes.first().ok_or_else(|| CliError::new(ExitKind::Data, "source_train split is empty"))?;
    arch.input_size = first.size().0;
    let mut model = ModelState::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).map_err(|e| CliError::new(ExitKind::Usage, e))?;
    let mut csv = String::from("step,total_loss,rpn_cls,rpn_reg,roi_cls,roi_reg\n");
    let t = Instant::now();
    train_source(&mut model, &scenes, &cfg, |step, l, _| {
        csv.push_str(&format!("{step},{},{},{},{},{}\n", l.total, l.rpn_cls, l.rpn_reg, l.roi_cls, l.roi_reg));
        if step % 250 == 0 {
            eprintln!("train-source step {step}/{} loss {:.4} ({:.0}s)", cfg.steps, l.total, t.elapsed().as_secs_f64());
        }
    })?;
    let meta = CheckpointMeta {
        step: cfg.steps as u64,
        seed: cfg.seed,
        config_hash: config_hash(&(&cfg, &arch)),
        label: "source".into(),
    };
    checkpoint::save(args.out, &model, &meta)?;
    write_file(&loss_csv_path(args.out), csv)?;
    let test = read_split(args.data, "source_test")?;
    if test.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(&model, &test, &InferenceConfig::default())?))
}

pub struct AdaptArgs<'a> {
    pub source_ckpt: &'a Path,
    pub data: &'a Path,
    pub strategy: &'a str,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub alpha: Option<f64>,
    pub tau: Option<f32>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub eval_period: Option<usize>,
    pub mosaic: bool,
    pub no_reg: bool,
    pub seed: Option<u64>,
}

/// Effective adaptation config: preset, then file, then flags.
pub fn adapt_config(args: &AdaptArgs<'_>) -> Result<AdaptConfig, CliError> {
    let mut cfg = preset(args.strategy).map_err(|e| CliError::new(ExitKind::Usage, e))?;
    apply_adapt(&load_kv(args.config)?, &mut cfg)?;
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(t) = args.tau {
        cfg.tau = t;
    }
    if let Some(s) = args.steps {
        cfg.max_steps = s;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(p) = args.eval_period {
        cfg.eval_period = p;
    }
    if args.mosaic {
        cfg.mosaic = true;
    }
    if args.no_reg {
        cfg.include_reg = false;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if !cfg.self_training {
        cfg.max_steps = 0;
    }
    cfg.validate().map_err(|e| CliError::new(ExitKind::Usage, e))?;
    Ok(cfg)
}

struct Progress {
    label: String,
    start: Instant,
}

impl AdaptObserver for Progress {
    fn row(&mut self, row: &TraceRow) {
        if let Some(e) = &row.eval {
            eprintln!("{} step {} map {:.4} ({:.0}s)", self.label, row.step, e.map, self.start.elapsed().as_secs_f64());
        }
    }
}

/// Runs one strategy and writes `final.ckpt`, `best.ckpt`, `trace.csv` and
/// `report.json` into `out`. A divergence still writes the trace and report
/// before failing with exit kind `Divergence`.
pub fn adapt_cmd(args: &AdaptArgs<'_>) -> Result<RunReport, CliError> {
    let cfg = adapt_config(args)?;
    let (source, _) = checkpoint::load(args.source_ckpt, None)?;
    let target = read_split(args.data, "target_train")?;
    let eval_set = read_split(args.data, "target_test")?;
    let images: Vec<_> = target.iter().map(|s| &s.image).collect();
    let start = Instant::now();
    let mut progress = Progress {
        label: cfg.strategy.clone(),
        start,
    };
    let hash = config_hash(&cfg);
    let mut report = RunReport {
        strategy: cfg.strategy.clone(),
        seed: cfg.seed,
        include_reg: cfg.include_reg,
        config: cfg.clone(),
        config_hash: hash.clone(),
        source_checkpoint: args.source_ckpt.display().to_string(),
        final_step: 0,
        final_eval: None,
        best_step: 0,
        best_map: None,
        trace_csv: TRACE_FILE.into(),
        wall_clock_secs: 0.0,
        diverged_at: None,
    };
    let classes = source.arch().num_classes;
    let outcome = match adapt(&source, &images, &eval_set, &cfg, &mut progress) {
        Ok(o) => o,
        Err(AdaptError::Diverged { step, message, trace }) => {
            report.diverged_at = Some(step);
            report.final_step = step;
            report.wall_clock_secs = start.elapsed().as_secs_f64();
            write_file(&args.out.join(TRACE_FILE), trace.to_csv(classes))?;
            write_file(&args.out.join(REPORT_FILE), serde_json::to_string_pretty(&report).expect("report serializes"))?;
            return Err(CliError::new(ExitKind::Divergence, format!("{} diverged at step {step}: {message}", cfg.strategy)));
        }
        Err(AdaptError::AdaBn(e)) => return Err(CliError::new(ExitKind::Data, e)),
        Err(AdaptError::NoTargetData) => return Err(CliError::new(ExitKind::Data, "target_train split is empty")),
        Err(AdaptError::Detector(e)) => return Err(e.into()),
        Err(e) => return Err(CliError::new(ExitKind::Internal, e)),
    };
    let last = outcome.trace.rows.last().expect("trace has the initial row");
    report.final_step = last.step;
    report.final_eval = last.eval.clone();
    report.best_step = outcome.best_step;
    report.best_map = outcome.trace.peak().map(|p| p.1);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let meta = |step: usize, label: &str| CheckpointMeta {
        step: step as u64,
        seed: cfg.seed,
        config_hash: hash.clone(),
        label: format!("{}:{label}", cfg.strategy),
    };
    checkpoint::save(&args.out.join("final.ckpt"), &outcome.final_model, &meta(report.final_step, "final"))?;
    checkpoint::save(&args.out.join("best.ckpt"), &outcome.best_model, &meta(outcome.best_step, "best"))?;
    write_file(&args.out.join(TRACE_FILE), outcome.trace.to_csv(classes))?;
    write_file(&args.out.join(REPORT_FILE), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

pub fn eval_cmd(ckpt: &Path, data: &Path, split: &str) -> Result<EvalResult, CliError> {
    let (model, _) = checkpoint::load(ckpt, None)?;
    let scenes = read_split(data, split)?;
    Ok(evaluate(&model, &scenes, &InferenceConfig::default())?)
}

/// One-line JSON rendering of an evaluation.
pub fn eval_json(split: &str, e: &EvalResult) -> String {
    let per_class: serde_json::Map<String, serde_json::Value> = CLASS_NAMES
        .iter()
        .zip(&e.per_class_ap)
        .map(|(name, ap)| (name.to_string(), serde_json::json!(ap)))
        .collect();
    serde_json::json!({ "split": split, "map": e.map, "ap50": per_class }).to_string()
}

pub fn report_cmd(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::new(ExitKind::Usage, "report needs at least one run directory"));
    }
    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext != "csv" && ext != "svg" {
        return Err(CliError::new(ExitKind::Usage, format!("--out must end in .csv or .svg, got {}", out.display())));
    }
    let loaded = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let text = if ext == "csv" {
        table_csv(&loaded, CLASS_NAMES.len())
    } else {
        let curves: Vec<_> = loaded.iter().map(|r| (format!("{} (seed {})", r.report.strategy, r.report.seed), &r.trace)).collect();
        trace_svg(&curves)
    };
    write_file(out, text)
}
