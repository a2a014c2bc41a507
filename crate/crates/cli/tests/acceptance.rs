//! Acceptance suite: exact property checks (1-7) and the seeded desk-scale
//! strategy grid (8-14). Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfod::adapt::{ema_update, AdaptTrace};
use sfod::batchnorm::{bn_forward, BnMode, BnState};
use sfod::detector::{ArchDescriptor, ModelState};
use sfod::synth::{read_split, write_dataset, DataSpec, SPLITS};
use sfod::Tensor;
use sfod_cli::checkpoint;
use sfod_cli::report::RunReport;

const SEEDS: [u64; 3] = [0, 1, 2];
const SOURCE_STEPS: usize = 2000;
/// Desk adaptation protocol: 1000 steps at twice the default learning rate.
/// The EMA rate is shortened so the teacher horizon (1/(1-α) = 250 steps)
/// fits inside the run.
const ADAPT_STEPS: usize = 1000;
const ADAPT_LR: f64 = 0.002;
const EVAL_PERIOD: usize = 100;
const UT_ALPHA: &str = "0.996";
const GRID_BUDGET_SECS: f64 = 30.0 * 60.0;

const ARCH: &str = "\
channels = 8, 16, 32, 32
rpn_channels = 32
roi_hidden = 128
";

/// Strategy runs of the grid: (run name, preset, extra flags).
const RUNS: [(&str, &str, &[&str]); 9] = [
    ("adabn", "adabn", &[]),
    ("sf_pl", "sf_pl", &[]),
    ("sf_fm", "sf_fm", &[]),
    ("fixed_sf_pl", "fixed_sf_pl", &[]),
    ("fixed_sf_fm", "fixed_sf_fm", &[]),
    ("adabn_fixed_sf_pl", "adabn_fixed_sf_pl", &[]),
    ("adabn_fixed_sf_fm", "adabn_fixed_sf_fm", &[]),
    ("sf_ut", "sf_ut", &["--alpha", UT_ALPHA]),
    ("sf_ut_no_reg", "sf_ut", &["--alpha", UT_ALPHA, "--no-reg"]),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Suite {
    lines: Vec<(usize, String, Outcome)>,
}

impl Suite {
    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            outcome(false, format!("panicked: {msg}"))
        });
        let line = format!(
            "criterion {id:2} {} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((id, line, result));
    }
}

fn sfod(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_sfod")).args(args).output().expect("sfod runs");
    assert!(out.status.success(), "sfod {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/")
}

// ---------------------------------------------------------------------------
// Exact suite

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    support::gradients::all_layers();
    support::gradients::detector_total_loss();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        secs < 120.0,
        format!("conv/BN/linear/relu/pool/roi-pool/CE/smooth-L1 on {} seeds + 20 detector params, 64-bit central differences, {secs:.1}s", support::gradients::SEEDS.len()),
    )
}

fn bn_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let scale = 10f64.powf(rng.gen_range(-1.2..1.5));
        let offset = rng.gen_range(-20.0..20.0);
        let x = Tensor::from_vec(&[3, 4, 5, 5], (0..300).map(|_| offset + scale * rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut st = BnState::<f64>::new(4);
        let (y, cache) = bn_forward(&x, st.view(), BnMode::Train).unwrap();
        let (_, bvar) = cache.batch_stats().unwrap();
        for c in 0..4 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.data()[(b * 4 + c) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 75.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 75.0;
            worst_mean = worst_mean.max(mean.abs());
            worst_var = worst_var.max((var - bvar[c] / (bvar[c] + st.eps)).abs());
        }
    }
    let mut st = BnState::<f32>::new(1);
    st.gamma = vec![2.0];
    st.beta = vec![1.0];
    let x = Tensor::from_vec(&[2, 1, 1, 1], vec![0.0f32, 2.0]).unwrap();
    let (y, _) = bn_forward(&x, st.view(), BnMode::Train).unwrap();
    let ex = ((y.data()[0] + 1.0).abs()).max((y.data()[1] - 3.0).abs()) as f64;
    outcome(
        worst_mean <= 1e-5 && worst_var <= 1e-4 && ex <= 1e-3,
        format!("max |mean| {worst_mean:.1e}, max |var - σ²/(σ²+ε)| {worst_var:.1e}, {{0,2}}→{:?} (err {ex:.1e})", y.data()),
    )
}

fn ema_algebra() -> Outcome {
    let arch = ArchDescriptor { backbone_channels: vec![4, 4], rpn_channels: 4, roi_hidden: 8, ..ArchDescriptor::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t0 = ModelState::<f32>::init(&arch, &mut rng).unwrap();
    let s = ModelState::<f32>::init(&arch, &mut rng).unwrap();
    let mut t = t0.clone();
    ema_update(&mut t, &s, 1.0).unwrap();
    let frozen = t == t0;
    ema_update(&mut t, &s, 0.0).unwrap();
    let copied = t == s;
    let mut t = t0.clone();
    ema_update(&mut t, &s, 0.9996).unwrap();
    let (a, b) = (0.9996f32, (1.0 - 0.9996f64) as f32);
    let mean_teacher = t.tensors().iter().zip(t0.tensors()).zip(s.tensors()).all(|((x, y), z)| {
        x.data().iter().zip(y.data()).zip(z.data()).all(|((&v, &p), &q)| v.to_bits() == (a * p + b * q).to_bits())
    });
    let (t0, s) = (t0.cast::<f64>(), s.cast::<f64>());
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.5, 0.9, 0.9996, 1.0] {
        let mut t = t0.clone();
        for k in 1..=500 {
            ema_update(&mut t, &s, alpha).unwrap();
            let ak = f64::powi(alpha, k);
            for ((x, p), q) in t.tensors().iter().zip(t0.tensors()).zip(s.tensors()) {
                for ((&v, &p), &q) in x.data().iter().zip(p.data()).zip(q.data()) {
                    worst = worst.max((v - (ak * p + (1.0 - ak) * q)).abs());
                }
            }
        }
    }
    outcome(
        frozen && copied && mean_teacher && worst <= 1e-6,
        format!("α=1 frozen {frozen}, α=0 copy {copied}, α=0.9996 exact {mean_teacher}, k≤500 closed-form max err {worst:.1e}"),
    )
}

fn oracles() -> Outcome {
    support::oracles::iou_matches_raster_count();
    support::oracles::nms_matches_fixed_point_oracle();
    support::oracles::anchor_matching_matches_oracle();
    support::oracles::ap50_matches_oracle();
    outcome(true, format!("IoU, NMS, anchor matching, AP50 vs brute force on {} instances each", support::oracles::INSTANCES))
}

// ---------------------------------------------------------------------------
// Desk grid

struct SeedRuns {
    seed: u64,
    dir: PathBuf,
    source_ckpt: PathBuf,
    source_test_map: f64,
    source_on_target: f64,
    reports: Vec<(String, RunReport, AdaptTrace)>,
}

impl SeedRuns {
    fn get(&self, name: &str) -> (&RunReport, &AdaptTrace) {
        let (_, r, t) = self.reports.iter().find(|(n, _, _)| n == name).unwrap_or_else(|| panic!("missing run {name}"));
        (r, t)
    }

    fn final_map(&self, name: &str) -> f64 {
        self.get(name).0.final_eval.as_ref().expect("final evaluation").map
    }

    fn best_map(&self, name: &str) -> f64 {
        self.get(name).0.best_map.expect("trace has evaluations")
    }

    fn final_over_peak(&self, name: &str) -> f64 {
        self.final_map(name) / self.best_map(name)
    }
}

fn eval_map(ckpt: &Path, data: &Path, split: &str) -> f64 {
    let out = Command::new(env!("CARGO_BIN_EXE_sfod"))
        .args(["eval", "--ckpt", s(ckpt), "--data", s(data), "--split", split])
        .output()
        .expect("sfod runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    v["map"].as_f64().unwrap()
}

fn run_seed(root: &Path, seed: u64) -> SeedRuns {
    let dir = root.join(format!("seed{seed}"));
    let data = dir.join("data");
    let seed_s = seed.to_string();
    let t = Instant::now();
    sfod(&["make-data", "--out", s(&data), "--seed", &seed_s]);
    let arch = dir.join("arch.cfg");
    fs::write(&arch, ARCH).unwrap();
    let source_ckpt = dir.join("source.ckpt");
    let steps = SOURCE_STEPS.to_string();
    sfod(&["train-source", "--data", s(&data), "--out", s(&source_ckpt), "--config", s(&arch), "--steps", &steps, "--seed", &seed_s]);
    let source_test_map = eval_map(&source_ckpt, &data, "source_test");
    let source_on_target = eval_map(&source_ckpt, &data, "target_test");
    eprintln!("seed {seed}: source {source_test_map:.3} in-domain, {source_on_target:.3} on target ({:.0}s)", t.elapsed().as_secs_f64());
    let (steps, lr, period) = (ADAPT_STEPS.to_string(), ADAPT_LR.to_string(), EVAL_PERIOD.to_string());
    let mut reports = Vec::new();
    for (name, preset, extra) in RUNS {
        let out = dir.join(name);
        let t = Instant::now();
        let mut args = vec![
            "adapt", "--source-ckpt", s(&source_ckpt), "--data", s(&data), "--strategy", preset, "--out", s(&out), "--steps", &steps, "--lr", &lr,
            "--eval-period", &period, "--seed", &seed_s,
        ];
        args.extend_from_slice(extra);
        sfod(&args);
        let report: RunReport = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        let trace = AdaptTrace::from_csv(&fs::read_to_string(out.join("trace.csv")).unwrap()).unwrap();
        eprintln!(
            "seed {seed}: {name:<18} final {:.3} best {:.3}@{} ({:.0}s)",
            report.final_eval.as_ref().map_or(f64::NAN, |e| e.map),
            report.best_map.unwrap_or(f64::NAN),
            report.best_step,
            t.elapsed().as_secs_f64()
        );
        reports.push((name.to_string(), report, trace));
    }
    SeedRuns { seed, dir, source_ckpt, source_test_map, source_on_target, reports }
}

fn collect(grid: &[SeedRuns], f: impl Fn(&SeedRuns) -> f64) -> Vec<f64> {
    grid.iter().map(f).collect()
}

fn adabn_freeze(grid: &[SeedRuns]) -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for g in grid {
        let (source, _) = checkpoint::load(&g.source_ckpt, None).unwrap();
        let (adapted, _) = checkpoint::load(&g.dir.join("adabn").join("final.ckpt"), None).unwrap();
        let mut frozen = 0;
        let mut stats_changed = 0;
        for ((_, kind, a), b) in source.entries().zip(adapted.tensors()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if kind == sfod::detector::ParamKind::BnStat {
                stats_changed += !same as usize;
            } else {
                pass &= same;
                frozen += same as usize;
            }
        }
        pass &= stats_changed > 0 && g.get("adabn").0.final_step == 0;
        detail.push(format!("seed {}: {frozen} weight arrays byte-identical, {stats_changed} statistic arrays changed", g.seed));
    }
    outcome(pass, detail.join("; "))
}

fn formulation_equivalence(g: &SeedRuns) -> Outcome {
    let data = g.dir.join("data");
    let cfg = g.dir.join("frozen_teacher.cfg");
    fs::write(&cfg, "fixed_pls = false\nalpha = 1\n").unwrap();
    let common = ["--source-ckpt", s(&g.source_ckpt), "--data", s(&data), "--steps", "200", "--eval-period", "20", "--lr", "0.002"];
    let mut detail = Vec::new();
    let mut pass = true;
    for preset in ["fixed_sf_fm", "adabn_fixed_sf_pl"] {
        let (a, b) = (g.dir.join(format!("eq_fixed_{preset}")), g.dir.join(format!("eq_frozen_{preset}")));
        sfod(&[&["adapt", "--strategy", preset, "--out", s(&a)], &common[..]].concat());
        sfod(&[&["adapt", "--strategy", preset, "--config", s(&cfg), "--out", s(&b)], &common[..]].concat());
        let ta = fs::read(a.join("trace.csv")).unwrap();
        let tb = fs::read(b.join("trace.csv")).unwrap();
        let (ma, _) = checkpoint::load(&a.join("final.ckpt"), None).unwrap();
        let (mb, _) = checkpoint::load(&b.join("final.ckpt"), None).unwrap();
        let rows = String::from_utf8_lossy(&ta).lines().count() - 1;
        let same = ta == tb && ma == mb;
        pass &= same;
        detail.push(format!("{preset}: {rows} trace rows {}", if same { "identical, final weights identical" } else { "DIFFER" }));
    }
    outcome(pass, detail.join("; "))
}

fn round_trips(g: &SeedRuns) -> Outcome {
    let bytes = fs::read(&g.source_ckpt).unwrap();
    let (model, meta) = checkpoint::decode(&bytes).unwrap();
    let ckpt_ok = checkpoint::encode(&model, &meta) == bytes;
    let data = g.dir.join("data");
    let copy = g.dir.join("data_copy");
    let mut data_ok = true;
    let spec = DataSpec::default();
    for (i, name) in SPLITS.iter().enumerate() {
        let scenes = read_split(&data, name).unwrap();
        data_ok &= scenes == spec.generate_split(i, g.seed);
        write_dataset(&scenes, &copy.join(name), serde_json::json!({ "split": name, "seed": g.seed })).unwrap();
        for file in ["annotations.jsonl", "manifest.json"] {
            data_ok &= fs::read(data.join(name).join(file)).unwrap() == fs::read(copy.join(name).join(file)).unwrap();
        }
        for scene in &scenes {
            let rel = format!("images/{}.ppm", scene.id);
            data_ok &= fs::read(data.join(name).join(&rel)).unwrap() == fs::read(copy.join(name).join(&rel)).unwrap();
        }
    }
    outcome(
        ckpt_ok && data_ok,
        format!("checkpoint re-encode byte-identical {ckpt_ok}; dataset read == regenerate and rewrite byte-identical {data_ok}"),
    )
}

fn main() {
    let mut suite = Suite { lines: Vec::new() };
    let start = Instant::now();
    suite.run(1, "gradient checks", gradient_checks);
    suite.run(2, "batch-norm contract", bn_contract);
    suite.run(3, "EMA algebra", ema_algebra);
    suite.run(5, "oracle equivalence", oracles);

    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&root);
    fs::create_dir_all(&root).unwrap();
    let grid_start = Instant::now();
    let grid: Vec<SeedRuns> = SEEDS.iter().map(|&seed| run_seed(&root, seed)).collect();
    let grid_secs = grid_start.elapsed().as_secs_f64();

    suite.run(4, "AdaBN freeze", || adabn_freeze(&grid));
    suite.run(6, "formulation equivalence", || formulation_equivalence(&grid[0]));
    suite.run(7, "round trips", || round_trips(&grid[0]));

    let med = |name: &str, f: fn(&SeedRuns, &str) -> f64| median(grid.iter().map(|g| f(g, name)).collect());
    let per_seed = |name: &str, f: fn(&SeedRuns, &str) -> f64| collect(&grid, |g| f(g, name));

    suite.run(8, "AdaBN gain", || {
        let src = collect(&grid, |g| g.source_on_target);
        let ada = per_seed("adabn", SeedRuns::final_map);
        let (ms, ma) = (median(src.clone()), median(ada.clone()));
        outcome(ma >= ms + 0.05, format!("median source-only {ms:.3} ({}), AdaBN {ma:.3} ({}), gain {:+.1} points", fmt3(&src), fmt3(&ada), 100.0 * (ma - ms)))
    });
    suite.run(9, "SF-UT supremacy", || {
        let ut = med("sf_ut", SeedRuns::final_map);
        let ada = med("adabn", SeedRuns::final_map);
        let (pl, fm) = (med("sf_pl", SeedRuns::final_map), med("sf_fm", SeedRuns::final_map));
        outcome(
            ut >= ada && ut >= pl && ut >= fm,
            format!("median final: sf_ut {ut:.3} ({}), adabn {ada:.3}, sf_pl {pl:.3}, sf_fm {fm:.3}", fmt3(&per_seed("sf_ut", SeedRuns::final_map))),
        )
    });
    suite.run(10, "fixed-PL stability vs collapse", || {
        let fixed = med("adabn_fixed_sf_fm", SeedRuns::final_over_peak);
        let pl = med("sf_pl", SeedRuns::final_over_peak);
        let fm = med("sf_fm", SeedRuns::final_over_peak);
        outcome(
            fixed >= 0.9 && pl < 0.7 && fm < 0.7,
            format!(
                "median final/peak: adabn_fixed_sf_fm {fixed:.3} ({}), sf_pl {pl:.3} ({}), sf_fm {fm:.3} ({})",
                fmt3(&per_seed("adabn_fixed_sf_fm", SeedRuns::final_over_peak)),
                fmt3(&per_seed("sf_pl", SeedRuns::final_over_peak)),
                fmt3(&per_seed("sf_fm", SeedRuns::final_over_peak))
            ),
        )
    });
    suite.run(11, "AdaBN+Fixed SF-FM ≈ SF-UT", || {
        let a = med("adabn_fixed_sf_fm", SeedRuns::best_map);
        let b = med("sf_ut", SeedRuns::best_map);
        outcome((a - b).abs() <= 0.03, format!("median best-by-trace: adabn_fixed_sf_fm {a:.3}, sf_ut {b:.3}, gap {:.1} points", 100.0 * (a - b).abs()))
    });
    suite.run(12, "weak-strong gain", || {
        let mut pass = true;
        let mut detail = Vec::new();
        for (strong, weak) in [("fixed_sf_fm", "fixed_sf_pl"), ("adabn_fixed_sf_fm", "adabn_fixed_sf_pl")] {
            let (a, b) = (med(strong, SeedRuns::final_map), med(weak, SeedRuns::final_map));
            pass &= a >= b + 0.01;
            detail.push(format!("{strong} {a:.3} vs {weak} {b:.3} ({:+.1})", 100.0 * (a - b)));
        }
        outcome(pass, detail.join(", "))
    });
    suite.run(13, "regression-loss ablation", || {
        let with = per_seed("sf_ut", SeedRuns::final_map);
        let without = per_seed("sf_ut_no_reg", SeedRuns::final_map);
        let wins = with.iter().zip(&without).filter(|(a, b)| a >= b).count();
        outcome(
            wins >= 2,
            format!("include_reg {} vs no_reg {} (wins {wins}/3, medians {:.3} vs {:.3})", fmt3(&with), fmt3(&without), median(with.clone()), median(without.clone())),
        )
    });
    suite.run(14, "in-domain ceiling", || {
        let v = collect(&grid, |g| g.source_test_map);
        let m = median(v.clone());
        outcome(m >= 0.85, format!("median source→source AP50 {m:.3} ({})", fmt3(&v)))
    });

    let runs: Vec<PathBuf> = grid.iter().flat_map(|g| RUNS.iter().map(move |(n, _, _)| g.dir.join(n))).collect();
    let mut args = vec!["report", "--runs"];
    args.extend(runs.iter().map(|p| s(p)));
    let table = root.join("table.csv");
    let curves = root.join("curves.svg");
    sfod(&[&args[..], &["--out", s(&table)]].concat());
    sfod(&[&args[..], &["--out", s(&curves)]].concat());

    suite.lines.sort_by_key(|(id, _, _)| *id);
    let passed = suite.lines.iter().filter(|(_, _, o)| o.pass).count();
    println!("\nacceptance summary (grid {:.0}s, total {:.0}s, artifacts in {})", grid_secs, start.elapsed().as_secs_f64(), root.display());
    for (_, line, _) in &suite.lines {
        println!("{line}");
    }
    println!("{passed}/{} criteria passed", suite.lines.len());
    let in_budget = grid_secs < GRID_BUDGET_SECS;
    println!("grid budget {}: {grid_secs:.0}s of {GRID_BUDGET_SECS:.0}s", if in_budget { "PASS" } else { "FAIL" });
    if passed != suite.lines.len() || !in_budget {
        std::process::exit(1);
    }
}
