use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfod_cli::commands::{adapt_cmd, eval_cmd, eval_json, make_data, report_cmd, train_source_cmd, AdaptArgs, CliError, ExitKind, SourceArgs};

#[derive(Parser)]
#[command(name = "sfod", version, about = "Source-free detection adaptation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source/target benchmark splits.
    MakeData {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Supervised training on the labelled source split.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Adapt a source checkpoint to the unlabelled target split.
    Adapt {
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        tau: Option<f32>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        eval_period: Option<usize>,
        #[arg(long)]
        mosaic: bool,
        #[arg(long)]
        no_reg: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// AP50 per class and mAP of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
    },
    /// Merge run directories into a CSV table or an SVG trace plot.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MakeData { spec, out, seed } => {
            let m = make_data(spec.as_deref(), &out, seed)?;
            println!("{}", serde_json::json!({ "out": out, "seed": m.seed, "counts": m.counts }));
        }
        Command::TrainSource { data, out, config, steps, lr, seed } => {
            let args = SourceArgs {
                data: &data,
                out: &out,
                config: config.as_deref(),
                steps,
                lr,
                seed,
            };
            match train_source_cmd(&args)? {
                Some(e) => println!("{}", eval_json("source_test", &e)),
                None => println!("{}", serde_json::json!({ "checkpoint": out })),
            }
        }
        Command::Adapt {
            source_ckpt,
            data,
            strategy,
            out,
            config,
            alpha,
            tau,
            steps,
            lr,
            eval_period,
            mosaic,
            no_reg,
            seed,
        } => {
            let args = AdaptArgs {
                source_ckpt: &source_ckpt,
                data: &data,
                strategy: &strategy,
                out: &out,
                config: config.as_deref(),
                alpha,
                tau,
                steps,
                lr,
                eval_period,
                mosaic,
                no_reg,
                seed,
            };
            let r = adapt_cmd(&args)?;
            println!(
                "{}",
                serde_json::json!({
                    "strategy": r.strategy,
                    "alpha": r.config.alpha,
                    "tau": r.config.tau,
                    "include_reg": r.include_reg,
                    "final_step": r.final_step,
                    "final_map": r.final_eval.as_ref().map(|e| e.map),
                    "best_step": r.best_step,
                    "best_map": r.best_map,
                })
            );
        }
        Command::Eval { ckpt, data, split } => {
            let e = eval_cmd(&ckpt, &data, &split)?;
            println!("{}", eval_json(&split, &e));
        }
        Command::Report { runs, out } => report_cmd(&runs, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::new(ExitKind::Usage, first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
