use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use initgan::eval::{evaluate, run_ablation, thread_cap};
use initgan::numerics::{Checkpoint, OpKind};
use initgan::training::{resume, train, write_resolved_config, TrainConfig, TrainState};
use initgan::verify::{run_checks, CheckOptions};
use initgan::Error;

#[derive(Parser)]
#[command(
    name = "initgan",
    version,
    about = "Informative sample mining for multi-domain conditional GANs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "K=V")]
    overrides: Vec<String>,
    /// Output directory; defaults to the config's `out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model, optionally resuming from a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint and write metrics.json and metrics.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Run all five variants for every seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_name = "LIST", default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Run the verification suite and print a JSON report.
    Check {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Flip the sign of one op's backward rule (negative control).
        #[arg(long, value_name = "OP", hide = true)]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Defaults, then the file, then `--set` overrides, validated.
fn resolve(args: &ConfigArgs) -> Result<(TrainConfig, PathBuf), Failure> {
    let mut config = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        config
            .apply_text(&text)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Config(format!("--set expects key=value, got {o:?}")))?;
        config.set(k, v)?;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    let out = config.out_dir.clone();
    write_resolved_config(&config, &out)?;
    Ok((config, out))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, checkpoint } => {
            let (config, out) = resolve(&cfg)?;
            let outcome = match checkpoint {
                Some(ckpt) => resume(config, &ckpt, Some(&out))?,
                None => train(config, Some(&out))?,
            };
            if let Some(last) = outcome.checkpoints.last() {
                println!("{}", last.display());
            }
        }
        Command::Eval { cfg, checkpoint } => {
            let (config, out) = resolve(&cfg)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let state = TrainState::from_checkpoint(config.clone(), &ckpt)?;
            let report = evaluate(&state.spec, &state.generator, config.eval_samples, config.seed)?;
            write_json(&out.join("metrics.json"), &report)?;
            let csv_path = out.join("metrics.csv");
            let f =
                fs::File::create(&csv_path).map_err(|e| Failure::Runtime(format!("{}: {e}", csv_path.display())))?;
            report.write_csv(f)?;
            println!(
                "fid {:.6} mean_acc {:.6} content_err {:.6}",
                report.fid, report.mean_acc, report.content_err
            );
        }
        Command::Ablate { cfg, seeds } => {
            let seeds = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Config(format!("--seeds: {e}")))?;
            let (config, out) = resolve(&cfg)?;
            let table = run_ablation(&config, &seeds, thread_cap())?;
            table.write_to(&out)?;
            for s in table.summary() {
                println!(
                    "{}: completed {} failed {} median fid {:?} median acc {:?}",
                    s.variant.label(),
                    s.completed,
                    s.failed,
                    s.median_fid,
                    s.median_mean_acc
                );
            }
        }
        Command::Check { cfg, inject_fault } => {
            let fault = inject_fault
                .map(|name| OpKind::from_name(&name).ok_or_else(|| Failure::Config(format!("unknown op {name:?}"))))
                .transpose()?;
            let (config, out) = resolve(&cfg)?;
            let report = run_checks(&CheckOptions {
                fault,
                seed: config.seed,
            })?;
            write_json(&out.join("check.json"), &report)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?
            );
            if !report.passed {
                return Err(Failure::Check);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Check) => {
            eprintln!("error: verification checks failed");
            ExitCode::from(4)
        }
    }
}
