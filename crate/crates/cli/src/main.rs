use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use owdetr::config::RunConfig;
use owdetr::runner::{aggregate_report, Run, Split, OUT_ENV};
use owdetr::Error;

/// Open-world detection pipeline on the synthetic shapes benchmark.
#[derive(Parser, Debug)]
#[command(name = "owdetr", version)]
struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains task 1 on its known classes.
    Pretrain,
    /// Open-world stage of task 1; needs the pretrain checkpoint.
    Owl,
    /// Incremental step into a later task.
    Incr {
        #[arg(long)]
        task: usize,
    },
    /// Evaluates a checkpoint on a split.
    Eval {
        #[arg(long)]
        task: usize,
        /// Defaults to the task's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `eval` or `train`.
        #[arg(long, default_value = "eval")]
        split: String,
        /// Also write detections in COCO results format.
        #[arg(long)]
        dump_detections: bool,
    },
    /// Aggregates every evaluation report in the run directory.
    Report,
}

fn load_config(cli: &Cli) -> owdetr::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run_dir(cli: &Cli, config: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join("default"))
}

fn execute(cli: &Cli) -> owdetr::Result<()> {
    let config = load_config(cli)?;
    let dir = run_dir(cli, &config);
    if let Command::Report = cli.command {
        let rows = aggregate_report(&dir)?;
        print!("{}", std::fs::read_to_string(dir.join("report.txt"))?);
        log::info!("{} rows", rows.len());
        return Ok(());
    }
    if let Command::Eval { split, .. } = &cli.command {
        split.parse::<Split>()?;
    }
    let run = Run::open(&config, &dir)?;
    match &cli.command {
        Command::Pretrain => {
            println!("{}", run.pretrain()?.display());
        }
        Command::Owl => {
            println!("{}", run.owl()?.display());
        }
        Command::Incr { task } => {
            println!("{}", run.incremental(*task)?.display());
        }
        Command::Eval {
            task,
            checkpoint,
            split,
            dump_detections,
        } => {
            let artifact = run.evaluate(*task, checkpoint.as_deref(), split.parse()?, *dump_detections)?;
            println!("{}", serde_json::to_string(&artifact.report)?);
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}
