//! Command-line front end: `lcnet gen | train | eval | predict`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lcnet::cli::{cmd_eval, cmd_gen, cmd_predict, cmd_train, RunConfig};
use lcnet::Result;

#[derive(Parser)]
#[command(
    name = "lcnet",
    version,
    about = "Light-curve classification with a 1D inception CNN or a Siamese network"
)]
struct Args {
    /// Flat key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Top-level seed for every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dataset path (JSONL)
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Extra key=value override (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cnn,
    Siamese,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen,
    /// Train on the whole dataset and write a checkpoint
    Train {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// k-fold cross-validation with ROC export
    Eval {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score curves with a trained checkpoint
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for s in &args.sets {
        cfg.set_pair(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &args.out {
        cfg.set("io.out", &out.display().to_string())?;
    }
    if let Some(data) = &args.data {
        cfg.set("data.path", &data.display().to_string())?;
    }
    let mode = |m: ModeArg| match m {
        ModeArg::Cnn => "cnn",
        ModeArg::Siamese => "siamese",
    };
    match &args.command {
        Command::Train { mode: Some(m) } => cfg.set("train.mode", mode(*m))?,
        Command::Eval { mode: m, k } => {
            if let Some(m) = m {
                cfg.set("train.mode", mode(*m))?;
            }
            if let Some(k) = k {
                cfg.set("eval.k", &k.to_string())?;
            }
        }
        Command::Predict {
            checkpoint: Some(c),
        } => cfg.set("io.checkpoint", &c.display().to_string())?,
        _ => {}
    }
    Ok(cfg)
}

fn run(args: &Args) -> Result<String> {
    let cfg = resolve(args)?;
    match args.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Eval { .. } => cmd_eval(&cfg),
        Command::Predict { .. } => cmd_predict(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
