//! `bsde-lab`: runs the accuracy, sweep and dimension experiments and
//! writes CSV results plus a JSON manifest.

use std::path::PathBuf;
use std::process::ExitCode;

use bsde_core::experiments::{run, Command, ExperimentConfig, MethodChoice};
use bsde_core::Error;
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Table1,
    SweepDt,
    SweepN,
    SweepDim,
    Solve,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Table1 => Command::Table1,
            Cmd::SweepDt => Command::SweepDt,
            Cmd::SweepN => Command::SweepN,
            Cmd::SweepDim => Command::SweepDim,
            Cmd::Solve => Command::Solve,
        }
    }
}

/// BSDE policy-iteration experiments on linear-quadratic control problems.
///
/// Flags override values read from --config.
#[derive(Debug, Parser)]
#[command(name = "bsde-lab", version)]
struct Args {
    command: Cmd,
    /// JSON file with experiment settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// builtin-2d, mass-spring:<p>, or a problem JSON path
    #[arg(long)]
    problem: Option<String>,
    /// Sample paths per iteration
    #[arg(long = "N", value_name = "INT")]
    samples: Option<usize>,
    #[arg(long, value_name = "FLOAT")]
    dt: Option<f64>,
    /// Horizon
    #[arg(long = "T", value_name = "FLOAT")]
    horizon: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated: ls-v, ls-c, tr-v, tr-c (or oracle with solve)
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trace-relative regularisation of the score covariance
    #[arg(long)]
    jitter: bool,
}

fn build_config(args: Args) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let mut c = ExperimentConfig::load(path)?;
            c.experiment = args.command.into();
            c
        }
        None => ExperimentConfig::new(args.command.into()),
    };
    if let Some(p) = args.problem {
        cfg.problem = p;
    }
    if let Some(v) = args.samples {
        cfg.samples = Some(v);
    }
    if let Some(v) = args.dt {
        cfg.dt = Some(v);
    }
    if let Some(v) = args.horizon {
        cfg.horizon = Some(v);
    }
    if let Some(v) = args.iters {
        cfg.iters = Some(v);
    }
    if let Some(v) = args.trials {
        cfg.trials = Some(v);
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(ms) = args.methods {
        let parsed = ms
            .iter()
            .map(|m| m.parse::<MethodChoice>())
            .collect::<Result<Vec<_>, _>>()?;
        cfg.methods = Some(parsed);
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    cfg.jitter |= args.jitter;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = build_config(args).and_then(|cfg| run(&cfg));
    match outcome {
        Ok(summary) if summary.all_unstable() => {
            eprintln!("all {} trials unstable", summary.trials);
            ExitCode::from(2)
        }
        Ok(summary) => {
            if summary.unstable > 0 {
                eprintln!("{} of {} trials unstable", summary.unstable, summary.trials);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
