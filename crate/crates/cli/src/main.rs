mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::manifest::{Outcome, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "idm", version, about = "Penalized illness-death models for interval-censored data")]
struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a training and a test sample from a preset scenario.
    Simulate(SimulateArgs),
    /// Fit a penalized model at one penalty, or select one over the grid.
    Fit(FitArgs),
    /// Unpenalized refit on the support of a fitted model.
    Refit(RefitArgs),
    /// Predicted state probabilities at a horizon.
    Predict(PredictArgs),
    /// Replicated simulation study comparing methods.
    Evaluate(EvaluateArgs),
    /// Selection stability over bootstrap resamples at a fixed penalty.
    Bootstrap(BootstrapArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run the BIC grid search.
    #[arg(long, conflicts_with_all = ["a", "lambda"])]
    pub select: bool,
    /// Mixing parameter of a single fit.
    #[arg(long, requires = "lambda")]
    pub a: Option<f64>,
    /// Penalty levels `l01,l02,l12` of a single fit.
    #[arg(long, value_parser = parse_lambdas, requires = "a")]
    pub lambda: Option<[f64; 3]>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub standardize: bool,
    /// Truth file of a simulated sample; needed for the exact-time likelihood.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub horizon: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, value_delimiter = ',', default_value = "reg-ict,oracle-ict,reg-tt,reg-phm")]
    pub methods: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_boot: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Fit(_) => "fit",
            Command::Refit(_) => "refit",
            Command::Predict(_) => "predict",
            Command::Evaluate(_) => "evaluate",
            Command::Bootstrap(_) => "bootstrap",
        }
    }

    fn out(&self) -> &PathBuf {
        match self {
            Command::Simulate(a) => &a.out,
            Command::Fit(a) => &a.out,
            Command::Refit(a) => &a.out,
            Command::Predict(a) => &a.out,
            Command::Evaluate(a) => &a.out,
            Command::Bootstrap(a) => &a.out,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let mut manifest = RunManifest::start(cli.command.name(), std::env::args().collect());
    let outcome = commands::run(&cli, &mut manifest);
    let code = outcome.exit_code();
    if let Outcome::Failed(e) = &outcome {
        eprintln!("error: {e}");
    }
    manifest.finish(&outcome);
    let out = cli.command.out();
    if let Err(e) = std::fs::create_dir_all(out).map_err(|e| e.to_string()).and_then(|_| manifest.write(out)) {
        eprintln!("error: could not write run manifest: {e}");
    }
    ExitCode::from(code)
}

fn parse_lambdas(s: &str) -> Result<[f64; 3], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected 3 comma-separated values, got {}", v.len()))
}
