use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use reml_core::optimizer::Algorithm;

#[derive(Debug, Parser)]
#[command(name = "reml", version, about = "REML variance-component estimation for linear mixed models")]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "REML_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the variance parameters.
    Fit(FitArgs),
    /// Restricted log-likelihood at θ through every available route.
    Loglik(EvalArgs),
    /// Score and information matrices at θ.
    Info(EvalArgs),
    /// Draw responses from the model at θ and write them as CSV.
    Simulate(SimulateArgs),
    /// Run the identity suite on the loaded instance.
    Verify(EvalArgs),
    /// Print the JSON schema of every report.
    Schema(SchemaArgs),
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML model configuration.
    #[arg(long)]
    pub model: PathBuf,
}

/// Comma-separated reals such as `1.2,0.5,-0.3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Values(pub Vec<f64>);

impl std::str::FromStr for Values {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}")))
            .collect::<Result<_, _>>()
            .map(Values)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// `newton`, `fisher` or `ai`; overrides `options.algorithm` in the model file
    #[arg(long, value_parser = |s: &str| s.parse::<Algorithm>().map_err(|e| e.to_string()))]
    pub algorithm: Option<Algorithm>,
    /// Starting θ as `σ²,γ…,φ…`.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<Values>,
    /// Line-delimited JSON file receiving one record per iterate.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Matrix Market file receiving C at the estimate.
    #[arg(long)]
    pub dump_c: Option<PathBuf>,
    /// Print each iterate to stderr.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// θ as `σ²,γ…,φ…`; the default starting value when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Option<Values>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// True θ as `σ²,γ…,φ…`.
    #[arg(long, allow_hyphen_values = true)]
    pub theta: Values,
    /// Fixed effects τ, one per column of X; zeros when omitted.
    #[arg(long, allow_hyphen_values = true)]
    pub tau: Option<Values>,
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Directory receiving the datasets and `truth.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}
