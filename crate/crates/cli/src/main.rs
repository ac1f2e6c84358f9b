//! `ukt`: data preparation, training, evaluation and the analysis
//! experiments from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ukt::model::Variant;

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ukt::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use ukt::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Io { .. } | CliError::Core(E::Parse { .. } | E::Data(_) | E::Lookup(_) | E::Io { .. }) => 2,
            CliError::Numeric(_)
            | CliError::Core(E::Tensor(_) | E::Evaluation(_) | E::UndefinedMetric(_) | E::Divergence { .. }) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ukt", version, about = "Uncertainty-aware knowledge tracing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Args)]
struct Flags {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Interaction log (csv-flat or csv-grouped).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Contrastive loss weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// ukt, wo-cl, wo-wdist or wo-stocemb.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Maximum training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Embedding dimension.
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true)]
    blocks: Option<usize>,
    /// Adam learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Response flip probability for stress evaluation.
    #[arg(long, global = true)]
    noise_rate: Option<f64>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Parse, expand, filter and split a dataset.
    PrepareData,
    /// Generate a synthetic cohort as csv-flat.
    Synth,
    /// Train one model on one fold and save its checkpoint.
    Train,
    /// Evaluate a checkpoint on the test students.
    Eval,
    /// Cross-validated test AUC for each contrastive weight.
    SweepLambda,
    /// Per-sequence mean refined covariance of a checkpoint.
    Heatmap,
    /// Clean versus noised AUC for several variants.
    StressEval,
    /// Finite-difference check of the full objective.
    Gradcheck,
    /// Cross-validated full model and single-switch ablations.
    Ablate,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let f = &cli.flags;
    let base = match &f.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let cfg = base.resolve(&Overrides {
        dataset: f.dataset.clone(),
        out: f.out.clone(),
        seed: f.seed,
        lambda: f.lambda,
        variant: f.variant,
        epochs: f.epochs,
        dim: f.dim,
        heads: f.heads,
        blocks: f.blocks,
        lr: f.lr,
        dropout: f.dropout,
        batch_size: f.batch_size,
        noise_rate: f.noise_rate,
    });
    std::fs::create_dir_all(&cfg.run.out).map_err(|e| CliError::io(&cfg.run.out, e))?;
    cfg.write_resolved()?;
    match cli.command {
        Command::PrepareData => commands::prepare_data(&cfg),
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::SweepLambda => commands::sweep_lambda(&cfg),
        Command::Heatmap => commands::heatmap(&cfg),
        Command::StressEval => commands::stress_eval(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Ablate => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.flags.quiet { log::LevelFilter::Error } else { log::LevelFilter::Info };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
