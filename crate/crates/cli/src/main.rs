//! `depthart` command-line driver.

mod commands;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "depthart", version, about = "Next-scale autoregressive depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Train the multi-scale VQ autoencoder on depth maps.
    TrainVqvae(TrainVqArgs),
    /// Train the transformer with teacher forcing or DepthART.
    TrainVar(TrainVarArgs),
    /// Final-scale metrics of one or more models on the eval split.
    Eval(EvalArgs),
    /// Per-scale AbsRel of a model's cumulative predictions.
    ScaleCurve(ScaleCurveArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    eval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainVqArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainVarArgs {
    #[arg(long)]
    config: PathBuf,
    /// `tf` (teacher forcing) or `depthart`.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from the checkpoint in the output directory, if any.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Transformer checkpoint; repeat to rank several models.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    vq: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScaleCurveArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vq: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also draw the curve as an SVG line chart.
    #[arg(long)]
    svg: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<depthart::Error>() {
        Some(depthart::Error::Config(_)) => EXIT_USAGE,
        Some(depthart::Error::Divergence(_)) => EXIT_DIVERGENCE,
        _ if err.is::<commands::UsageError>() => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// The error chain joined by `: `, skipping causes a message already quotes.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("DEPTHART_THREADS") else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => {
            return Err(
                commands::UsageError(format!("DEPTHART_THREADS must be a positive integer, got `{raw}`")).into(),
            )
        }
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a.out, a.train, a.eval, a.seed),
        Command::TrainVqvae(a) => commands::train_vqvae(&commands::VqRun {
            config: a.config,
            data: a.data,
            out: a.out,
            steps: a.steps,
            seed: a.seed,
        }),
        Command::TrainVar(a) => commands::train_var(&commands::VarRun {
            config: a.config,
            regime: a.regime,
            vq: a.vq,
            data: a.data,
            out: a.out,
            steps: a.steps,
            seed: a.seed,
            lr: a.lr,
            batch: a.batch,
            checkpoint_every: a.checkpoint_every,
            resume: a.resume,
        }),
        Command::Eval(a) => commands::eval(&a.models, &a.vq, &a.data, &a.out),
        Command::ScaleCurve(a) => commands::scale_curve(&a.model, &a.vq, &a.data, &a.out, a.svg.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
