//! `sg` — train, sample, evaluate, and probe the entropic-attention
//! diffusion lab from the command line.
//!
//! Configuration comes from an optional TOML file (`--config`); any
//! command-line flag overrides its file counterpart. Exit codes: 0 success,
//! 1 usage error, 2 input/parse error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sinkhorn_guidance_cli::commands;
use sinkhorn_guidance_cli::config::RunConfig;
use sinkhorn_guidance_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "sg",
    version,
    about = "Entropic-attention guidance lab: Sinkhorn attention + toy diffusion"
)]
struct Cli {
    /// TOML configuration file; defaults apply for every missing key
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed for data, initialization, and sampling
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory (created if missing)
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser and write a checkpoint plus loss curve
    Train(TrainArgs),
    /// Sample guided chains from a checkpoint
    Sample(SampleArgs),
    /// Score a samples file against regenerated ground truth
    Eval(EvalArgs),
    /// Solve one transport plan from Q/K matrix files
    Plan(PlanArgs),
    /// Sweep the guidance scale and tabulate metrics per scale
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset: gauss8 | checkerboard | swissroll | gauss1 [default: gauss8]
    #[arg(long)]
    dataset: Option<String>,

    /// Number of training examples to draw [default: 512]
    #[arg(long)]
    examples: Option<usize>,

    /// Training epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,

    /// Learning rate [default: 0.01]
    #[arg(long)]
    lr: Option<f64>,

    /// Batch size [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Diffusion steps in the forward schedule [default: 1000]
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint directory (as written by `sg train`)
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,

    /// Guidance method: none | cfg | pag | seg | asag | uniform [default: asag]
    #[arg(long)]
    method: Option<String>,

    /// Guidance scale s [default: 1.5]
    #[arg(long)]
    scale: Option<f64>,

    /// Sampling steps [default: 25]
    #[arg(long)]
    steps: Option<usize>,

    /// Independent chains [default: 24]
    #[arg(long)]
    chains: Option<usize>,

    /// Class condition; omit for unconditional sampling
    #[arg(long)]
    class: Option<usize>,

    /// Comma-separated perturbed block indices [default: middle of the stack]
    #[arg(long, value_name = "LIST")]
    layers: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Samples CSV to score
    #[arg(long, value_name = "PATH")]
    samples: PathBuf,

    /// Optional trace JSONL contributing the mean plan entropy
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,

    /// Reference dataset [default: gauss8]
    #[arg(long)]
    dataset: Option<String>,

    /// Mode-coverage radius [default: 0.3]
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlanMode {
    /// Cost 1 - QK^T (attend to similar keys)
    Similarity,
    /// Cost QK^T (the adversarial orientation)
    Adversarial,
}

#[derive(Args)]
struct PlanArgs {
    /// Query matrix CSV
    #[arg(long, value_name = "PATH")]
    q: PathBuf,

    /// Key matrix CSV (same shape as Q)
    #[arg(long, value_name = "PATH")]
    k: PathBuf,

    /// Cost orientation
    #[arg(long, value_enum, default_value = "adversarial")]
    mode: PlanMode,

    /// Regularization strength [default: 1/sqrt(d)]
    #[arg(long)]
    lambda: Option<f64>,

    /// Convergence threshold on the dual update [default: 1e-3]
    #[arg(long)]
    eps_max: Option<f64>,

    /// Iteration cap [default: 50]
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Checkpoint directory (as written by `sg train`)
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,

    /// Comma-separated guidance scales [default: 0,0.5,1,1.5,2,3]
    #[arg(long, value_name = "LIST")]
    scales: Option<String>,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| CliError::Usage(format!("bad {what} entry {p:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(a) => {
            if let Some(v) = a.dataset {
                cfg.data.dataset = v;
            }
            if let Some(v) = a.examples {
                cfg.data.train_examples = v;
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.t_max {
                cfg.schedule.t_max = v;
            }
            commands::cmd_train(&cfg, cli.seed, &cli.out)
        }
        Command::Sample(a) => {
            if let Some(v) = a.method {
                cfg.guidance.method = v;
            }
            if let Some(v) = a.scale {
                cfg.guidance.s = v;
            }
            if let Some(v) = a.steps {
                cfg.sample.steps = v;
            }
            if let Some(v) = a.chains {
                cfg.sample.chains = v;
            }
            if let Some(v) = a.class {
                cfg.guidance.class = Some(v);
            }
            if let Some(v) = &a.layers {
                cfg.guidance.layers = Some(parse_list(v, "layer")?);
            }
            commands::cmd_sample(&cfg, cli.seed, &cli.out, &a.checkpoint).map(|_| ())
        }
        Command::Eval(a) => {
            if let Some(v) = a.dataset {
                cfg.data.dataset = v;
            }
            if let Some(v) = a.radius {
                cfg.eval.coverage_radius = v;
            }
            commands::cmd_eval(&cfg, cli.seed, &cli.out, &a.samples, a.trace.as_deref())
                .map(|_| ())
        }
        Command::Plan(a) => {
            if let Some(v) = a.lambda {
                cfg.sinkhorn.lambda = Some(v);
            }
            if let Some(v) = a.eps_max {
                cfg.sinkhorn.eps_max = v;
            }
            if let Some(v) = a.max_iters {
                cfg.sinkhorn.max_iters = v;
            }
            let adversarial = matches!(a.mode, PlanMode::Adversarial);
            commands::cmd_plan(&cfg, cli.seed, &cli.out, &a.q, &a.k, adversarial).map(|_| ())
        }
        Command::Sweep(a) => {
            if let Some(v) = &a.scales {
                cfg.sweep.scales = parse_list(v, "scale")?;
            }
            commands::cmd_sweep(&cfg, cli.seed, &cli.out, &a.checkpoint)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successes; anything else is a usage error
            let ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
