use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cycleflow::cli::{self, Context, RunConfig};

#[derive(Parser)]
#[command(
    name = "cycleflow",
    version,
    about = "Cycle-consistent Dual-CFM voice conversion on a synthetic world"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed.train`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; `CYCLEFLOW_OUT` takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and a dataset of utterances.
    GenData(Common),
    /// Base then cycle training; writes checkpoints and the training log.
    Train(Common),
    /// Convert one dataset utterance to a target speaker.
    Convert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset utterance index.
        #[arg(long)]
        utt: usize,
        /// Target speaker id.
        #[arg(long)]
        target: usize,
    },
    /// Evaluate a checkpoint on held-out cross-domain pairs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full model vs. no cycle losses vs. no pitch stage.
    Ablate(Common),
}

fn context(c: &Common) -> cycleflow::Result<Context> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seeds.train = seed;
    }
    Context::new(cfg, cli::resolve_out(c.out.clone()))
}

fn run(args: Args) -> cycleflow::Result<()> {
    match &args.command {
        Command::GenData(c) => cli::cmd_gen_data(&context(c)?),
        Command::Train(c) => cli::cmd_train(&context(c)?),
        Command::Convert {
            common,
            checkpoint,
            utt,
            target,
        } => cli::cmd_convert(&context(common)?, checkpoint.as_deref(), *utt, *target),
        Command::Eval { common, checkpoint } => cli::cmd_eval(&context(common)?, checkpoint.as_deref()),
        Command::Ablate(c) => cli::cmd_ablate(&context(c)?),
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", cli::error_line(&e));
            ExitCode::FAILURE
        }
    }
}
