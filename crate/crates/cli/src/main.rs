use clap::{Parser, Subcommand};
use maestro_cli::commands::{self, KvConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "maestro", about = "music-to-conducting-gesture pipeline", version)]
struct Cli {
    /// RNG seed for every stochastic step
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key-value config file overriding built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// generate a synthetic beat-locked dataset
    Synth {
        #[arg(long)]
        n: usize,
    },
    /// extract the audio descriptor from a WAV file
    Extract {
        #[arg(long)]
        wav: PathBuf,
    },
    /// run quality-control checks over a dataset
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// deterministic train/test split of a dataset
    Split {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        ratio: f64,
    },
    /// contrastive training of the dual-encoder retrieval model
    TrainRetrieval {
        #[arg(long)]
        dataset: PathBuf,
        /// optional id list restricting the training set
        #[arg(long)]
        ids: Option<PathBuf>,
        /// optional held-out id list for a top-1 accuracy readout
        #[arg(long)]
        eval_ids: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// train the gesture generator
    TrainGenerator {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// alignment loss weight; needs --retrieval when nonzero
        #[arg(long)]
        lambda: Option<f64>,
        /// retrieval checkpoint for the alignment term
        #[arg(long)]
        retrieval: Option<PathBuf>,
    },
    /// generate gestures for a music input
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        descriptor: Option<PathBuf>,
    },
    /// compute FID, M-Dist, MM-Dist, and Div over a test set
    Evaluate {
        #[arg(long)]
        generator: Option<PathBuf>,
        #[arg(long)]
        retrieval: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        /// score the ground-truth gestures against themselves
        #[arg(long, default_value_t = false)]
        ground_truth: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = KvConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth { n } => {
            commands::cmd_synth(n, cli.seed, &commands::default_out(cli.out)?, &cfg)
        }
        Command::Extract { wav } => {
            commands::cmd_extract(&wav, cli.seed, &commands::default_out(cli.out)?)
        }
        Command::Validate { dataset } => commands::cmd_validate(&dataset, &cfg),
        Command::Split { dataset, ratio } => {
            commands::cmd_split(&dataset, ratio, cli.seed, &commands::default_out(cli.out)?, &cfg)
        }
        Command::TrainRetrieval { dataset, ids, eval_ids, epochs } => commands::cmd_train_retrieval(
            &dataset,
            ids.as_deref(),
            eval_ids.as_deref(),
            epochs,
            cli.seed,
            &commands::default_out(cli.out)?,
            &cfg,
        ),
        Command::TrainGenerator {
            dataset,
            ids,
            epochs,
            lambda,
            retrieval,
        } => commands::cmd_train_generator(
            &dataset,
            ids.as_deref(),
            epochs,
            lambda,
            retrieval.as_deref(),
            cli.seed,
            &commands::default_out(cli.out)?,
            &cfg,
        ),
        Command::Generate {
            checkpoint,
            wav,
            descriptor,
        } => commands::cmd_generate(
            &checkpoint,
            wav.as_deref(),
            descriptor.as_deref(),
            cli.seed,
            &commands::default_out(cli.out)?,
        ),
        Command::Evaluate {
            generator,
            retrieval,
            dataset,
            ids,
            ground_truth,
        } => commands::cmd_evaluate(
            generator.as_deref(),
            &retrieval,
            &dataset,
            ids.as_deref(),
            ground_truth,
            cli.seed,
            &commands::default_out(cli.out)?,
        )
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
