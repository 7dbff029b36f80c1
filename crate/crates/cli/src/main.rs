mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use asd_core::segmentation::FrontEnd;
use clap::{Args, Parser, Subcommand, ValueEnum};

use run::CliError;

/// Active speaker detection on pre-extracted face and voice embeddings.
#[derive(Debug, Parser)]
#[command(name = "asd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus with known ground truth.
    Generate {
        /// SynthConfig JSON; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment every clip into hypothesis utterances and report recall.
    Segment {
        #[command(flatten)]
        io: CorpusIo,
        /// SegConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = FrontEndArg::Full)]
        front_end: FrontEndArg,
    },
    /// Self-lifting finetuning of the face and voice projections.
    Finetune {
        #[command(flatten)]
        io: CorpusIo,
        /// FinetuneConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the scoring head; writes a checkpoint and a loss curve.
    Train {
        #[command(flatten)]
        io: CorpusIo,
        /// TrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score hypothesis utterances against the visible identities of their clip.
    Score {
        #[command(flatten)]
        io: CorpusIo,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Hypothesis utterances written by `segment`.
        #[arg(long)]
        utterances: PathBuf,
    },
    /// Frame-level mAP and utterance recall.
    Eval {
        #[command(flatten)]
        io: CorpusIo,
        /// EvalOptions JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frame detections JSON, scored as given.
        #[arg(long, conflicts_with_all = ["utterances", "scores"])]
        detections: Option<PathBuf>,
        /// Hypothesis utterances written by `segment`.
        #[arg(long, requires = "scores")]
        utterances: Option<PathBuf>,
        /// Score results written by `score`.
        #[arg(long, requires = "utterances")]
        scores: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CorpusIo {
    /// Corpus manifest JSON.
    #[arg(long)]
    corpus: PathBuf,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FrontEndArg {
    Groundtruth,
    Full,
    VadOnly,
}

impl From<FrontEndArg> for FrontEnd {
    fn from(f: FrontEndArg) -> Self {
        match f {
            FrontEndArg::Groundtruth => FrontEnd::Groundtruth,
            FrontEndArg::Full => FrontEnd::Full,
            FrontEndArg::VadOnly => FrontEnd::VadOnly,
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { config, out, seed } => commands::generate(config.as_deref(), &out, seed),
        Command::Segment { io, config, front_end } => {
            commands::segment(&io.corpus, config.as_deref(), front_end.into(), &io.out)
        }
        Command::Finetune { io, config, seed } => commands::finetune(&io.corpus, config.as_deref(), seed, &io.out),
        Command::Train { io, config, seed } => commands::train(&io.corpus, config.as_deref(), seed, &io.out),
        Command::Score {
            io,
            checkpoint,
            utterances,
        } => commands::score(&io.corpus, &checkpoint, &utterances, &io.out),
        Command::Eval {
            io,
            config,
            detections,
            utterances,
            scores,
        } => {
            let input = match (detections, utterances, scores) {
                (Some(d), _, _) => commands::EvalInput::Detections(d),
                (None, Some(u), Some(s)) => commands::EvalInput::Scored { utterances: u, scores: s },
                _ => return Err(CliError::Usage("eval needs --detections or --utterances with --scores".into())),
            };
            commands::eval(&io.corpus, config.as_deref(), input, &io.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { run::EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("asd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
