//! `debias`: generate synthetic corpora, fit topics, sample, train,
//! evaluate and run the comparison table from the command line.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "debias", version, about = "Adversarial topic debiasing for sentiment classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; all other randomness is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Override a config value, e.g. `--set lr=0.2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic train/dev/test corpus, bias probes, mask list and ground truth.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Fit or apply the topic model.
    #[command(subcommand)]
    Topics(TopicsCommand),
    /// Balance labeled training data into D_s and sample D_t.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Topic-labeled training corpus.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a regular or debiased classifier, writing one checkpoint per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ds: Option<PathBuf>,
        #[arg(long)]
        dt: Option<PathBuf>,
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Score a training run's checkpoints on a test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Output directory of `train`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Bias-prone sentences; defaults to the flagged records of the test set.
        #[arg(long)]
        bias_set: Option<PathBuf>,
        /// Mask list; adds a masked row.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train and evaluate all eight regular/debiased × gru × mask variants.
    Table1 {
        #[command(flatten)]
        common: Common,
        /// Output directory of `generate`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of topic loss coefficients and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum TopicsCommand {
    /// Fit the topic model on a corpus.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Annotate a corpus with topic scores and has_topic labels.
    Label {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn path_flags(flags: &[(&str, &Option<PathBuf>)]) -> Vec<(String, String)> {
    flags
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|p| (k.to_string(), p.display().to_string())))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let (name, common, paths, run): (&str, Common, _, commands::Runner) = match cli.command {
        Command::Generate { common } => ("generate", common, vec![], commands::generate),
        Command::Topics(TopicsCommand::Fit { common, input }) => {
            ("topics fit", common, path_flags(&[("input", &input)]), commands::topics_fit)
        }
        Command::Topics(TopicsCommand::Label { common, model, input }) => (
            "topics label",
            common,
            path_flags(&[("model", &model), ("input", &input)]),
            commands::topics_label,
        ),
        Command::Sample { common, input } => ("sample", common, path_flags(&[("input", &input)]), commands::sample),
        Command::Train { common, ds, dt, dev } => (
            "train",
            common,
            path_flags(&[("ds", &ds), ("dt", &dt), ("dev", &dev)]),
            commands::train,
        ),
        Command::Evaluate {
            common,
            run,
            test,
            bias_set,
            mask,
        } => (
            "evaluate",
            common,
            path_flags(&[("run", &run), ("test", &test), ("bias_set", &bias_set), ("mask", &mask)]),
            commands::evaluate,
        ),
        Command::Table1 { common, data } => ("table1", common, path_flags(&[("data", &data)]), commands::table1),
        Command::Sweep { common, data } => ("sweep", common, path_flags(&[("data", &data)]), commands::sweep),
    };
    match commands::execute(name, argv, &common, paths, run) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
