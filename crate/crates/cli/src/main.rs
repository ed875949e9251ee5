//! `asd`: train, evaluate and inspect anomalous sound detection models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "asd", version, about = "Attention-based unsupervised anomalous sound detection")]
struct Cli {
    /// Log verbosity (error, warn, info, debug, trace); RUST_LOG overrides.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the normal clips of a dataset tree.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Last-epoch checkpoint; the best epoch goes next to it as `<stem>.best.<ext>`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test clips of a dataset tree and report AUC/pAUC.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Upper false-positive rate of the partial AUC.
        #[arg(long, default_value_t = asd_core::evaluation::DEFAULT_MAX_FPR)]
        max_fpr: f64,
    },
    /// Print the anomaly score of one clip.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Machine label as `type:id`.
        #[arg(long)]
        label: String,
    },
    /// Write the feature stack of one clip as an ASDF container.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the checkpoint's front end (log-mel plus learned Wavegram).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Feature settings for the untrained log-mel path.
        #[arg(long, conflicts_with = "ckpt")]
        config: Option<PathBuf>,
    },
    /// Mean/std attention maps over a dataset's clips.
    AttentionStats {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trainable parameter counts per module.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
