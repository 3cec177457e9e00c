#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::Overrides;

/// Hypernetwork-based augmentation search and the PBT baseline.
#[derive(Parser)]
#[command(name = "hba", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Joint weight and policy search; writes schedule, metrics and checkpoint.
    Search {
        #[command(flatten)]
        run: Overrides,
        /// Resume from a checkpoint written by an earlier search.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Trains a plain network with a recorded schedule.
    Replay {
        #[command(flatten)]
        run: Overrides,
        #[arg(long)]
        schedule: PathBuf,
    },
    /// Population-based training baseline.
    Pbt {
        #[command(flatten)]
        run: Overrides,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Applies a policy to every PNG in a directory.
    AugmentPreview {
        /// Schedule file or JSON list of policy slots.
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Schedule entry to use when `--policy` is a schedule.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Writes a schedule as CSV.
    ExportCsv {
        #[arg(long)]
        schedule: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    /// Bad input (config, file format, missing file) is a usage error;
    /// anything else failed at run time.
    pub fn from_config(e: hba_core::Error) -> Self {
        use hba_core::Error as E;
        match e {
            E::Config(_) | E::Strategy(_) | E::Format { .. } | E::Json(_) | E::Io(_) => Self::usage(e.to_string()),
            e => Self::runtime(e.to_string()),
        }
    }
}

impl From<hba_core::Error> for CliError {
    fn from(e: hba_core::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Search { run, resume } => commands::search(&run, resume.as_deref()),
        Command::Replay { run, schedule } => commands::replay(&run, &schedule),
        Command::Pbt { run } => commands::pbt(&run),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::AugmentPreview {
            policy,
            images,
            out,
            seed,
            epoch,
        } => commands::augment_preview(&policy, &images, &out, seed, epoch),
        Command::ExportCsv { schedule, out } => commands::export_csv(&schedule, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
