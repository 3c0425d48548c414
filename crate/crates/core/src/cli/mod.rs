//! Command-line front end: `train`, `sample`, `check` and `gen-data`.

mod checks;
mod commands;
mod config;

pub use checks::{format_report, run_checks, CheckOptions, CheckOutcome, CHECKS};
pub use commands::{cmd_check, cmd_gen_data, cmd_sample, cmd_train, sample_file_name};
pub use config::{DataConfig, OutputConfig, RunConfig, ScheduleConfig};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pixflow", version, about = "Cascaded pixel-space flow matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-test suite and report each check.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write the configured shapes dataset to a file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, i32> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_USAGE
    })
}

fn runtime<T>(r: crate::Result<T>) -> Result<T, i32> {
    r.map_err(|e| {
        eprintln!("error: {e}");
        match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    })
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) | Err(code) => code,
    }
}

fn execute(cmd: Command) -> Result<i32, i32> {
    match cmd {
        Command::Train { config } => {
            let cfg = load(&config)?;
            let last = runtime(cmd_train(&cfg))?;
            println!("{}", last.display());
        }
        Command::Sample {
            config,
            ckpt,
            class,
            count,
            out,
        } => {
            let cfg = load(&config)?;
            for p in runtime(cmd_sample(&cfg, &ckpt, class, count, &out))? {
                println!("{}", p.display());
            }
        }
        Command::Check { config } => {
            let cfg = load(&config)?;
            let (report, failed) = cmd_check(&cfg, &CheckOptions::default());
            print!("{report}");
            if failed > 0 {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Command::GenData { config, out } => {
            let cfg = load(&config)?;
            runtime(cmd_gen_data(&cfg, &out))?;
            println!("{}", out.display());
        }
    }
    Ok(EXIT_OK)
}
