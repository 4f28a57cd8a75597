//! Command-line driver: argument parsing, config resolution and dispatch.
//!
//! Errors end the process with one line on stderr,
//! `error category=<config|data|numerical|io> exit=<code> message=<text>`,
//! and the matching exit status (2, 3, 4, 5).

mod commands;
mod context;
mod scaling;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sign_core::error::Category;
use sign_core::trainer::{parse_override, RunConfig};
use sign_core::{Error, Result};

pub use commands::{default_mask, edit_experiment, edit_schedule, evaluate, run, EditReport};
pub use context::{load_dataset, load_model, make_teacher, reference_draw, RunDir, Summary};
pub use scaling::{scaling_study, ScalingReport};

#[derive(Parser, Debug)]
#[command(name = "sign", version, about = "Score-based idempotent generative networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Seed; wins over the config file, `--set seed=` and `SIGN_SEED`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Draw the configured dataset and write it as CSV.
    GenData,
    /// Train a denoising score network on the dataset.
    PretrainScore,
    /// Solve the teacher PF-ODE from noise and store (z, y) pairs.
    PregenPairs,
    /// Train a generator (SIGN or the IGN baseline).
    Train,
    /// Generate samples from a trained generator.
    Sample,
    /// Masked multistep editing.
    Edit,
    /// Compute the evaluation report for a generator.
    Eval,
    /// Dump teacher PF-ODE trajectories.
    Trace,
    /// Train one generator per grid size and tabulate trajectory errors.
    ScalingStudy,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainScore => "pretrain-score",
            Command::PregenPairs => "pregen-pairs",
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Edit => "edit",
            Command::Eval => "eval",
            Command::Trace => "trace",
            Command::ScalingStudy => "scaling-study",
        }
    }
}

/// Builds the run configuration. Seed precedence, lowest first: config file,
/// `--set seed=…`, `SIGN_SEED`, `--seed`.
pub fn resolve_config(
    config: Option<&Path>,
    sets: &[String],
    env_seed: Option<&str>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut overrides = sets.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(s) = env_seed {
        overrides.push(("seed".into(), s.trim().to_string()));
    }
    if let Some(s) = seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    let cfg = match config {
        Some(p) => RunConfig::load(p, &overrides)?,
        None => RunConfig::from_pairs(overrides)?,
    };
    cfg.check_paths()?;
    Ok(cfg)
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        Category::Config => 2,
        Category::Data | Category::Contract => 3,
        Category::Numerical => 4,
        Category::Io => 5,
    }
}

/// The single stderr line printed for `e`.
pub fn error_line(e: &Error) -> String {
    let category = match e.category() {
        Category::Contract => Category::Data,
        c => c,
    };
    let msg: String = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error category={category} exit={} message={msg}", exit_code(e))
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim().to_string();
            let first = first.strip_prefix("error: ").unwrap_or(&first).to_string();
            eprintln!("{}", error_line(&Error::Config(first)));
            return 2;
        }
    };
    let env_seed = std::env::var("SIGN_SEED").ok();
    let result = resolve_config(cli.config.as_deref(), &cli.set, env_seed.as_deref(), cli.seed)
        .and_then(|cfg| run(cli.command, &cfg, &cli.out));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        let sets = vec!["seed=3".to_string()];
        assert_eq!(resolve_config(None, &sets, None, None).unwrap().seed, 3);
        assert_eq!(resolve_config(None, &sets, Some("4"), None).unwrap().seed, 4);
        assert_eq!(resolve_config(None, &sets, Some("4"), Some(5)).unwrap().seed, 5);
    }

    #[test]
    fn error_lines_are_single_line() {
        let e = Error::Config("unknown config key `a.b`\nsecond".into());
        let line = error_line(&e);
        assert!(!line.contains('\n'));
        assert!(line.starts_with("error category=config exit=2 message="));
        assert_eq!(exit_code(&Error::Format { offset: 0, msg: "x".into() }), 3);
        assert_eq!(exit_code(&Error::Divergence { step: 1, detail: "x".into() }), 4);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 5);
    }
}
