//! Command-line front end: `prior`, `gen`, `edit`, `selftest` and `synth-adapter`.
//!
//! Exit codes are 0 on success, 1 when an invariant check fails and 2 for
//! configuration or file errors. Set `LORASHOP_LOG` (for example `info`) to
//! control log output on stderr.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{Command, Invocation, SynthArgs};
use config::Overrides;
use lorashop::selftest::Mutation;

#[derive(Debug, Parser)]
#[command(name = "lorashop", version, about = "Multi-subject LoRA composition on a toy rectified-flow transformer")]
pub struct Cli {
    /// Add per-stage wall-clock timings to the report (makes it non-reproducible).
    #[arg(long, global = true)]
    pub timings: bool,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of flow steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Flow time at which blending starts.
    #[arg(long)]
    pub t: Option<f64>,
    /// Flow time at which attention is captured for the priors.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Binarisation quantile.
    #[arg(long)]
    pub tau: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            steps: self.steps,
            out: self.out.clone(),
            t: self.t,
            gamma: self.gamma,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Extract one binary prior per subject.
    Prior(RunArgs),
    /// Generate from seeded noise with the adapters blended into their priors.
    Gen(RunArgs),
    /// Invert an input latent and regenerate it with the adapters blended in.
    Edit {
        #[command(flatten)]
        run: RunArgs,
        /// Input latent (matrix dump).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Run the oracle suites and print a summary table.
    Selftest {
        /// Output directory for the report.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        mutate: Option<Mutation>,
    },
    /// Write a seeded random adapter for the configured model.
    SynthAdapter {
        /// Model configuration; defaults to the built-in toy model.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Output directory; the adapter is written as NAME.lora.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 0.5)]
        gain: f64,
        /// Write an all-zero adapter.
        #[arg(long)]
        zero: bool,
    },
}

impl Cli {
    pub fn invocation(self) -> Invocation {
        let (command, config, overrides) = match self.command {
            Cmd::Prior(a) => (Command::Prior, Some(a.config.clone()), a.overrides()),
            Cmd::Gen(a) => (Command::Gen, Some(a.config.clone()), a.overrides()),
            Cmd::Edit { run, input } => (Command::Edit { input }, Some(run.config.clone()), run.overrides()),
            Cmd::Selftest { out, mutate } => (
                Command::Selftest { mutate },
                None,
                Overrides {
                    out,
                    ..Overrides::default()
                },
            ),
            Cmd::SynthAdapter {
                config,
                out,
                name,
                seed,
                rank,
                gain,
                zero,
            } => (
                Command::SynthAdapter(SynthArgs {
                    name,
                    seed,
                    rank,
                    gain,
                    zero,
                }),
                config,
                Overrides {
                    out,
                    ..Overrides::default()
                },
            ),
        };
        Invocation {
            command,
            config,
            overrides,
            timings: self.timings,
        }
    }
}
