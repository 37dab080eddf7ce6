use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{RunConfig, TPrimeSpec};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "zedit", version, about = "Zero-shot diffusion editing over analytic priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Invert the source signal and write its noise trajectory.
    Invert(Common),
    /// Run the configured edit and write the result.
    Edit(Common),
    /// Extract posterior PCs over a timestep range.
    Pcs(Common),
    /// Average eigenvalue profiles over bundles or a sampled dataset.
    LambdaAvg {
        #[command(flatten)]
        common: Common,
        /// PC bundle files to average instead of sampling a dataset.
        #[arg(long = "bundle")]
        bundles: Vec<PathBuf>,
    },
    /// Run the oracle identity suite on the configured prior.
    Verify(Common),
    /// Write the trade-off table for the configured methods and grid.
    Curve(Common),
    /// Print the predicted denoiser evaluation count of the plan.
    Nfe(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub zeus: ZeusFlags,
}

/// Overrides for the ZEUS settings of the config.
#[derive(Debug, Args, Default)]
pub struct ZeusFlags {
    #[arg(long)]
    pub n_pcs: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub probe_c: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<f64>,
    /// A timestep or `per-step`.
    #[arg(long)]
    pub t_prime: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    /// PC selector such as `1:1.0,2:-0.5` (indices start at 1).
    #[arg(long)]
    pub pc: Option<String>,
}

impl ZeusFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.n_pcs {
            cfg.zeus.n_pcs = v;
        }
        if let Some(v) = self.iters {
            cfg.zeus.iters = v;
        }
        if let Some(v) = self.probe_c {
            cfg.zeus.probe_c = v;
        }
        if let Some(v) = self.rho {
            cfg.zeus.rho = v;
        }
        if let Some(v) = &self.t_prime {
            cfg.plan.t_prime = Some(match v.parse() {
                Ok(t) => TPrimeSpec::Fixed(t),
                Err(_) => TPrimeSpec::Named(v.clone()),
            });
        }
        if let Some(v) = self.gamma {
            cfg.plan.gamma = v;
        }
        if let Some(v) = &self.pc {
            cfg.plan.pcs = Some(v.clone());
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    common.zeus.apply(&mut cfg);
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Invert(c) => commands::cmd_invert(&load(c)?),
        Command::Edit(c) => commands::cmd_edit(&load(c)?),
        Command::Pcs(c) => commands::cmd_pcs(&load(c)?),
        Command::LambdaAvg { common, bundles } => commands::cmd_lambda_avg(&load(common)?, bundles),
        Command::Verify(c) => commands::cmd_verify(&load(c)?),
        Command::Curve(c) => commands::cmd_curve(&load(c)?),
        Command::Nfe(c) => commands::cmd_nfe(&load(c)?),
    }
}
