use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crl_cli::{
    cmd_generate, cmd_probe_old, cmd_run, cmd_sweep, exit_code, ExperimentConfig, SweepAxis, SweepValue,
};
use crl_core::{Method, Result};

#[derive(Parser)]
#[command(name = "crl", version, about = "Continual representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds, comma separated; replaces the config's list.
    #[arg(long = "seeds", alias = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of learning steps.
    #[arg(long, value_parser = ["5", "10"])]
    steps: Option<String>,
    /// Worker threads (0: one per core).
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, Option<usize>)> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(w) = self.workers {
            c.workers = w;
        }
        let steps = self.steps.as_deref().map(|s| s.parse().expect("validated by clap"));
        Ok((c, steps))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured method for every seed and tabulate.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Sensitivity sweep over k, beta or lambda.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Values, comma separated; `all` is accepted for k.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Method for lambda sweeps.
        #[arg(long)]
        method: Option<String>,
    },
    /// Old-class accuracy after every step.
    ProbeOld {
        #[command(flatten)]
        common: Common,
    },
}

/// Exit code for a finished command: the first failed cell decides.
fn failure_code(failures: &[crl_cli::experiment::CellFailure]) -> u8 {
    for f in failures {
        eprintln!("cell {} seed {} failed: {}", f.label, f.seed, f.error);
    }
    failures.first().map_or(0, |f| exit_code(&f.error) as u8)
}

fn run(cli: Cli) -> Result<u8> {
    let code = match cli.command {
        Command::Generate { common } => {
            let (mut c, steps) = common.load()?;
            if let Some(&s) = common.seeds.first() {
                c.benchmark.seed = s;
            }
            let out = common.out.clone().unwrap_or_else(|| c.out.join("benchmark"));
            let (_, summary) = cmd_generate(&c, steps, &out)?;
            print!("{summary}");
            0
        }
        Command::Run { common } => {
            let (c, steps) = common.load()?;
            let r = cmd_run(c, steps)?;
            print!("{}", r.text);
            failure_code(&r.failures)
        }
        Command::Sweep {
            common,
            axis,
            values,
            method,
        } => {
            let (c, steps) = common.load()?;
            let axis: SweepAxis = axis.parse()?;
            let values = if values.is_empty() {
                None
            } else {
                Some(
                    values
                        .iter()
                        .map(|v| SweepValue::parse(axis, v))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            let method = method
                .map(|m| m.parse::<Method>())
                .transpose()?;
            let r = cmd_sweep(c, axis, values, method, steps)?;
            print!("{}", r.text);
            failure_code(&r.failures)
        }
        Command::ProbeOld { common } => {
            let (c, steps) = common.load()?;
            let r = cmd_probe_old(c, steps)?;
            print!("{}", r.text);
            failure_code(&r.failures)
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
