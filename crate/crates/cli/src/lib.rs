//! Experiment front-end for negdiff: parses a JSON config plus flag
//! overrides, runs one subcommand on a worker pool, and writes CSV/JSON
//! artifacts that are byte-identical across reruns of the same config.

pub mod commands;
pub mod config;
mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use negdiff_core::{SamplerKind, Strategy};

pub use commands::Summary;
pub use config::{ExperimentConfig, Overrides, Resolved};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "negdiff", version, about = "Guided diffusion experiments on exact concept worlds", allow_negative_numbers = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Draw samples with one strategy; writes samples.csv (and traces.jsonl).
    Sample,
    /// Paired-seed comparison of several strategies; writes compare.csv/json.
    Compare,
    /// Sweep the adaptive sampler's budget K; writes sweep_k.csv.
    SweepK,
    /// Negative-label drift along CFG chains; writes drift.csv/json.
    Hypothesis,
    /// Train a noise predictor on the world; writes model.json.
    Train,
    /// Compare closed-form and counted denoiser calls per strategy.
    CountCalls,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON experiment config.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Concept world file.
    #[arg(long, global = true, value_name = "PATH")]
    pub world: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (0: one per core).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_name = "NAME")]
    pub strategy: Option<Strategy>,
    /// Guidance scale.
    #[arg(long, global = true, value_name = "REAL")]
    pub s: Option<f64>,
    /// Negative guidance scale.
    #[arg(long, global = true, value_name = "REAL")]
    pub sn: Option<f64>,
    /// DNS budget of the adaptive sampler.
    #[arg(long, global = true, value_name = "INT")]
    pub k: Option<usize>,
    /// Diffusion steps.
    #[arg(long, global = true, value_name = "INT")]
    pub t: Option<usize>,
    #[arg(long, global = true, value_name = "ddpm|ddim")]
    pub sampler: Option<SamplerKind>,
    /// Disable noise normalization in the adaptive sampler.
    #[arg(long, global = true)]
    pub no_normalize: bool,
    /// Fraction of T below which the adaptive sampler runs plain CFG.
    #[arg(long, global = true, value_name = "FRACTION")]
    pub window: Option<f64>,
    /// Number of seeds (samples).
    #[arg(long, global = true, value_name = "N")]
    pub n_seeds: Option<usize>,
    /// Trained model file to use instead of the exact denoiser.
    #[arg(long, global = true, value_name = "PATH")]
    pub model: Option<PathBuf>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            world: self.world.clone(),
            out: self.out.clone(),
            seed: self.seed,
            workers: self.workers,
            strategy: self.strategy,
            s: self.s,
            s_n: self.sn,
            k: self.k,
            steps: self.t,
            sampler: self.sampler,
            no_normalize: self.no_normalize,
            window: self.window,
            n_seeds: self.n_seeds,
            model: self.model.clone(),
        }
    }

    /// Loads the config file (if any) and applies the flags on top.
    pub fn resolve(&self) -> CliResult<Resolved> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        config.apply(&self.overrides());
        Resolved::new(config)
    }
}

/// Runs a parsed invocation on a pool of the configured size.
pub fn execute(command: Command, flags: &Flags) -> CliResult<Summary> {
    let resolved = flags.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(resolved.config.workers)
        .build()
        .map_err(|e| CliError::Config(format!("workers: {e}")))?;
    pool.install(|| match command {
        Command::Sample => commands::sample(&resolved),
        Command::Compare => commands::compare(&resolved),
        Command::SweepK => commands::sweep(&resolved),
        Command::Hypothesis => commands::hypothesis(&resolved),
        Command::Train => commands::train(&resolved),
        Command::CountCalls => commands::count_calls(&resolved),
    })
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, &cli.flags) {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            for file in &summary.files {
                println!("wrote {}", file.display());
            }
            0
        }
        Err(e) => {
            eprintln!("negdiff: {e}");
            e.exit_code()
        }
    }
}
