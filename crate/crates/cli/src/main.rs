//! Operator surface for the distillation pipeline: dataset preparation,
//! training runs, mask-rate sweeps, checkpoint evaluation, and report
//! rendering. Exit codes: 0 success, 2 config error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{cmd_eval, cmd_gen_synth, cmd_prepare, cmd_report, cmd_run, cmd_sweep_mask};
use commands::{config_err, CmdResult};
use config::RunConfig;
use pmd_core::kg::Split;

#[derive(Parser)]
#[command(
    name = "pmd",
    version,
    about = "Progressive masked-feature distillation for knowledge graph completion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set train.epochs=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override out.dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CmdResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config, &self.set).map_err(config_err)?;
        if let Some(seed) = self.seed {
            cfg.run_seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = Some(dir.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load and validate the dataset, add inverse triples, build the
    /// vocabulary and known-tail index, and write the prepared artifacts.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Overwrite existing prepared artifacts.
        #[arg(long)]
        force: bool,
    },
    /// Train the baseline and execute the distillation schedule.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Re-distill a trained baseline at several mask rates and tabulate
    /// test metrics per rate.
    SweepMask {
        #[command(flatten)]
        common: Common,
        /// Baseline checkpoint to start from (or set run.baseline_ckpt).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Comma-separated mask rates (default 0,0.1,0.2,0.3,0.4,0.5).
        #[arg(long)]
        rates: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on the valid or test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which split to rank: valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics JSON output path (default <out.dir>/eval-<split>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a grade-vs-metric comparison table from metrics JSON files.
    Report {
        /// Metrics JSON files.
        inputs: Vec<PathBuf>,
        /// Directory to scan for metrics-*.json.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Generate the bundled synthetic compositional dataset.
    GenSynth {
        /// Output directory for train/valid/test TSVs and descriptions.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        specimens: usize,
        /// Attribute values per family (2..=8).
        #[arg(long, default_value_t = 6)]
        values: usize,
        #[arg(long, default_value_t = 5)]
        train_facts: usize,
        #[arg(long, default_value_t = 1)]
        valid_facts: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_rates(raw: Option<&str>) -> CmdResult<Vec<f64>> {
    match raw {
        None => Ok(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
        Some(text) => text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| config_err(anyhow::anyhow!("bad rate `{s}`: {e}")))
            })
            .collect(),
    }
}

fn parse_split(raw: &str) -> CmdResult<Split> {
    match raw {
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(config_err(anyhow::anyhow!(
            "split must be valid or test, got `{other}`"
        ))),
    }
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Prepare { common, force } => cmd_prepare(&common.load()?, force),
        Command::Run { common, force } => cmd_run(&common.load()?, force),
        Command::SweepMask {
            common,
            baseline,
            rates,
            force,
        } => {
            let cfg = common.load()?;
            let rates = parse_rates(rates.as_deref())?;
            cmd_sweep_mask(&cfg, &rates, baseline.as_deref(), force)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
        } => {
            let cfg = common.load()?;
            let split = parse_split(&split)?;
            cmd_eval(&cfg, &checkpoint, split, out.as_deref())
        }
        Command::Report { inputs, run_dir } => cmd_report(&inputs, run_dir.as_deref()),
        Command::GenSynth {
            out,
            specimens,
            values,
            train_facts,
            valid_facts,
            seed,
        } => cmd_gen_synth(&out, specimens, values, train_facts, valid_facts, seed),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {:#}", e.error);
        std::process::exit(e.class as i32);
    }
}
