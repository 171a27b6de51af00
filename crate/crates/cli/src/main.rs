//! `flucli`: decompose ILI series, select queries, train, forecast, evaluate
//! and correlate, driven by a `key = value` config file.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use flucast::datahub::IsoWeek;

use commands::{EvalFlags, SelectMethod, TrainFlags, TrainMode};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "flucli",
    version,
    about = "Influenza forecasting from ILI rates and search-query trends"
)]
struct Cli {
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write `decomp_<country>.csv` for every country.
    Decompose {
        #[arg(long, value_delimiter = ',')]
        countries: Vec<String>,
    },
    /// Write `<out>/<country>/selected_queries.csv`.
    SelectQueries {
        #[arg(long, value_enum, default_value = "wt")]
        method: SelectMethod,
        #[arg(long, value_delimiter = ',')]
        countries: Vec<String>,
        /// Term whose training weeks score the candidates.
        #[arg(long)]
        term: Option<String>,
    },
    /// Grid-search and train; writes checkpoint, trainlog and grid CSVs.
    Train {
        #[arg(long, value_enum, default_value = "single")]
        mode: TrainMode,
        #[arg(long, value_delimiter = ',')]
        countries: Vec<String>,
        #[arg(long)]
        term: Option<String>,
        #[arg(long)]
        no_country_embedding: bool,
        #[arg(long)]
        no_queries: bool,
    },
    /// Forecast the weeks after `--origin` (default: last week of data).
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        countries: Vec<String>,
        #[arg(long)]
        origin: Option<IsoWeek>,
    },
    /// Score a checkpoint on a term's test weeks.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        countries: Vec<String>,
        #[arg(long)]
        term: Option<String>,
        /// Also score SeasonalNaive, AR and GRU.
        #[arg(long)]
        with_baselines: bool,
        /// Model name in the report (default derived from the checkpoint).
        #[arg(long)]
        name: Option<String>,
    },
    /// Pairwise correlation of countries' ILI series.
    Correlate {
        #[arg(long, value_delimiter = ',')]
        countries: Vec<String>,
        /// e.g. `AU:22`; defaults to `correlate.shifts`.
        #[arg(long)]
        shifts: Option<String>,
    },
}

fn some(c: &[String]) -> Option<&[String]> {
    (!c.is_empty()).then_some(c)
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .context("--config <path> is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match &cli.command {
        Command::Decompose { countries } => {
            for p in commands::decompose(&cfg, out, &cfg.countries(some(countries))?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::SelectQueries {
            method,
            countries,
            term,
        } => {
            let countries = cfg.countries(some(countries))?;
            for p in commands::select_queries(&cfg, out, &countries, *method, term.as_deref())? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            mode,
            countries,
            term,
            no_country_embedding,
            no_queries,
        } => {
            let flags = TrainFlags {
                mode: *mode,
                no_country_embedding: *no_country_embedding,
                no_queries: *no_queries,
            };
            commands::train(
                &cfg,
                out,
                &cfg.countries(some(countries))?,
                term.as_deref(),
                &flags,
            )?;
        }
        Command::Forecast {
            checkpoint,
            countries,
            origin,
        } => {
            let p = commands::forecast_cmd(&cfg, out, checkpoint, some(countries), *origin)?;
            println!("wrote {}", p.display());
        }
        Command::Evaluate {
            checkpoint,
            countries,
            term,
            with_baselines,
            name,
        } => {
            let flags = EvalFlags {
                with_baselines: *with_baselines,
                name: name.as_deref(),
            };
            commands::evaluate_cmd(
                &cfg,
                out,
                checkpoint,
                some(countries),
                term.as_deref(),
                &flags,
            )?;
        }
        Command::Correlate { countries, shifts } => {
            commands::correlate(
                &cfg,
                out,
                &cfg.countries(some(countries))?,
                shifts.as_deref(),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
