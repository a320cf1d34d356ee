//! `gacg` command line.
//!
//! Failures print one line to stderr, `error kind=<kind> ...`, and exit with
//! 2 for configuration problems, 3 for non-finite losses and 1 otherwise.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gacg::config::RunConfig;
use gacg::harness::{self, Axis};
use gacg::Error;

#[derive(Parser)]
#[command(name = "gacg", version, about = "Group-aware coordination graph training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted override, e.g. `train.lambda=0.05`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory; defaults to `runs/<run_id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and print a JSON summary.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Uniformly random actions instead of the greedy policy.
        #[arg(long)]
        random_policy: bool,
    },
    /// Run every variant of one ablation axis over several seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Inclusive range `a..b` or a comma list.
        #[arg(long, default_value = "0..4")]
        seeds: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "ablations")]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Plot capture-rate curves from metrics CSVs.
    Plot {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> gacg::Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config {
            key: "<file>".into(),
            reason: format!("{}: {e}", p.display()),
        })?,
        None => "{}".into(),
    };
    RunConfig::from_json_with_overrides(&text, overrides)
}

fn parse_seeds(spec: &str) -> gacg::Result<Vec<u64>> {
    let bad = || Error::Config {
        key: "seeds".into(),
        reason: format!("cannot parse `{spec}`"),
    };
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("summary serializes")
}

fn run(cli: Cli) -> gacg::Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            out,
            resume,
        } => {
            let run = load_config(Some(&config), &overrides)?;
            let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&run.run_id));
            let summary = harness::run_training(&run, &dir, resume)?;
            println!("{}", to_json(&summary));
        }
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            random_policy,
        } => {
            let summary = harness::evaluate_checkpoint(&checkpoint, episodes, seed, random_policy)?;
            println!("{}", to_json(&summary));
        }
        Command::Ablate {
            axis,
            seeds,
            config,
            overrides,
            out,
            resume,
        } => {
            let axis: Axis = axis.parse()?;
            let seeds = parse_seeds(&seeds)?;
            let base = load_config(config.as_ref(), &overrides)?;
            let rows = harness::run_ablation_suite(&base, axis, &seeds, &out, resume)?;
            for r in rows {
                println!("{}", to_json(&r));
            }
        }
        Command::Plot { out, csv } => harness::emit_plots(&csv, &out)?,
    }
    Ok(())
}

fn one_line(text: &str) -> String {
    text.replace(['\n', '\r'], " ")
}

fn report(err: &Error) -> (u8, String) {
    match err {
        Error::Config { key, reason } => (
            2,
            format!("error kind=config key={key} reason={:?}", one_line(reason)),
        ),
        Error::Numerical { param, detail } => (
            3,
            format!("error kind=numerical param={param} detail={:?}", one_line(detail)),
        ),
        other => {
            let kind = match other {
                Error::Dimension { .. } => "dimension",
                Error::Parameter(_) => "parameter",
                Error::Contract(_) => "contract",
                Error::Integrity(_) => "integrity",
                Error::Refused(_) => "refused",
                Error::Schema(_) => "schema",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Csv(_) => "csv",
                Error::Config { .. } | Error::Numerical { .. } => unreachable!(),
            };
            (1, format!("error kind={kind} reason={:?}", one_line(&other.to_string())))
        }
    }
}

fn main() -> ExitCode {
    let level = std::env::var("GACG_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp_secs()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, line) = report(&e);
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
