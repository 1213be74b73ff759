use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use alstop::alloop::CriterionKind;
use alstop::dataset::{generate_artificial, generate_sign_wave};
use alstop::harness::{
    calibrate_criterion, experiment_eta, run_experiment, summary_csv, write_outputs,
    ExperimentConfig, ThresholdRange,
};
use alstop::runstest::{binarize_by_median, runs_test, Sidedness, TestMode};
use alstop::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "alstop",
    version,
    about = "Stopping criteria for active GP regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a replicated experiment and write report.json, summary.csv and traces.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Print the calibrated optimal-risk level for a config.
    CalibrateEta {
        #[arg(long)]
        config: PathBuf,
    },
    /// Calibrate one criterion's threshold on the reference data.
    CalibrateThreshold {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        criterion: CriterionKind,
        #[arg(long, requires = "max")]
        min: Option<f64>,
        #[arg(long, requires = "min")]
        max: Option<f64>,
        #[arg(long, default_value_t = 200)]
        grid_count: usize,
    },
    /// Runs test on newline-separated reals (median-binarized) from a file or stdin.
    Runstest {
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
        mode: ModeArg,
        #[arg(long)]
        lower: bool,
    },
    /// Write a generated dataset as CSV.
    Generate {
        #[arg(long, value_enum)]
        name: Generator,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100.0)]
        noise_precision: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Artificial,
    Signwave,
}

fn read_reals(input: Option<&PathBuf>) -> Result<Vec<f64>> {
    let text = match input {
        Some(p) => std::fs::read_to_string(p).map_err(|source| Error::Io {
            path: p.clone(),
            source,
        })?,
        None => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|source| Error::Io {
                    path: "<stdin>".into(),
                    source,
                })?;
            s
        }
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                row: i + 1,
                column: 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let report = run_experiment(&cfg)?;
            write_outputs(&report, &out)?;
            for f in &report.failures {
                eprintln!("replication {} failed: {}", f.replication, f.error);
            }
            print!("{}", summary_csv(&report));
        }
        Command::CalibrateEta { config } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let (eta, cal) = experiment_eta(&cfg)?;
            print_json(&serde_json::json!({ "eta": eta, "calibration": cal }));
        }
        Command::CalibrateThreshold {
            config,
            criterion,
            min,
            max,
            grid_count,
        } => {
            let cfg = ExperimentConfig::from_json_file(&config)?;
            let range = min.zip(max).map(|(min, max)| ThresholdRange {
                min,
                max,
                grid_count,
            });
            print_json(&calibrate_criterion(&cfg, criterion, range)?);
        }
        Command::Runstest {
            input,
            alpha,
            mode,
            lower,
        } => {
            let values = read_reals(input.as_ref())?;
            let seq = binarize_by_median(&values)?;
            let mode = match mode {
                ModeArg::Exact => TestMode::Exact,
                ModeArg::Normal => TestMode::Normal,
                ModeArg::Auto if seq.len() <= 30 => TestMode::Exact,
                ModeArg::Auto => TestMode::Normal,
            };
            let sided = if lower {
                Sidedness::Lower
            } else {
                Sidedness::Two
            };
            print_json(&runs_test(&seq, alpha, mode, sided)?);
        }
        Command::Generate {
            name,
            n,
            seed,
            noise_precision,
            out,
        } => {
            let ds = match name {
                Generator::Artificial => {
                    generate_artificial(n, noise_precision, (-5.0, 15.0), seed)?
                }
                Generator::Signwave => generate_sign_wave(n, seed)?,
            };
            ds.write_csv(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
