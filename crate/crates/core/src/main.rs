use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use exacfs::diagnostics::{self, TOLERANCE};
use exacfs::harness::ablation::{run_ablation, Study};
use exacfs::harness::report::{build_report, load_inputs, render_csv, render_table, ReportInput};
use exacfs::harness::{run_experiment, RunConfig, RunOptions};
use exacfs::Error;

#[derive(Parser)]
#[command(
    name = "exacfs",
    version,
    about = "Class-incremental learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Record per-task wall time instead of 0.
        #[arg(long)]
        wall_time: bool,
    },
    /// Run an ablation study: significance, stages, sampling or budget.
    Ablate {
        #[arg(long)]
        study: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Arms run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every operator and the training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Compare metrics files. Inputs are `PATH` or `LABEL=PATH`.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

fn fail(code: u8, err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn config_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXACFS_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            wall_time,
        } => {
            let cfg = match load_config(&config, seed) {
                Ok(c) => c,
                Err(e) => return fail(2, &e),
            };
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                wall_time,
            };
            match run_experiment(&cfg, &opts) {
                Ok(res) => {
                    println!(
                        "avg_incremental_accuracy {}",
                        res.log.average_field().unwrap_or_default()
                    );
                    println!("wrote {}", out.join("metrics.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(config_code(&e), &e),
            }
        }
        Command::Ablate {
            study,
            config,
            out,
            seed,
            jobs,
        } => {
            let study: Study = match study.parse() {
                Ok(s) => s,
                Err(e) => return fail(2, &e),
            };
            let cfg = match load_config(&config, seed) {
                Ok(c) => c,
                Err(e) => return fail(2, &e),
            };
            match run_ablation(study, &cfg, &out, jobs) {
                Ok(results) => {
                    for r in &results {
                        println!(
                            "{:<24} {}",
                            r.name,
                            r.log.average_field().unwrap_or_default()
                        );
                    }
                    println!("wrote {}", out.join("comparison.csv").display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(config_code(&e), &e),
            }
        }
        Command::Gradcheck { seed, inject_fault } => {
            let results = match diagnostics::run_suite(seed, inject_fault) {
                Ok(r) => r,
                Err(e) => return fail(1, &e),
            };
            for r in &results {
                println!(
                    "{} {:<28} max_rel_err {:.3e}  trials {}  rejected {}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.trials,
                    r.rejected
                );
            }
            let failing: Vec<&str> = results
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.name)
                .collect();
            if failing.is_empty() {
                println!("all {} checks below {TOLERANCE:e}", results.len());
                ExitCode::SUCCESS
            } else {
                eprintln!("failing checks: {}", failing.join(", "));
                ExitCode::from(1)
            }
        }
        Command::Report { input, format } => {
            let inputs: Vec<ReportInput> = input.iter().map(|a| ReportInput::parse(a)).collect();
            let rows = match load_inputs(&inputs).and_then(|parsed| build_report(&parsed)) {
                Ok(r) => r,
                Err(e) => return fail(2, &e),
            };
            match format {
                Format::Table => print!("{}", render_table(&rows)),
                Format::Csv => print!("{}", render_csv(&rows)),
            }
            ExitCode::SUCCESS
        }
    }
}
