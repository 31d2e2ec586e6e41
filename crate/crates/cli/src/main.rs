use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pamrc::config::{RunConfig, Scenario};
use pamrc::ipc::{self, IpcConfig};
use pamrc::scenario::{analyze_bundle, run_scenario, Report};
use pamrc::{Error, Result};

/// Simulated McKibben muscle reservoir computing workbench.
#[derive(Parser)]
#[command(name = "pamrc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named scenario and write its bundle.
    Run {
        scenario: String,
        /// JSON config merged over the scenario defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Master seed; overrides the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// `dotted.key=value` override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Information processing capacity of external states.
    Ipc {
        #[arg(long)]
        states: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        max_delay: usize,
        #[arg(long, default_value_t = 4)]
        max_degree: usize,
        #[arg(long, default_value_t = 100)]
        surrogates: usize,
        #[arg(long, default_value_t = 0)]
        washout: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Write ipc.csv and ipc.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Post-process a run bundle.
    Analyze {
        #[arg(long)]
        bundle: PathBuf,
        /// spectra | bifurcation | attractor
        #[arg(long)]
        report: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, config, out, seed, set } => {
            let scenario: Scenario = scenario.parse()?;
            let mut overrides = set;
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = match config {
                Some(path) => RunConfig::from_file(scenario, &path, &overrides)?,
                None => RunConfig::resolve(scenario, None, &overrides)?,
            };
            let summary = run_scenario(&cfg, &out)?;
            println!("{}: {}", summary.scenario, summary.headline);
            println!("bundle {} (config {})", out.display(), &summary.config_hash[..12]);
        }
        Command::Ipc { states, input, max_delay, max_degree, surrogates, washout, seed, out } => {
            let (x, u) = ipc::load_external(&states, &input)?;
            let cfg = IpcConfig {
                max_delay,
                max_degree,
                surrogates,
                washout,
                samples: u.len(),
                seed,
                ..IpcConfig::default()
            };
            let spec = ipc::total_ipc(&x, &u, &cfg)?;
            println!("total {:.4} (rank {}, {} samples)", spec.total, spec.rank, spec.n_samples);
            for (d, c) in &spec.by_degree {
                println!("degree {d}: {c:.4}");
            }
            for e in spec.major(10) {
                println!("  {:<40} {:.4}", e.term.to_string(), e.thresholded);
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                spec.export(&dir, "ipc")?;
            }
        }
        Command::Analyze { bundle, report } => {
            let report: Report = report.parse()?;
            for p in analyze_bundle(&bundle, report)? {
                println!("{}", display(&p));
            }
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit(&e)
        }
    }
}

fn exit(e: &Error) -> ExitCode {
    ExitCode::from(e.exit_code() as u8)
}
