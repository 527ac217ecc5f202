use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use timewarp::engine::ExecMode;
use timewarp::harness::config::RunConfig;
use timewarp::harness::metrics::{compare_runs, RunReport};
use timewarp::harness::orchestrate::{self, Binaries, RunError};
use timewarp::harness::signals;

#[derive(Parser)]
#[command(name = "bench", about = "Timewarp benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload against the engine and write a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "timewarp")]
        mode: ExecMode,
        #[arg(long)]
        out: PathBuf,
        /// Run server, engine and dispatcher as threads of this process.
        #[arg(long)]
        in_process: bool,
    },
    /// Relative errors of report `a` against reference `b`.
    Compare { a: PathBuf, b: PathBuf },
    /// Run the discrete-event reference and print its report.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    Engine {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: ExecMode,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(hide = true)]
    Dispatch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: ExecMode,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        engine: String,
    },
}

fn load_report(path: &Path) -> Result<RunReport, RunError> {
    let path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&path).map_err(|e| RunError::Process(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Process(format!("{}: {e}", path.display())))
}

fn print_summary(r: &RunReport) {
    let ms = |ns: f64| ns / 1e6;
    eprintln!(
        "{}: {} requests  TTFT p50 {:.2}ms p99 {:.2}ms  TPOT p50 {:.2}ms p99 {:.2}ms  virtual {:.2}s wall {:.2}s speedup {:.2}x",
        r.identity.mode,
        r.num_requests,
        ms(r.ttft.p50),
        ms(r.ttft.p99),
        ms(r.tpot.p50),
        ms(r.tpot.p99),
        r.virtual_elapsed_ns as f64 / 1e9,
        r.wall_elapsed_ns as f64 / 1e9,
        r.speedup
    );
}

fn run(cmd: Cmd) -> Result<(), RunError> {
    let abort = signals::install();
    match cmd {
        Cmd::Run {
            config,
            mode,
            out,
            in_process,
        } => {
            let cfg = RunConfig::load(&config)?;
            let report = if in_process {
                let artifacts = orchestrate::run_in_process(&cfg, mode, abort)?;
                artifacts.write(&out)?;
                artifacts.report
            } else {
                orchestrate::run_processes(&cfg, mode, &out, &Binaries::beside_current_exe()?, abort)?
            };
            print_summary(&report);
        }
        Cmd::Compare { a, b } => {
            let c = compare_runs(&load_report(&a)?, &load_report(&b)?)?;
            println!("{}", serde_json::to_string_pretty(&c).expect("serializes"));
        }
        Cmd::Oracle { config, out } => {
            let (report, _) = orchestrate::run_oracle(&RunConfig::load(&config)?)?;
            if let Some(dir) = out {
                report.write_outputs(&dir)?;
            }
            println!("{}", report.to_json());
        }
        Cmd::Engine { config, mode, out } => {
            orchestrate::engine_process(&RunConfig::load(&config)?, mode, &out, abort)?;
        }
        Cmd::Dispatch {
            config,
            mode,
            out,
            engine,
        } => {
            orchestrate::dispatch_process(&RunConfig::load(&config)?, mode, &engine, &out, abort)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
