use std::net::TcpStream;
use std::path::PathBuf;
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use timewarp::barrier::{BarrierConfig, Diagnostics, FaultConfig};
use timewarp::harness::signals;
use timewarp::server::{self, resolve_endpoint, ServerConfig};
use timewarp::wire;

#[derive(Parser)]
#[command(name = "timekeeper", about = "Virtual-time barrier server")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the server until a SHUTDOWN request or SIGINT/SIGTERM.
    Serve {
        #[arg(long, default_value = "tcp://127.0.0.1:5555")]
        request_endpoint: String,
        #[arg(long, default_value = "tcp://127.0.0.1:5556")]
        broadcast_endpoint: String,
        /// Minimum wall-time gap between clock broadcasts.
        #[arg(long, default_value_t = 500)]
        jitter_cooldown_us: u64,
        /// JSON-lines request log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Seal registration once this many actors have registered.
        #[arg(long)]
        expect_actors: Option<usize>,
        #[arg(long)]
        diag_endpoint: Option<String>,
        /// Probability of dropping each broadcast (fault injection).
        #[arg(long, default_value_t = 0.0)]
        drop_broadcasts: f64,
        #[arg(long, default_value_t = 0)]
        fault_seed: u64,
    },
    /// Print a running server's barrier state.
    Diag {
        #[arg(long)]
        endpoint: String,
    },
}

fn serve(config: ServerConfig) -> Result<(), String> {
    let abort = signals::install();
    let handle = server::spawn(config).map_err(|e| format!("cannot start server: {e}"))?;
    println!("request tcp://{}", handle.request_addr());
    println!("broadcast tcp://{}", handle.broadcast_addr());
    if let Some(d) = handle.diag_addr() {
        println!("diag tcp://{d}");
    }
    while !handle.is_stopped() && !abort.load(std::sync::atomic::Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(20));
    }
    handle.shutdown();
    Ok(())
}

fn diag(endpoint: &str) -> Result<(), String> {
    let addr = resolve_endpoint(endpoint).map_err(|e| e.to_string())?;
    let mut s = TcpStream::connect_timeout(&addr, Duration::from_secs(5)).map_err(|e| e.to_string())?;
    match wire::read_frame::<Diagnostics, _>(&mut s) {
        Ok(Some(d)) => {
            println!("{}", serde_json::to_string_pretty(&d).expect("serializes"));
            Ok(())
        }
        Ok(None) => Err("server closed the connection".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match Cli::parse().command {
        Cmd::Serve {
            request_endpoint,
            broadcast_endpoint,
            jitter_cooldown_us,
            log,
            expect_actors,
            diag_endpoint,
            drop_broadcasts,
            fault_seed,
        } => serve(ServerConfig {
            request_endpoint,
            broadcast_endpoint,
            diag_endpoint,
            log_path: log,
            keep_log: false,
            barrier: BarrierConfig {
                cooldown: Duration::from_micros(jitter_cooldown_us),
                expect_actors,
                faults: FaultConfig {
                    drop_broadcast_probability: drop_broadcasts,
                    seed: fault_seed,
                },
            },
        }),
        Cmd::Diag { endpoint } => diag(&endpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("timekeeper: {e}");
            ExitCode::FAILURE
        }
    }
}
