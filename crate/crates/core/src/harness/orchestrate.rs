//! Wires Timekeeper, engine and dispatcher together, in one process or as
//! separate processes.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, RunConfig};
use super::dispatcher::{run_dispatcher, DispatchClock, DispatchError, DispatchOutcome};
use super::metrics::{collect_metrics, MetricsError, RunIdentity, RunReport, SubmissionRecord};
use super::workload::{generate_arrivals, WorkloadError};
use crate::barrier::LogRecord;
use crate::client::{ClientError, ClientHandle, REQ_ADDR_ENV, SUB_ADDR_ENV};
use crate::clock::VirtualTimestamp;
use crate::des::{self, DesOutcome};
use crate::engine::ingress::{serve_ingress, LocalLink, TcpLink};
use crate::engine::runtime::{run_engine, Inbox, SleepExecutor, StepExecutor, TimewarpExecutor};
use crate::engine::{EngineConfig, EngineError, ExecMode, TokenEvent};
use crate::predictor::PredictError;
use crate::server::{self, ServerConfig};
use crate::wire::Role;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Process(String),
    #[error("run aborted")]
    Aborted,
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Aborted | RunError::Engine(EngineError::Aborted) | RunError::Dispatch(DispatchError::Aborted) => 130,
            _ => 1,
        }
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub events: Vec<TokenEvent>,
    pub submissions: Vec<SubmissionRecord>,
    pub epoch_virtual: VirtualTimestamp,
    /// Timekeeper request log (in-process timewarp runs only).
    pub timekeeper_log: Vec<LogRecord>,
    pub steps: u64,
}

impl RunArtifacts {
    /// Event times relative to the run epoch.
    pub fn relative_events(&self) -> Vec<TokenEvent> {
        self.events
            .iter()
            .map(|e| TokenEvent {
                virtual_ts_ns: VirtualTimestamp::from_nanos(e.virtual_ts_ns.nanos_since(self.epoch_virtual)),
                ..*e
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunError> {
        self.report.write_outputs(dir)?;
        write_jsonl(&dir.join("events.jsonl"), &self.events)?;
        write_jsonl(&dir.join("submissions.jsonl"), &self.submissions)?;
        if !self.timekeeper_log.is_empty() {
            write_jsonl(&dir.join("timekeeper.jsonl"), &self.timekeeper_log)?;
        }
        Ok(())
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunError> {
    let file = std::fs::File::open(path).map_err(|e| RunError::Process(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunError::Process(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

fn identity(cfg: &RunConfig, mode: &str) -> RunIdentity {
    RunIdentity {
        mode: mode.to_string(),
        seed: cfg.workload.seed,
        fingerprint: cfg.fingerprint(),
    }
}

fn engine_config(cfg: &RunConfig, mode: ExecMode) -> Result<EngineConfig, RunError> {
    let mut e = cfg.engine.clone();
    e.mode = mode;
    e.validate()?;
    Ok(e)
}

/// Runs the discrete-event reference; its report uses the workload epoch
/// and reports no wall time.
pub fn run_oracle(cfg: &RunConfig) -> Result<(RunReport, DesOutcome), RunError> {
    let arrivals = generate_arrivals(&cfg.workload)?;
    let predictor = cfg.predictor.build()?;
    let engine = engine_config(cfg, cfg.engine.mode)?;
    let out = des::simulate(&engine, predictor.as_ref(), &arrivals)?;
    let subs: Vec<SubmissionRecord> = arrivals
        .iter()
        .map(|a| SubmissionRecord {
            request_id: a.request_id,
            planned_offset_ns: a.offset_ns,
            arrival_virtual_ns: VirtualTimestamp::from_nanos(a.offset_ns),
            prompt_tokens: a.prompt_tokens,
            output_tokens: a.output_tokens,
        })
        .collect();
    let report = collect_metrics(&out.events, &subs, VirtualTimestamp::ZERO, 0, identity(cfg, "oracle"))?;
    Ok((report, out))
}

/// Runs a whole benchmark inside this process: Timekeeper server, engine
/// workers and dispatcher each on their own threads.
pub fn run_in_process(cfg: &RunConfig, mode: ExecMode, abort: &AtomicBool) -> Result<RunArtifacts, RunError> {
    let arrivals = generate_arrivals(&cfg.workload)?;
    let predictor = cfg.predictor.build()?;
    let engine_cfg = engine_config(cfg, mode)?;
    let inbox = Inbox::new();
    let stop = Arc::new(AtomicBool::new(false));

    let mut server = None;
    let mut dispatcher_client = None;
    let executor: Box<dyn StepExecutor> = match mode {
        ExecMode::Sleep => Box::new(SleepExecutor::new(&engine_cfg)?),
        ExecMode::Timewarp => {
            let tk = &cfg.timekeeper;
            let handle = server::spawn(ServerConfig {
                request_endpoint: tk.request_endpoint.clone(),
                broadcast_endpoint: tk.broadcast_endpoint.clone(),
                diag_endpoint: None,
                log_path: None,
                keep_log: true,
                barrier: tk.barrier_config(Some(engine_cfg.actor_count() + 1)),
            })?;
            let req = handle.request_addr().to_string();
            let sub = handle.broadcast_addr().to_string();
            let clients = (0..engine_cfg.actor_count())
                .map(|_| ClientHandle::connect(&req, &sub, Role::Actor))
                .collect::<Result<Vec<_>, _>>()?;
            dispatcher_client = Some(ClientHandle::connect(&req, &sub, Role::Actor)?);
            server = Some(handle);
            Box::new(TimewarpExecutor::start(&engine_cfg, clients)?)
        }
    };

    let engine_thread = {
        let inbox = inbox.clone();
        let stop = stop.clone();
        let predictor = predictor.clone();
        let engine_cfg = engine_cfg.clone();
        thread::Builder::new().name("engine".into()).spawn(move || {
            let mut executor = executor;
            run_engine(&engine_cfg, predictor.as_ref(), executor.as_mut(), &inbox, None, &stop)
        })?
    };

    let clock = match &dispatcher_client {
        Some(c) => DispatchClock::Timewarp(c),
        None => DispatchClock::Sleep,
    };
    let dispatched = run_dispatcher(&arrivals, &mut LocalLink::new(inbox.clone()), clock, abort);
    if dispatched.is_err() {
        inbox.finish();
        stop.store(true, Ordering::SeqCst);
    }
    while !engine_thread.is_finished() {
        if abort.load(Ordering::SeqCst) {
            stop.store(true, Ordering::SeqCst);
        }
        thread::sleep(Duration::from_millis(5));
    }
    let engine_result = engine_thread
        .join()
        .map_err(|_| RunError::Process("engine thread panicked".into()))?;
    drop(dispatcher_client);
    let timekeeper_log = server.as_ref().map(|s| s.log_records()).unwrap_or_default();
    if let Some(s) = server {
        s.shutdown();
    }
    let dispatched = dispatched?;
    let outcome = engine_result?;

    let wall_elapsed = outcome
        .end_wall
        .map(|end| end.nanos_since(dispatched.epoch_wall))
        .unwrap_or(0);
    let report = collect_metrics(
        &outcome.events,
        &dispatched.submissions,
        dispatched.epoch_virtual,
        wall_elapsed,
        identity(cfg, &mode.to_string()),
    )?;
    info!(
        "{mode} run: {} requests, virtual {:.3}s, wall {:.3}s, speedup {:.2}",
        report.num_requests,
        report.virtual_elapsed_ns as f64 / 1e9,
        report.wall_elapsed_ns as f64 / 1e9,
        report.speedup
    );
    Ok(RunArtifacts {
        report,
        events: outcome.events,
        submissions: dispatched.submissions,
        epoch_virtual: dispatched.epoch_virtual,
        timekeeper_log,
        steps: outcome.steps,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct DispatchSummary {
    epoch_virtual_ns: VirtualTimestamp,
    epoch_wall_ns: VirtualTimestamp,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct EngineSummary {
    end_wall_ns: Option<VirtualTimestamp>,
    steps: u64,
}

/// Engine side of a multi-process run. Prints `ingress <addr>` once it
/// accepts submissions, streams token events to `out/events.jsonl`.
pub fn engine_process(cfg: &RunConfig, mode: ExecMode, out: &Path, abort: &AtomicBool) -> Result<(), RunError> {
    std::fs::create_dir_all(out)?;
    let predictor = cfg.predictor.build()?;
    let engine_cfg = engine_config(cfg, mode)?;
    let mut executor: Box<dyn StepExecutor> = match mode {
        ExecMode::Sleep => Box::new(SleepExecutor::new(&engine_cfg)?),
        ExecMode::Timewarp => {
            let clients = (0..engine_cfg.actor_count())
                .map(|_| ClientHandle::connect_from_env(Role::Actor))
                .collect::<Result<Vec<_>, _>>()?;
            Box::new(TimewarpExecutor::start(&engine_cfg, clients)?)
        }
    };
    let inbox = Inbox::new();
    let listener = TcpListener::bind(server::resolve_endpoint(&cfg.timekeeper.engine_endpoint)?)?;
    let (addr, _ingress) = serve_ingress(listener, inbox.clone())?;
    println!("ingress {addr}");
    std::io::stdout().flush()?;
    let mut sink = BufWriter::new(std::fs::File::create(out.join("events.jsonl"))?);
    let outcome = run_engine(&engine_cfg, predictor.as_ref(), executor.as_mut(), &inbox, Some(&mut sink), abort)?;
    let summary = EngineSummary {
        end_wall_ns: outcome.end_wall,
        steps: outcome.steps,
    };
    std::fs::write(out.join("engine.json"), serde_json::to_string(&summary).expect("serializes"))?;
    Ok(())
}

/// Dispatcher side of a multi-process run.
pub fn dispatch_process(
    cfg: &RunConfig,
    mode: ExecMode,
    engine_addr: &str,
    out: &Path,
    abort: &AtomicBool,
) -> Result<(), RunError> {
    std::fs::create_dir_all(out)?;
    let arrivals = generate_arrivals(&cfg.workload)?;
    let client = match mode {
        ExecMode::Timewarp => Some(ClientHandle::connect_from_env(Role::Actor)?),
        ExecMode::Sleep => None,
    };
    let mut link = TcpLink::connect(engine_addr).map_err(DispatchError::from)?;
    let clock = match &client {
        Some(c) => DispatchClock::Timewarp(c),
        None => DispatchClock::Sleep,
    };
    let DispatchOutcome {
        epoch_virtual,
        epoch_wall,
        submissions,
    } = run_dispatcher(&arrivals, &mut link, clock, abort)?;
    write_jsonl(&out.join("submissions.jsonl"), &submissions)?;
    let summary = DispatchSummary {
        epoch_virtual_ns: epoch_virtual,
        epoch_wall_ns: epoch_wall,
    };
    std::fs::write(out.join("dispatch.json"), serde_json::to_string(&summary).expect("serializes"))?;
    Ok(())
}

/// Paths of the executables a multi-process run launches.
#[derive(Debug, Clone)]
pub struct Binaries {
    pub timekeeper: PathBuf,
    pub bench: PathBuf,
}

impl Binaries {
    /// `bench` is this executable; `timekeeper` sits next to it.
    pub fn beside_current_exe() -> std::io::Result<Self> {
        let bench = std::env::current_exe()?;
        let timekeeper = bench.with_file_name(format!("timekeeper{}", std::env::consts::EXE_SUFFIX));
        Ok(Binaries { timekeeper, bench })
    }
}

struct Children(Vec<(&'static str, Child)>);

impl Children {
    fn terminate_all(&mut self) {
        for (_, c) in &self.0 {
            super::signals::terminate(c);
        }
        let deadline = Instant::now() + Duration::from_secs(5);
        for (_, c) in &mut self.0 {
            while Instant::now() < deadline {
                if let Ok(Some(_)) = c.try_wait() {
                    break;
                }
                thread::sleep(Duration::from_millis(10));
            }
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        self.terminate_all();
    }
}

/// Reads stdout lines of `child` until one starts with each prefix.
fn read_addresses(child: &mut Child, prefixes: &[&str]) -> Result<Vec<String>, RunError> {
    let stdout = child.stdout.take().ok_or_else(|| RunError::Process("child stdout not captured".into()))?;
    let mut lines = BufReader::new(stdout).lines();
    let mut found = vec![None; prefixes.len()];
    while found.iter().any(Option::is_none) {
        let line = lines
            .next()
            .ok_or_else(|| RunError::Process(format!("child exited before printing {prefixes:?}")))??;
        let mut parts = line.split_whitespace();
        if let (Some(key), Some(value)) = (parts.next(), parts.next()) {
            if let Some(i) = prefixes.iter().position(|p| *p == key) {
                found[i] = Some(value.to_string());
            }
        }
    }
    // keep draining so the child never blocks on a full pipe
    thread::spawn(move || for _ in lines.by_ref() {});
    Ok(found.into_iter().map(Option::unwrap).collect())
}

fn wait_for(children: &mut Children, names: &[&str], abort: &AtomicBool) -> Result<Vec<ExitStatus>, RunError> {
    let mut status: Vec<Option<ExitStatus>> = vec![None; names.len()];
    loop {
        if abort.load(Ordering::SeqCst) {
            children.terminate_all();
            return Err(RunError::Aborted);
        }
        for (i, name) in names.iter().enumerate() {
            if status[i].is_some() {
                continue;
            }
            let (_, child) = children.0.iter_mut().find(|(n, _)| n == name).expect("child by name");
            if let Some(s) = child.try_wait()? {
                if !s.success() {
                    children.terminate_all();
                    return Err(RunError::Process(format!("{name} exited with {s}")));
                }
                status[i] = Some(s);
            }
        }
        if status.iter().all(Option::is_some) {
            return Ok(status.into_iter().map(Option::unwrap).collect());
        }
        thread::sleep(Duration::from_millis(10));
    }
}

/// Runs Timekeeper, engine and dispatcher as separate processes and
/// collects the report from the files they leave in `out`.
pub fn run_processes(
    cfg: &RunConfig,
    mode: ExecMode,
    out: &Path,
    bins: &Binaries,
    abort: &AtomicBool,
) -> Result<RunReport, RunError> {
    std::fs::create_dir_all(out)?;
    let config_path = out.join("config.json");
    let mut effective = cfg.clone();
    effective.engine.mode = mode;
    std::fs::write(&config_path, serde_json::to_string_pretty(&effective).expect("serializes"))?;
    let engine_cfg = engine_config(cfg, mode)?;
    let mut children = Children(Vec::new());
    let mut env: Vec<(&str, String)> = Vec::new();

    if mode == ExecMode::Timewarp {
        let tk = &cfg.timekeeper;
        let mut cmd = Command::new(&bins.timekeeper);
        cmd.arg("serve")
            .args(["--request-endpoint", &tk.request_endpoint])
            .args(["--broadcast-endpoint", &tk.broadcast_endpoint])
            .args(["--jitter-cooldown-us", &tk.jitter_cooldown_us.to_string()])
            .args(["--expect-actors", &(engine_cfg.actor_count() + 1).to_string()])
            .arg("--log")
            .arg(out.join("timekeeper.jsonl"))
            .stdout(Stdio::piped());
        if tk.drop_broadcasts > 0.0 {
            cmd.args(["--drop-broadcasts", &tk.drop_broadcasts.to_string()]);
            cmd.args(["--fault-seed", &tk.fault_seed.to_string()]);
        }
        let mut child = cmd.spawn().map_err(|e| RunError::Process(format!("{}: {e}", bins.timekeeper.display())))?;
        let addrs = read_addresses(&mut child, &["request", "broadcast"]);
        children.0.push(("timekeeper", child));
        let addrs = addrs?;
        env.push((REQ_ADDR_ENV, addrs[0].clone()));
        env.push((SUB_ADDR_ENV, addrs[1].clone()));
    }

    let mode_arg = mode.to_string();
    let common = |sub: &str| {
        let mut c = Command::new(&bins.bench);
        c.arg(sub)
            .arg("--config")
            .arg(&config_path)
            .args(["--mode", &mode_arg])
            .arg("--out")
            .arg(out);
        for (k, v) in &env {
            c.env(k, v);
        }
        c
    };
    let mut engine = common("engine")
        .stdout(Stdio::piped())
        .spawn()
        .map_err(|e| RunError::Process(format!("{}: {e}", bins.bench.display())))?;
    let ingress = read_addresses(&mut engine, &["ingress"]);
    children.0.push(("engine", engine));
    let ingress = ingress?.remove(0);
    let dispatcher = common("dispatch").args(["--engine", &ingress]).spawn()?;
    children.0.push(("dispatcher", dispatcher));

    wait_for(&mut children, &["dispatcher", "engine"], abort)?;
    children.terminate_all();

    let events: Vec<TokenEvent> = read_jsonl(&out.join("events.jsonl"))?;
    let submissions: Vec<SubmissionRecord> = read_jsonl(&out.join("submissions.jsonl"))?;
    let dispatch: DispatchSummary = read_json(&out.join("dispatch.json"))?;
    let engine: EngineSummary = read_json(&out.join("engine.json"))?;
    let wall = engine
        .end_wall_ns
        .map(|w| w.nanos_since(dispatch.epoch_wall_ns))
        .unwrap_or(0);
    let report = collect_metrics(&events, &submissions, dispatch.epoch_virtual_ns, wall, identity(cfg, &mode_arg))?;
    report.write_outputs(out)?;
    if report.num_requests == 0 {
        warn!("run finished with no requests");
    }
    Ok(report)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::Process(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Process(format!("{}: {e}", path.display())))
}
