//! Threaded TCP Timekeeper.
//!
//! Reader threads decode frames and forward them to a single barrier thread
//! that owns [`BarrierState`]; every connection has its own writer thread, so
//! intake is never blocked by resolution, cooldown deferral, or a slow peer.
//! Log records are serialized by a separate thread.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, warn};

use crate::barrier::{BarrierConfig, BarrierState, ConnId, Control, Diagnostics, Effect, LogRecord};
use crate::clock::wall_now;
use crate::wire::{self, Message};

/// Accepts `host:port` with an optional `tcp://` prefix.
pub fn resolve_endpoint(endpoint: &str) -> std::io::Result<SocketAddr> {
    let trimmed = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
    trimmed.to_socket_addrs()?.next().ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("no address for {endpoint:?}"))
    })
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub request_endpoint: String,
    pub broadcast_endpoint: String,
    /// Answers each connection with one framed [`Diagnostics`] snapshot.
    pub diag_endpoint: Option<String>,
    pub log_path: Option<PathBuf>,
    /// Keep log records in memory for [`ServerHandle::log_records`].
    pub keep_log: bool,
    pub barrier: BarrierConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            request_endpoint: "127.0.0.1:0".into(),
            broadcast_endpoint: "127.0.0.1:0".into(),
            diag_endpoint: None,
            log_path: None,
            keep_log: true,
            barrier: BarrierConfig::default(),
        }
    }
}

type Frame = Arc<[u8]>;

enum Input {
    Open { conn: ConnId, stream: TcpStream, tx: Sender<Frame> },
    Request { conn: ConnId, msg: Message },
    Closed { conn: ConnId },
    Subscribe { stream: TcpStream, tx: Sender<Frame> },
    Diagnostics(Sender<Diagnostics>),
    FlushLog(Sender<()>),
    Stop,
}

enum LogMsg {
    Record(LogRecord),
    Sync(Sender<()>),
}

pub struct ServerHandle {
    request_addr: SocketAddr,
    broadcast_addr: SocketAddr,
    diag_addr: Option<SocketAddr>,
    inputs: Sender<Input>,
    stopping: Arc<AtomicBool>,
    barrier_thread: Option<JoinHandle<()>>,
    log_thread: Option<JoinHandle<()>>,
    log: Arc<Mutex<Vec<LogRecord>>>,
}

impl ServerHandle {
    pub fn request_addr(&self) -> SocketAddr {
        self.request_addr
    }

    pub fn broadcast_addr(&self) -> SocketAddr {
        self.broadcast_addr
    }

    pub fn diag_addr(&self) -> Option<SocketAddr> {
        self.diag_addr
    }

    pub fn diagnostics(&self) -> Option<Diagnostics> {
        let (tx, rx) = unbounded();
        self.inputs.send(Input::Diagnostics(tx)).ok()?;
        rx.recv_timeout(Duration::from_secs(5)).ok()
    }

    /// Records emitted so far, in emission order.
    pub fn log_records(&self) -> Vec<LogRecord> {
        let (tx, rx) = unbounded();
        if self.inputs.send(Input::FlushLog(tx)).is_ok() {
            let _ = rx.recv_timeout(Duration::from_secs(5));
        }
        self.log.lock().unwrap().clone()
    }

    pub fn is_stopped(&self) -> bool {
        self.barrier_thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Blocks until the server stops (a SHUTDOWN request or [`Self::shutdown`]).
    pub fn wait(mut self) {
        self.join();
    }

    pub fn shutdown(mut self) {
        self.stop();
        self.join();
    }

    fn stop(&self) {
        let _ = self.inputs.send(Input::Stop);
    }

    fn join(&mut self) {
        if let Some(t) = self.barrier_thread.take() {
            let _ = t.join();
        }
        self.stopping.store(true, Ordering::SeqCst);
        // wake the accept loops so they observe the flag
        for addr in [Some(self.request_addr), Some(self.broadcast_addr), self.diag_addr]
            .into_iter()
            .flatten()
        {
            let _ = TcpStream::connect_timeout(&addr, Duration::from_millis(200));
        }
        if let Some(t) = self.log_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.barrier_thread.is_some() {
            self.stop();
            self.join();
        }
    }
}

pub fn spawn(config: ServerConfig) -> std::io::Result<ServerHandle> {
    let request_listener = TcpListener::bind(resolve_endpoint(&config.request_endpoint)?)?;
    let broadcast_listener = TcpListener::bind(resolve_endpoint(&config.broadcast_endpoint)?)?;
    let diag_listener = match &config.diag_endpoint {
        Some(e) => Some(TcpListener::bind(resolve_endpoint(e)?)?),
        None => None,
    };
    let log_file = match &config.log_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };

    let request_addr = request_listener.local_addr()?;
    let broadcast_addr = broadcast_listener.local_addr()?;
    let diag_addr = diag_listener.as_ref().map(|l| l.local_addr()).transpose()?;

    let (inputs, input_rx) = unbounded::<Input>();
    let (log_tx, log_rx) = unbounded::<LogMsg>();
    let stopping = Arc::new(AtomicBool::new(false));
    let log = Arc::new(Mutex::new(Vec::new()));
    let next_conn = Arc::new(AtomicU64::new(1));

    {
        let inputs = inputs.clone();
        let stopping = stopping.clone();
        thread::Builder::new()
            .name("tk-accept-req".into())
            .spawn(move || accept_requests(request_listener, inputs, stopping, next_conn))?;
    }
    {
        let inputs = inputs.clone();
        let stopping = stopping.clone();
        thread::Builder::new()
            .name("tk-accept-sub".into())
            .spawn(move || accept_subscribers(broadcast_listener, inputs, stopping))?;
    }
    if let Some(listener) = diag_listener {
        let inputs = inputs.clone();
        let stopping = stopping.clone();
        thread::Builder::new()
            .name("tk-diag".into())
            .spawn(move || serve_diagnostics(listener, inputs, stopping))?;
    }

    let log_thread = {
        let log = log.clone();
        let keep = config.keep_log;
        thread::Builder::new()
            .name("tk-log".into())
            .spawn(move || write_log(log_rx, log_file, log, keep))?
    };

    let state = BarrierState::new(config.barrier);
    let barrier_thread = thread::Builder::new()
        .name("tk-barrier".into())
        .spawn(move || barrier_loop(state, input_rx, log_tx))?;

    Ok(ServerHandle {
        request_addr,
        broadcast_addr,
        diag_addr,
        inputs,
        stopping,
        barrier_thread: Some(barrier_thread),
        log_thread: Some(log_thread),
        log,
    })
}

fn spawn_writer(mut stream: TcpStream, rx: Receiver<Frame>) {
    let _ = thread::Builder::new().name("tk-writer".into()).spawn(move || {
        for frame in rx {
            if stream.write_all(&frame).is_err() {
                break;
            }
        }
        let _ = stream.shutdown(Shutdown::Write);
    });
}

fn accept_requests(listener: TcpListener, inputs: Sender<Input>, stopping: Arc<AtomicBool>, next_conn: Arc<AtomicU64>) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let conn = next_conn.fetch_add(1, Ordering::SeqCst);
        let (Ok(write_half), Ok(control)) = (stream.try_clone(), stream.try_clone()) else {
            continue;
        };
        let (tx, rx) = unbounded();
        spawn_writer(write_half, rx);
        if inputs.send(Input::Open { conn, stream: control, tx }).is_err() {
            break;
        }
        let inputs = inputs.clone();
        let _ = thread::Builder::new().name("tk-reader".into()).spawn(move || {
            let mut stream = stream;
            loop {
                match wire::read_frame::<Message, _>(&mut stream) {
                    Ok(Some(msg)) => {
                        if inputs.send(Input::Request { conn, msg }).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!("connection {conn}: {e}");
                        break;
                    }
                }
            }
            let _ = inputs.send(Input::Closed { conn });
        });
    }
}

fn accept_subscribers(listener: TcpListener, inputs: Sender<Input>, stopping: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        let Ok(write_half) = stream.try_clone() else { continue };
        let (tx, rx) = unbounded();
        spawn_writer(write_half, rx);
        if inputs.send(Input::Subscribe { stream, tx }).is_err() {
            break;
        }
    }
}

fn serve_diagnostics(listener: TcpListener, inputs: Sender<Input>, stopping: Arc<AtomicBool>) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut stream) = stream else { continue };
        let (tx, rx) = unbounded();
        if inputs.send(Input::Diagnostics(tx)).is_err() {
            break;
        }
        if let Ok(diag) = rx.recv_timeout(Duration::from_secs(5)) {
            let _ = wire::write_frame(&mut stream, &diag);
        }
    }
}

fn write_log(rx: Receiver<LogMsg>, mut file: Option<BufWriter<File>>, memory: Arc<Mutex<Vec<LogRecord>>>, keep: bool) {
    for msg in rx {
        let record = match msg {
            LogMsg::Record(r) => r,
            LogMsg::Sync(done) => {
                let _ = done.send(());
                continue;
            }
        };
        if let Some(f) = file.as_mut() {
            let line = serde_json::to_string(&record).expect("log records serialize");
            if writeln!(f, "{line}").and_then(|_| f.flush()).is_err() {
                warn!("event log write failed; continuing without file log");
                file = None;
            }
        }
        if keep {
            memory.lock().unwrap().push(record);
        }
    }
}

fn barrier_loop(mut state: BarrierState, inputs: Receiver<Input>, log: Sender<LogMsg>) {
    let mut conns: HashMap<ConnId, (TcpStream, Sender<Frame>)> = HashMap::new();
    let mut subscribers: Vec<(TcpStream, Sender<Frame>)> = Vec::new();
    let mut effects = Vec::new();

    loop {
        let input = match state.next_deadline() {
            Some(deadline) => {
                let wait = deadline.saturating_duration_since(wall_now());
                match inputs.recv_deadline(Instant::now() + wait) {
                    Ok(input) => Some(input),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                }
            }
            None => match inputs.recv() {
                Ok(input) => Some(input),
                Err(_) => break,
            },
        };

        let mut stop = false;
        match input {
            None => {}
            Some(Input::Open { conn, stream, tx }) => {
                conns.insert(conn, (stream, tx));
            }
            Some(Input::Request { conn, msg }) => {
                if let Ok(Control::Shutdown) = state.handle(conn, msg, wall_now(), &mut effects) {
                    stop = true;
                }
            }
            Some(Input::Closed { conn }) => {
                conns.remove(&conn);
                state.disconnect(conn, wall_now(), &mut effects);
            }
            Some(Input::Subscribe { stream, tx }) => {
                // Welcome frame and list insertion happen atomically with
                // respect to broadcasts, so a subscriber never misses one.
                if tx.send(wire::encode(&state.current_update()).into()).is_ok() {
                    subscribers.push((stream, tx));
                }
            }
            Some(Input::Diagnostics(reply)) => {
                let _ = reply.send(state.diagnostics());
            }
            Some(Input::FlushLog(done)) => {
                let _ = log.send(LogMsg::Sync(done));
            }
            Some(Input::Stop) => stop = true,
        }
        state.poll(wall_now(), &mut effects);

        for effect in effects.drain(..) {
            match effect {
                Effect::Send { conn, msg } => {
                    if let Some((_, tx)) = conns.get(&conn) {
                        let _ = tx.send(wire::encode(&msg).into());
                    }
                }
                Effect::Broadcast(msg) => {
                    let frame: Frame = wire::encode(&msg).into();
                    subscribers.retain(|(_, tx)| tx.send(frame.clone()).is_ok());
                }
                Effect::Log(record) => {
                    let _ = log.send(LogMsg::Record(record));
                }
            }
        }
        if stop {
            break;
        }
    }

    for (stream, _) in conns.values().chain(subscribers.iter()) {
        let _ = stream.shutdown(Shutdown::Both);
    }
}
