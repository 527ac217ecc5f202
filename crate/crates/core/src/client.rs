//! Actor and Observer client for the Timekeeper.
//!
//! A [`ClientHandle`] holds two connections: the request channel and the
//! broadcast subscription. A background thread applies every `CLOCK_UPDATE`
//! to the handle's [`VirtualClock`], so [`ClientHandle::virtual_now`] never
//! blocks.

use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use thiserror::Error;

use crate::clock::{VirtualClock, VirtualTimestamp};
use crate::server::resolve_endpoint;
use crate::wire::{self, ErrorCode, Message, Role};

pub const REQ_ADDR_ENV: &str = "TIMEKEEPER_REQ_ADDR";
pub const SUB_ADDR_ENV: &str = "TIMEKEEPER_SUB_ADDR";
pub const DEFAULT_ACK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("could not connect to the timekeeper: {0}")]
    ConnectionFailed(String),
    #[error("registration is sealed")]
    RegistrationSealed,
    #[error("lost connection to the timekeeper: {0}")]
    Disconnected(String),
    #[error("jump delta must be positive")]
    InvalidDelta,
    #[error("operation requires the actor role")]
    InvalidRole,
    #[error("client has deregistered")]
    InvalidState,
    #[error("collective group disagrees on member count")]
    ExpectedMismatch,
    #[error("timekeeper rejected the request: {0:?}")]
    Rejected(ErrorCode),
}

impl From<ErrorCode> for ClientError {
    fn from(code: ErrorCode) -> Self {
        match code {
            ErrorCode::RegistrationSealed => ClientError::RegistrationSealed,
            ErrorCode::ExpectedMismatch => ClientError::ExpectedMismatch,
            other => ClientError::Rejected(other),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Time to wait for an acknowledgement before declaring the server lost.
    pub ack_timeout: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            ack_timeout: DEFAULT_ACK_TIMEOUT,
        }
    }
}

struct Request {
    stream: TcpStream,
    replies: Receiver<Message>,
}

pub struct ClientHandle {
    client_id: String,
    role: Role,
    clock: Arc<VirtualClock>,
    request: Mutex<Request>,
    subscription: TcpStream,
    deregistered: AtomicBool,
    options: ClientOptions,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for ClientHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientHandle")
            .field("client_id", &self.client_id)
            .field("role", &self.role)
            .finish()
    }
}

fn connect_stream(endpoint: &str) -> Result<TcpStream, ClientError> {
    let addr = resolve_endpoint(endpoint).map_err(|e| ClientError::ConnectionFailed(format!("{endpoint}: {e}")))?;
    let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))
        .map_err(|e| ClientError::ConnectionFailed(format!("{endpoint}: {e}")))?;
    let _ = stream.set_nodelay(true);
    Ok(stream)
}

fn recv_reply(replies: &Receiver<Message>, timeout: Option<Duration>) -> Result<Message, ClientError> {
    match timeout {
        Some(t) => replies.recv_timeout(t).map_err(|e| match e {
            RecvTimeoutError::Timeout => ClientError::Disconnected(format!("no acknowledgement within {t:?}")),
            RecvTimeoutError::Disconnected => ClientError::Disconnected("request channel closed".into()),
        }),
        None => replies
            .recv()
            .map_err(|_| ClientError::Disconnected("request channel closed".into())),
    }
}

impl ClientHandle {
    pub fn connect(request_endpoint: &str, broadcast_endpoint: &str, role: Role) -> Result<Self, ClientError> {
        Self::connect_with(request_endpoint, broadcast_endpoint, role, ClientOptions::default())
    }

    /// Connects using the `TIMEKEEPER_REQ_ADDR` and `TIMEKEEPER_SUB_ADDR`
    /// environment variables.
    pub fn connect_from_env(role: Role) -> Result<Self, ClientError> {
        let req = std::env::var(REQ_ADDR_ENV).map_err(|_| ClientError::ConnectionFailed(format!("{REQ_ADDR_ENV} not set")))?;
        let sub = std::env::var(SUB_ADDR_ENV).map_err(|_| ClientError::ConnectionFailed(format!("{SUB_ADDR_ENV} not set")))?;
        Self::connect(&req, &sub, role)
    }

    pub fn connect_with(
        request_endpoint: &str,
        broadcast_endpoint: &str,
        role: Role,
        options: ClientOptions,
    ) -> Result<Self, ClientError> {
        let clock = Arc::new(VirtualClock::new());

        // Subscribe first and wait for the welcome frame: from then on every
        // broadcast reaches us, including any issued while we register.
        let mut sub = connect_stream(broadcast_endpoint)?;
        sub.set_read_timeout(Some(options.ack_timeout))
            .map_err(|e| ClientError::ConnectionFailed(e.to_string()))?;
        match wire::read_frame::<Message, _>(&mut sub) {
            Ok(Some(Message::ClockUpdate { offset, seq })) => {
                clock.apply_update(offset, seq);
            }
            Ok(other) => {
                return Err(ClientError::ConnectionFailed(format!("unexpected subscription frame {other:?}")))
            }
            Err(e) => return Err(ClientError::ConnectionFailed(format!("subscription: {e}"))),
        }
        sub.set_read_timeout(None)
            .map_err(|e| ClientError::ConnectionFailed(e.to_string()))?;

        let mut threads = Vec::new();
        let sub_reader = sub.try_clone().map_err(|e| ClientError::ConnectionFailed(e.to_string()))?;
        {
            let clock = clock.clone();
            threads.push(thread::spawn(move || {
                let mut s = sub_reader;
                while let Ok(Some(msg)) = wire::read_frame::<Message, _>(&mut s) {
                    if let Message::ClockUpdate { offset, seq } = msg {
                        clock.apply_update(offset, seq);
                    }
                }
                clock.close();
            }));
        }

        let mut req = connect_stream(request_endpoint)?;
        let req_reader = req.try_clone().map_err(|e| ClientError::ConnectionFailed(e.to_string()))?;
        let (reply_tx, replies) = unbounded();
        threads.push(thread::spawn(move || {
            let mut s = req_reader;
            while let Ok(Some(msg)) = wire::read_frame::<Message, _>(&mut s) {
                if reply_tx.send(msg).is_err() {
                    break;
                }
            }
        }));

        wire::write_frame(&mut req, &Message::Register { role })
            .map_err(|e| ClientError::ConnectionFailed(e.to_string()))?;
        let client_id = match recv_reply(&replies, Some(options.ack_timeout)) {
            Ok(Message::RegisterAck { error: Some(code), .. }) => return Err(code.into()),
            Ok(Message::RegisterAck {
                client_id, offset, seq, ..
            }) => {
                clock.apply_update(offset, seq);
                client_id
            }
            Ok(other) => {
                return Err(ClientError::ConnectionFailed(format!(
                    "expected REGISTER_ACK, got {}",
                    other.type_name()
                )))
            }
            Err(e) => return Err(ClientError::ConnectionFailed(e.to_string())),
        };

        Ok(ClientHandle {
            client_id,
            role,
            clock,
            request: Mutex::new(Request { stream: req, replies }),
            subscription: sub,
            deregistered: AtomicBool::new(false),
            options,
            threads,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn clock(&self) -> &Arc<VirtualClock> {
        &self.clock
    }

    pub fn virtual_now(&self) -> VirtualTimestamp {
        self.clock.virtual_now()
    }

    fn require_actor(&self) -> Result<(), ClientError> {
        if self.role != Role::Actor {
            return Err(ClientError::InvalidRole);
        }
        if self.deregistered.load(Ordering::SeqCst) {
            return Err(ClientError::InvalidState);
        }
        Ok(())
    }

    fn send(&self, req: &mut Request, msg: &Message) -> Result<(), ClientError> {
        req.stream
            .write_all(&wire::encode(msg))
            .map_err(|e| ClientError::Disconnected(e.to_string()))
    }

    fn send_jump(&self, req: &mut Request, target: VirtualTimestamp) -> Result<(), ClientError> {
        self.send(
            req,
            &Message::JumpRequest {
                client_id: self.client_id.clone(),
                target,
            },
        )?;
        match recv_reply(&req.replies, Some(self.options.ack_timeout))? {
            Message::JumpAck { error: None } => Ok(()),
            Message::JumpAck { error: Some(code) } => Err(code.into()),
            other => Err(ClientError::Disconnected(format!("expected JUMP_ACK, got {}", other.type_name()))),
        }
    }

    /// Advances virtual time by `delta`; returns the wall time spent.
    pub fn time_jump(&self, delta: Duration) -> Result<Duration, ClientError> {
        self.require_actor()?;
        if delta.is_zero() {
            return Err(ClientError::InvalidDelta);
        }
        let target = self.clock.virtual_now().saturating_add(delta);
        self.jump_to(target)
    }

    /// Blocks until virtual time reaches `target`.
    pub fn jump_to(&self, target: VirtualTimestamp) -> Result<Duration, ClientError> {
        self.jump_to_with(target, || {})
    }

    /// Like [`Self::jump_to`], calling `on_ack` once the first request has
    /// been acknowledged, i.e. once the server holds this actor's target.
    pub fn jump_to_with(&self, target: VirtualTimestamp, on_ack: impl FnOnce()) -> Result<Duration, ClientError> {
        self.require_actor()?;
        let start = Instant::now();
        let mut on_ack = Some(on_ack);
        let mut req = self.request.lock().unwrap();
        loop {
            let now = self.clock.virtual_now();
            if now >= target {
                break;
            }
            let seq = self.clock.update_sequence();
            self.send_jump(&mut req, target)?;
            if let Some(f) = on_ack.take() {
                f();
            }
            let now = self.clock.virtual_now();
            if now >= target {
                break;
            }
            // Falls back to plain waiting when no update comes: wall time
            // keeps advancing the virtual clock.
            let remaining = target.saturating_duration_since(now);
            self.clock.wait_for_update_after(seq, remaining);
            if self.clock.is_closed() && self.clock.virtual_now() < target {
                return Err(ClientError::Disconnected("broadcast subscription closed".into()));
            }
        }
        if let Some(f) = on_ack.take() {
            f();
        }
        Ok(start.elapsed())
    }

    /// Declares that this actor has no deadline until its next request, so
    /// barriers stop waiting on it.
    pub fn park(&self) -> Result<(), ClientError> {
        self.require_actor()?;
        let mut req = self.request.lock().unwrap();
        self.send_jump(&mut req, VirtualTimestamp::MAX)
    }

    /// Blocks until `expected` actors entered `group_id`. While blocked this
    /// actor does not hold up time-jump barriers.
    pub fn rendezvous(&self, group_id: &str, expected: u32) -> Result<u64, ClientError> {
        self.require_actor()?;
        let mut req = self.request.lock().unwrap();
        self.send(
            &mut req,
            &Message::CollectiveEnter {
                client_id: self.client_id.clone(),
                group_id: group_id.to_string(),
                expected,
            },
        )?;
        match recv_reply(&req.replies, None)? {
            Message::CollectiveRelease { error: Some(code), .. } => Err(code.into()),
            Message::CollectiveRelease { generation, .. } => Ok(generation),
            other => Err(ClientError::Disconnected(format!(
                "expected COLLECTIVE_RELEASE, got {}",
                other.type_name()
            ))),
        }
    }

    /// A collective operation: rendezvous, then advance by its predicted
    /// duration.
    pub fn collective_barrier(&self, group_id: &str, expected: u32, predicted: Duration) -> Result<(), ClientError> {
        self.rendezvous(group_id, expected)?;
        if !predicted.is_zero() {
            self.time_jump(predicted)?;
        }
        Ok(())
    }

    /// Seals registration on the server. Any registered client may do this.
    pub fn seal(&self) -> Result<(), ClientError> {
        let mut req = self.request.lock().unwrap();
        self.send(
            &mut req,
            &Message::Seal {
                client_id: Some(self.client_id.clone()),
                error: None,
            },
        )?;
        match recv_reply(&req.replies, Some(self.options.ack_timeout))? {
            Message::Seal { error: None, .. } => Ok(()),
            Message::Seal { error: Some(code), .. } => Err(code.into()),
            other => Err(ClientError::Disconnected(format!("expected SEAL, got {}", other.type_name()))),
        }
    }

    /// Leaves the run. Idempotent; `virtual_now` keeps working afterwards.
    pub fn deregister(&self) {
        if self.deregistered.swap(true, Ordering::SeqCst) {
            return;
        }
        let mut req = self.request.lock().unwrap();
        let msg = Message::Deregister {
            client_id: self.client_id.clone(),
        };
        let _ = self.send(&mut req, &msg);
    }

    /// Asks the server process to stop.
    pub fn request_shutdown(&self) -> Result<(), ClientError> {
        let mut req = self.request.lock().unwrap();
        self.send(&mut req, &Message::Shutdown {})
    }
}

impl Drop for ClientHandle {
    fn drop(&mut self) {
        if let Ok(req) = self.request.get_mut() {
            let _ = req.stream.shutdown(Shutdown::Both);
        }
        let _ = self.subscription.shutdown(Shutdown::Both);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
