//! Request submission between the dispatcher and an engine.
//!
//! In-process runs hand requests straight to the engine's [`Inbox`]. Across
//! processes the same exchange uses the Timekeeper frame format on a TCP
//! connection: `SUBMIT` (acknowledged by `SUBMIT_ACK`) and a final `END`.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError};
use log::warn;
use serde::{Deserialize, Serialize};

use super::runtime::Inbox;
use super::Request;
use crate::clock::VirtualTimestamp;
use crate::wire;

/// How long a submission may stay unacknowledged. Acks are withheld while
/// the engine wakes up, which takes at most a barrier round.
const SUBMIT_ACK_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IngressMessage {
    Submit {
        request: Request,
        /// When the following submission is due; absent if unknown.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next_arrival: Option<VirtualTimestamp>,
    },
    SubmitAck { request_id: u64 },
    End {},
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("engine link i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("engine link: {0}")]
    Protocol(String),
}

pub trait EngineLink: Send {
    /// Hands a request to the engine; returns once the engine accepted it.
    /// `next_arrival` announces when the following request is due.
    fn submit(&mut self, request: Request, next_arrival: Option<VirtualTimestamp>) -> Result<(), LinkError>;
    fn end(&mut self) -> Result<(), LinkError>;
}

pub struct LocalLink {
    inbox: Arc<Inbox>,
}

impl LocalLink {
    pub fn new(inbox: Arc<Inbox>) -> Self {
        LocalLink { inbox }
    }
}

impl EngineLink for LocalLink {
    fn submit(&mut self, request: Request, next_arrival: Option<VirtualTimestamp>) -> Result<(), LinkError> {
        let (tx, rx) = bounded(1);
        self.inbox.submit(
            request,
            next_arrival,
            Box::new(move || {
                let _ = tx.send(());
            }),
        );
        match rx.recv_timeout(SUBMIT_ACK_TIMEOUT) {
            Ok(()) => Ok(()),
            Err(RecvTimeoutError::Timeout) => Err(LinkError::Protocol("submission not acknowledged".into())),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::Protocol("engine dropped submission".into())),
        }
    }

    fn end(&mut self) -> Result<(), LinkError> {
        self.inbox.finish();
        Ok(())
    }
}

pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn connect(addr: &str) -> Result<Self, LinkError> {
        let addr = crate::server::resolve_endpoint(addr)?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(SUBMIT_ACK_TIMEOUT))?;
        Ok(TcpLink { stream })
    }
}

impl EngineLink for TcpLink {
    fn submit(&mut self, request: Request, next_arrival: Option<VirtualTimestamp>) -> Result<(), LinkError> {
        let id = request.request_id;
        wire::write_frame(&mut self.stream, &IngressMessage::Submit { request, next_arrival })?;
        match wire::read_frame::<IngressMessage, _>(&mut self.stream) {
            Ok(Some(IngressMessage::SubmitAck { request_id })) if request_id == id => Ok(()),
            Ok(other) => Err(LinkError::Protocol(format!("expected SUBMIT_ACK for {id}, got {other:?}"))),
            Err(e) => Err(LinkError::Protocol(e.to_string())),
        }
    }

    fn end(&mut self) -> Result<(), LinkError> {
        wire::write_frame(&mut self.stream, &IngressMessage::End {})?;
        Ok(())
    }
}

/// Accepts one dispatcher connection and feeds its submissions to `inbox`.
pub fn serve_ingress(listener: TcpListener, inbox: Arc<Inbox>) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let addr = listener.local_addr()?;
    let handle = thread::Builder::new().name("ingress".into()).spawn(move || {
        let (stream, _) = match listener.accept() {
            Ok(s) => s,
            Err(e) => {
                warn!("ingress accept failed: {e}");
                inbox.finish();
                return;
            }
        };
        let _ = stream.set_nodelay(true);
        let writer = Arc::new(Mutex::new(stream.try_clone().expect("clone ingress stream")));
        let mut reader = stream;
        loop {
            match wire::read_frame::<IngressMessage, _>(&mut reader) {
                Ok(Some(IngressMessage::Submit { request, next_arrival })) => {
                    let id = request.request_id;
                    let w = writer.clone();
                    inbox.submit(
                        request,
                        next_arrival,
                        Box::new(move || {
                            let mut s = w.lock().unwrap();
                            let _ = wire::write_frame(&mut *s, &IngressMessage::SubmitAck { request_id: id });
                        }),
                    );
                }
                Ok(Some(IngressMessage::End {})) => break,
                Ok(Some(other)) => warn!("ignoring ingress frame {other:?}"),
                Ok(None) => {
                    warn!("dispatcher disconnected without END");
                    break;
                }
                Err(e) => {
                    warn!("ingress: {e}");
                    break;
                }
            }
        }
        inbox.finish();
    })?;
    Ok((addr, handle))
}
