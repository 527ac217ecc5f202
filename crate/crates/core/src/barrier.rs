//! The Timekeeper's barrier state machine, independent of any transport.
//!
//! Every input carries the wall time at which it is processed and every output
//! is pushed to an [`Effect`] list, so the same machine drives both the
//! threaded TCP server and the deterministic protocol simulator.
//!
//! Rules:
//! * A round resolves when every *effective* actor has a pending target.
//!   Actors blocked in a collective or parked (jump target
//!   [`VirtualTimestamp::MAX`], meaning "no deadline") are exempt.
//! * Resolution takes `t_min` over pending targets and, if wall time is still
//!   below it, raises the offset to `t_min - wall`. The offset never drops.
//! * An update is broadcast whenever some pending target is still ahead of
//!   wall time. When `t_min` itself has already passed, this update carries
//!   the unchanged offset and only serves to wake the remaining waiters so
//!   they resubmit. Pending is cleared in every case.
//! * Consecutive broadcasts are at least `cooldown` of wall time apart; a
//!   round that completes early is deferred rather than resolved.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockOffset, VirtualTimestamp};
use crate::wire::{ErrorCode, Message, Role};

pub type ClientId = String;

/// Identifies the request connection a message arrived on.
pub type ConnId = u64;

pub const DEFAULT_COOLDOWN: Duration = Duration::from_micros(500);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServerError {
    #[error("registration is sealed")]
    RegistrationSealed,
    #[error("cannot seal registration with zero actors")]
    NoActors,
    #[error("unknown client {0:?}")]
    UnknownClient(String),
    #[error("client {0:?} is an observer and cannot drive time")]
    RoleViolation(String),
    #[error("group {group:?} expects {expected} members, client asked for {got}")]
    ExpectedMismatch { group: String, expected: u32, got: u32 },
    #[error("client {client:?} already waiting in group {group:?}")]
    AlreadyArrived { client: String, group: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl ServerError {
    pub fn code(&self) -> ErrorCode {
        match self {
            ServerError::RegistrationSealed => ErrorCode::RegistrationSealed,
            ServerError::NoActors => ErrorCode::NoActors,
            ServerError::UnknownClient(_) => ErrorCode::UnknownClient,
            ServerError::RoleViolation(_) => ErrorCode::RoleViolation,
            ServerError::ExpectedMismatch { .. } => ErrorCode::ExpectedMismatch,
            ServerError::AlreadyArrived { .. } => ErrorCode::AlreadyArrived,
            ServerError::InvalidRequest(_) => ErrorCode::InvalidRequest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    /// Probability that a broadcast is computed but never delivered.
    #[serde(default)]
    pub drop_broadcast_probability: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            drop_broadcast_probability: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierConfig {
    pub cooldown: Duration,
    /// Seal automatically once this many actors have registered.
    pub expect_actors: Option<usize>,
    pub faults: FaultConfig,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        BarrierConfig {
            cooldown: DEFAULT_COOLDOWN,
            expect_actors: None,
            faults: FaultConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub client_id: ClientId,
    pub role: Role,
    pub connected: bool,
    #[serde(skip)]
    conn: ConnId,
    pub parked: bool,
    pub in_collective: Option<String>,
}

impl ClientRecord {
    fn is_exempt(&self) -> bool {
        self.parked || self.in_collective.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveBarrier {
    pub group_id: String,
    pub generation: u64,
    pub expected: u32,
    pub arrived: BTreeSet<ClientId>,
}

/// Structured event log. One JSON line per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Register {
        wall: VirtualTimestamp,
        client_id: ClientId,
        role: Role,
    },
    Seal {
        wall: VirtualTimestamp,
        num_actors: usize,
    },
    JumpRequest {
        wall: VirtualTimestamp,
        client_id: ClientId,
        target: VirtualTimestamp,
    },
    Park {
        wall: VirtualTimestamp,
        client_id: ClientId,
    },
    CollectiveEnter {
        wall: VirtualTimestamp,
        client_id: ClientId,
        group_id: String,
        expected: u32,
    },
    CollectiveRelease {
        wall: VirtualTimestamp,
        group_id: String,
        generation: u64,
        members: Vec<ClientId>,
    },
    Deregister {
        wall: VirtualTimestamp,
        client_id: ClientId,
        role: Role,
    },
    Deferred {
        wall: VirtualTimestamp,
        until: VirtualTimestamp,
    },
    Resolve {
        wall: VirtualTimestamp,
        t_min: VirtualTimestamp,
        pending: BTreeMap<ClientId, VirtualTimestamp>,
        broadcast: bool,
        offset: ClockOffset,
        seq: u64,
    },
    Broadcast {
        wall: VirtualTimestamp,
        #[serde(rename = "virtual")]
        virtual_time: VirtualTimestamp,
        offset: ClockOffset,
        seq: u64,
        delivered: bool,
    },
    Rejected {
        wall: VirtualTimestamp,
        request: String,
        error: ErrorCode,
        detail: String,
    },
}

impl LogRecord {
    pub fn wall(&self) -> VirtualTimestamp {
        match self {
            LogRecord::Register { wall, .. }
            | LogRecord::Seal { wall, .. }
            | LogRecord::JumpRequest { wall, .. }
            | LogRecord::Park { wall, .. }
            | LogRecord::CollectiveEnter { wall, .. }
            | LogRecord::CollectiveRelease { wall, .. }
            | LogRecord::Deregister { wall, .. }
            | LogRecord::Deferred { wall, .. }
            | LogRecord::Resolve { wall, .. }
            | LogRecord::Broadcast { wall, .. }
            | LogRecord::Rejected { wall, .. } => *wall,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Send { conn: ConnId, msg: Message },
    Broadcast(Message),
    Log(LogRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Shutdown,
}

/// Snapshot for operators: who the current round is waiting on and which
/// collectives are partially filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sealed: bool,
    pub num_actors: usize,
    pub effective_actors: usize,
    pub pending: BTreeMap<ClientId, VirtualTimestamp>,
    pub waiting_on: Vec<ClientId>,
    pub parked: Vec<ClientId>,
    pub stalled_collectives: Vec<CollectiveBarrier>,
    pub offset: ClockOffset,
    pub seq: u64,
    pub deferred_until: Option<VirtualTimestamp>,
}

#[derive(Debug)]
pub struct BarrierState {
    config: BarrierConfig,
    clients: BTreeMap<ClientId, ClientRecord>,
    pending: BTreeMap<ClientId, VirtualTimestamp>,
    num_actors: usize,
    sealed: bool,
    offset: ClockOffset,
    seq: u64,
    last_broadcast_wall: Option<VirtualTimestamp>,
    deferred_until: Option<VirtualTimestamp>,
    collectives: BTreeMap<String, CollectiveBarrier>,
    next_client: u64,
    rng: ChaCha8Rng,
}

impl BarrierState {
    pub fn new(config: BarrierConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.faults.seed);
        BarrierState {
            config,
            clients: BTreeMap::new(),
            pending: BTreeMap::new(),
            num_actors: 0,
            sealed: false,
            offset: ClockOffset::ZERO,
            seq: 0,
            last_broadcast_wall: None,
            deferred_until: None,
            collectives: BTreeMap::new(),
            next_client: 0,
            rng,
        }
    }

    pub fn offset(&self) -> ClockOffset {
        self.offset
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn num_actors(&self) -> usize {
        self.num_actors
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn pending(&self) -> &BTreeMap<ClientId, VirtualTimestamp> {
        &self.pending
    }

    pub fn client(&self, id: &str) -> Option<&ClientRecord> {
        self.clients.get(id)
    }

    pub fn collective(&self, group: &str) -> Option<&CollectiveBarrier> {
        self.collectives.get(group)
    }

    /// The frame sent to a new broadcast subscriber so it starts from the
    /// current state.
    pub fn current_update(&self) -> Message {
        Message::ClockUpdate {
            offset: self.offset,
            seq: self.seq,
        }
    }

    /// Wall time at which a cooldown-deferred round becomes eligible.
    pub fn next_deadline(&self) -> Option<VirtualTimestamp> {
        self.deferred_until
    }

    /// Processes one inbound request. Errors are also reported to the sender
    /// in the corresponding acknowledgement frame.
    pub fn handle(
        &mut self,
        conn: ConnId,
        msg: Message,
        now: VirtualTimestamp,
        out: &mut Vec<Effect>,
    ) -> Result<Control, ServerError> {
        match msg {
            Message::Register { role } => self.register(conn, role, now, out).map(|_| Control::Continue),
            Message::Seal { .. } => {
                let result = self.seal(now, out);
                out.push(Effect::Send {
                    conn,
                    msg: Message::Seal {
                        client_id: None,
                        error: result.as_ref().err().map(ServerError::code),
                    },
                });
                result.map(|_| Control::Continue)
            }
            Message::JumpRequest { client_id, target } => {
                let result = self.jump_request(&client_id, target, now, out);
                out.push(Effect::Send {
                    conn,
                    msg: Message::JumpAck {
                        error: result.as_ref().err().map(ServerError::code),
                    },
                });
                result.map(|_| Control::Continue)
            }
            Message::CollectiveEnter {
                client_id,
                group_id,
                expected,
            } => {
                let result = self.collective_enter(&client_id, &group_id, expected, now, out);
                if let Err(e) = &result {
                    let generation = self.collectives.get(&group_id).map_or(0, |g| g.generation);
                    out.push(Effect::Send {
                        conn,
                        msg: Message::CollectiveRelease {
                            group_id,
                            generation,
                            error: Some(e.code()),
                        },
                    });
                }
                result.map(|_| Control::Continue)
            }
            Message::Deregister { client_id } => self.deregister(&client_id, now, out).map(|_| Control::Continue),
            Message::Shutdown {} => Ok(Control::Shutdown),
            other => {
                let err = ServerError::InvalidRequest(format!("{} is server-originated", other.type_name()));
                self.reject(now, other.type_name(), &err, out);
                Err(err)
            }
        }
    }

    fn reject(&self, now: VirtualTimestamp, request: &str, err: &ServerError, out: &mut Vec<Effect>) {
        out.push(Effect::Log(LogRecord::Rejected {
            wall: now,
            request: request.to_string(),
            error: err.code(),
            detail: err.to_string(),
        }));
    }

    pub fn register(
        &mut self,
        conn: ConnId,
        role: Role,
        now: VirtualTimestamp,
        out: &mut Vec<Effect>,
    ) -> Result<ClientId, ServerError> {
        // Observers never hold the barrier, so they may join at any time.
        if self.sealed && role == Role::Actor {
            let err = ServerError::RegistrationSealed;
            self.reject(now, "REGISTER", &err, out);
            out.push(Effect::Send {
                conn,
                msg: Message::RegisterAck {
                    client_id: String::new(),
                    offset: self.offset,
                    seq: self.seq,
                    error: Some(err.code()),
                },
            });
            return Err(err);
        }
        let prefix = match role {
            Role::Actor => "actor",
            Role::Observer => "observer",
        };
        let client_id = format!("{prefix}-{}", self.next_client);
        self.next_client += 1;
        self.clients.insert(
            client_id.clone(),
            ClientRecord {
                client_id: client_id.clone(),
                role,
                connected: true,
                conn,
                parked: false,
                in_collective: None,
            },
        );
        if role == Role::Actor {
            self.num_actors += 1;
        }
        out.push(Effect::Log(LogRecord::Register {
            wall: now,
            client_id: client_id.clone(),
            role,
        }));
        out.push(Effect::Send {
            conn,
            msg: Message::RegisterAck {
                client_id: client_id.clone(),
                offset: self.offset,
                seq: self.seq,
                error: None,
            },
        });
        if let Some(n) = self.config.expect_actors {
            if !self.sealed && self.num_actors >= n {
                self.seal(now, out)?;
            }
        }
        Ok(client_id)
    }

    pub fn seal(&mut self, now: VirtualTimestamp, out: &mut Vec<Effect>) -> Result<(), ServerError> {
        if self.sealed {
            return Ok(());
        }
        if self.num_actors == 0 {
            let err = ServerError::NoActors;
            self.reject(now, "SEAL", &err, out);
            return Err(err);
        }
        self.sealed = true;
        out.push(Effect::Log(LogRecord::Seal {
            wall: now,
            num_actors: self.num_actors,
        }));
        self.try_resolve(now, out);
        Ok(())
    }

    fn actor_mut(&mut self, client_id: &str) -> Result<&mut ClientRecord, ServerError> {
        let rec = self
            .clients
            .get_mut(client_id)
            .ok_or_else(|| ServerError::UnknownClient(client_id.to_string()))?;
        if rec.role != Role::Actor {
            return Err(ServerError::RoleViolation(client_id.to_string()));
        }
        Ok(rec)
    }

    pub fn jump_request(
        &mut self,
        client_id: &str,
        target: VirtualTimestamp,
        now: VirtualTimestamp,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        let result = if target.as_nanos() <= 0 {
            Err(ServerError::InvalidRequest(format!("jump target {target} must be positive")))
        } else {
            self.actor_mut(client_id).map(|_| ())
        };
        if let Err(err) = result {
            self.reject(now, "JUMP_REQUEST", &err, out);
            return Err(err);
        }
        let rec = self.clients.get_mut(client_id).expect("checked above");
        rec.in_collective = None;
        if target == VirtualTimestamp::MAX {
            rec.parked = true;
            self.pending.remove(client_id);
            out.push(Effect::Log(LogRecord::Park {
                wall: now,
                client_id: client_id.to_string(),
            }));
        } else {
            rec.parked = false;
            self.pending.insert(client_id.to_string(), target);
            out.push(Effect::Log(LogRecord::JumpRequest {
                wall: now,
                client_id: client_id.to_string(),
                target,
            }));
        }
        self.try_resolve(now, out);
        Ok(())
    }

    pub fn collective_enter(
        &mut self,
        client_id: &str,
        group_id: &str,
        expected: u32,
        now: VirtualTimestamp,
        out: &mut Vec<Effect>,
    ) -> Result<(), ServerError> {
        if let Err(err) = self.check_collective_enter(client_id, group_id, expected) {
            self.reject(now, "COLLECTIVE_ENTER", &err, out);
            return Err(err);
        }
        let barrier = self
            .collectives
            .entry(group_id.to_string())
            .or_insert_with(|| CollectiveBarrier {
                group_id: group_id.to_string(),
                generation: 0,
                expected,
                arrived: BTreeSet::new(),
            });
        if barrier.arrived.is_empty() {
            barrier.expected = expected;
        }
        barrier.arrived.insert(client_id.to_string());
        let full = barrier.arrived.len() as u32 == barrier.expected;

        let rec = self.clients.get_mut(client_id).expect("checked above");
        rec.parked = false;
        rec.in_collective = Some(group_id.to_string());
        self.pending.remove(client_id);
        out.push(Effect::Log(LogRecord::CollectiveEnter {
            wall: now,
            client_id: client_id.to_string(),
            group_id: group_id.to_string(),
            expected,
        }));

        if full {
            self.release(group_id, now, out);
        }
        self.try_resolve(now, out);
        Ok(())
    }

    fn check_collective_enter(&mut self, client_id: &str, group_id: &str, expected: u32) -> Result<(), ServerError> {
        let rec = self.actor_mut(client_id)?;
        if let Some(g) = &rec.in_collective {
            return Err(ServerError::AlreadyArrived {
                client: client_id.to_string(),
                group: g.clone(),
            });
        }
        if expected == 0 {
            return Err(ServerError::InvalidRequest("collective expects zero members".into()));
        }
        if let Some(b) = self.collectives.get(group_id) {
            if !b.arrived.is_empty() && b.expected != expected {
                return Err(ServerError::ExpectedMismatch {
                    group: group_id.to_string(),
                    expected: b.expected,
                    got: expected,
                });
            }
        }
        Ok(())
    }

    fn release(&mut self, group_id: &str, now: VirtualTimestamp, out: &mut Vec<Effect>) {
        let barrier = self.collectives.get_mut(group_id).expect("released group exists");
        let generation = barrier.generation;
        let members: Vec<ClientId> = std::mem::take(&mut barrier.arrived).into_iter().collect();
        barrier.generation += 1;
        for m in &members {
            if let Some(rec) = self.clients.get_mut(m) {
                rec.in_collective = None;
                out.push(Effect::Send {
                    conn: rec.conn,
                    msg: Message::CollectiveRelease {
                        group_id: group_id.to_string(),
                        generation,
                        error: None,
                    },
                });
            }
        }
        out.push(Effect::Log(LogRecord::CollectiveRelease {
            wall: now,
            group_id: group_id.to_string(),
            generation,
            members,
        }));
    }

    pub fn deregister(&mut self, client_id: &str, now: VirtualTimestamp, out: &mut Vec<Effect>) -> Result<(), ServerError> {
        let Some(rec) = self.clients.remove(client_id) else {
            let err = ServerError::UnknownClient(client_id.to_string());
            self.reject(now, "DEREGISTER", &err, out);
            return Err(err);
        };
        if rec.role == Role::Actor {
            self.num_actors -= 1;
            self.pending.remove(client_id);
            if let Some(g) = &rec.in_collective {
                if let Some(b) = self.collectives.get_mut(g) {
                    b.arrived.remove(client_id);
                }
            }
        }
        out.push(Effect::Log(LogRecord::Deregister {
            wall: now,
            client_id: client_id.to_string(),
            role: rec.role,
        }));
        self.try_resolve(now, out);
        Ok(())
    }

    /// Deregisters every client registered over `conn`.
    pub fn disconnect(&mut self, conn: ConnId, now: VirtualTimestamp, out: &mut Vec<Effect>) {
        let ids: Vec<ClientId> = self
            .clients
            .values()
            .filter(|r| r.conn == conn)
            .map(|r| r.client_id.clone())
            .collect();
        for id in ids {
            let _ = self.deregister(&id, now, out);
        }
    }

    /// Fires a cooldown-deferred round once its deadline has passed.
    pub fn poll(&mut self, now: VirtualTimestamp, out: &mut Vec<Effect>) {
        if let Some(until) = self.deferred_until {
            if now >= until {
                self.try_resolve(now, out);
            }
        }
    }

    fn effective_actors(&self) -> impl Iterator<Item = &ClientRecord> {
        self.clients
            .values()
            .filter(|r| r.role == Role::Actor && !r.is_exempt())
    }

    fn round_complete(&self) -> bool {
        let effective = self.effective_actors().count();
        effective > 0 && self.pending.len() == effective
    }

    fn try_resolve(&mut self, now: VirtualTimestamp, out: &mut Vec<Effect>) {
        if !self.sealed || !self.round_complete() {
            self.deferred_until = None;
            return;
        }
        let t_min = *self.pending.values().min().expect("complete round is non-empty");
        let t_max = *self.pending.values().max().expect("complete round is non-empty");
        let broadcast = now < t_max;
        if broadcast {
            if let Some(last) = self.last_broadcast_wall {
                let ready = last.saturating_add(self.config.cooldown);
                if now < ready {
                    if self.deferred_until != Some(ready) {
                        self.deferred_until = Some(ready);
                        out.push(Effect::Log(LogRecord::Deferred { wall: now, until: ready }));
                    }
                    return;
                }
            }
        }
        self.deferred_until = None;

        if now < t_min {
            let step = ClockOffset::from_nanos(t_min.nanos_since(now)).expect("positive step");
            self.offset = self.offset.max(step);
        }
        let pending = std::mem::take(&mut self.pending);
        if broadcast {
            self.seq += 1;
        }
        out.push(Effect::Log(LogRecord::Resolve {
            wall: now,
            t_min,
            pending,
            broadcast,
            offset: self.offset,
            seq: self.seq,
        }));
        if broadcast {
            self.last_broadcast_wall = Some(now);
            let p = self.config.faults.drop_broadcast_probability;
            let delivered = !(p > 0.0 && self.rng.random::<f64>() < p);
            out.push(Effect::Log(LogRecord::Broadcast {
                wall: now,
                virtual_time: now.add_nanos(self.offset.as_nanos()),
                offset: self.offset,
                seq: self.seq,
                delivered,
            }));
            if delivered {
                out.push(Effect::Broadcast(self.current_update()));
            }
        }
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let effective: Vec<&ClientRecord> = self.effective_actors().collect();
        Diagnostics {
            sealed: self.sealed,
            num_actors: self.num_actors,
            effective_actors: effective.len(),
            pending: self.pending.clone(),
            waiting_on: effective
                .iter()
                .filter(|r| !self.pending.contains_key(&r.client_id))
                .map(|r| r.client_id.clone())
                .collect(),
            parked: self.clients.values().filter(|r| r.parked).map(|r| r.client_id.clone()).collect(),
            stalled_collectives: self
                .collectives
                .values()
                .filter(|b| !b.arrived.is_empty())
                .cloned()
                .collect(),
            offset: self.offset,
            seq: self.seq,
            deferred_until: self.deferred_until,
        }
    }
}
