//! Deterministic simulation of time-jump clients against [`BarrierState`].
//!
//! Wall time is simulated, messages take a configurable latency with jitter
//! (FIFO per channel, like TCP), and clients run the same request / ack /
//! timed-wait loop as [`crate::client::ClientHandle::jump_to`]. Used for
//! randomized protocol testing and by the browser demo.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierConfig, BarrierState, Effect, FaultConfig, LogRecord};
use crate::clock::{ClockOffset, VirtualTimestamp};
use crate::wire::{Message, Role};

/// Simulated wall time at which every run starts.
pub const SIM_EPOCH_NS: i64 = 1_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStep {
    /// Wall time spent computing before the jump is requested.
    pub compute_ns: i64,
    pub delta_ns: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorScript {
    pub start_ns: i64,
    pub steps: Vec<SimStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub actors: Vec<ActorScript>,
    pub latency_ns: i64,
    pub jitter_ns: i64,
    pub cooldown_ns: i64,
    pub drop_probability: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JumpOutcome {
    pub actor: usize,
    pub delta_ns: i64,
    pub start_wall: VirtualTimestamp,
    pub target: VirtualTimestamp,
    pub end_wall: VirtualTimestamp,
    pub end_virtual: VirtualTimestamp,
    pub requests: u32,
}

impl JumpOutcome {
    pub fn wall_ns(&self) -> i64 {
        self.end_wall.nanos_since(self.start_wall)
    }

    pub fn overshoot_ns(&self) -> i64 {
        self.end_virtual.nanos_since(self.target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimBroadcast {
    pub wall: VirtualTimestamp,
    pub offset: ClockOffset,
    pub seq: u64,
    pub delivered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub log: Vec<LogRecord>,
    pub jumps: Vec<JumpOutcome>,
    pub broadcasts: Vec<SimBroadcast>,
    /// Every actor ran its whole script.
    pub completed: bool,
    pub end_wall: VirtualTimestamp,
    /// Broadcasts that moved virtual time past a target some in-flight
    /// jump was still waiting for.
    pub overshoots: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    AwaitAck { target: i64, captured: u64 },
    Waiting { target: i64, captured: u64, token: u64 },
    Done,
}

#[derive(Debug)]
struct SimActor {
    id: String,
    step: usize,
    offset: i64,
    seq: u64,
    phase: Phase,
    start_wall: i64,
    requests: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    ActorStart(usize),
    ServerRecv(usize, Box<MessageKey>),
    Ack(usize),
    Update(usize, i64, u64),
    Timeout(usize, u64),
    ServerTimer,
}

// Messages are not Ord; wrap them so events can sit in the heap.
#[derive(Debug, Clone, PartialEq, Eq)]
struct MessageKey(Message);

impl PartialOrd for MessageKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MessageKey {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Channel {
    Request(usize),
    Reply(usize),
    Broadcast(usize),
}

struct Sim {
    cfg: SimConfig,
    state: BarrierState,
    actors: Vec<SimActor>,
    heap: BinaryHeap<Reverse<(i64, u64, Event)>>,
    counter: u64,
    rng: ChaCha8Rng,
    channel_clock: HashMap<Channel, i64>,
    timer_at: Option<i64>,
    result: SimResult,
}

impl Sim {
    fn push(&mut self, at: i64, ev: Event) {
        self.counter += 1;
        self.heap.push(Reverse((at, self.counter, ev)));
    }

    fn deliver(&mut self, now: i64, channel: Channel, ev: Event) {
        let jitter = if self.cfg.jitter_ns > 0 {
            self.rng.random_range(0..=self.cfg.jitter_ns)
        } else {
            0
        };
        let mut at = now + self.cfg.latency_ns + jitter;
        let last = self.channel_clock.entry(channel).or_insert(i64::MIN);
        at = at.max(*last);
        *last = at;
        self.push(at, ev);
    }

    fn server(&mut self, now: i64, conn: usize, msg: Message) {
        let mut effects = Vec::new();
        let _ = self
            .state
            .handle(conn as u64, msg, VirtualTimestamp::from_nanos(now), &mut effects);
        self.apply(now, effects);
    }

    fn apply(&mut self, now: i64, effects: Vec<Effect>) {
        for effect in effects {
            match effect {
                Effect::Send { conn, msg } => {
                    if let Message::JumpAck { .. } = msg {
                        let a = conn as usize;
                        self.deliver(now, Channel::Reply(a), Event::Ack(a));
                    }
                }
                Effect::Broadcast(Message::ClockUpdate { offset, seq }) => {
                    for a in 0..self.actors.len() {
                        self.deliver(now, Channel::Broadcast(a), Event::Update(a, offset.as_nanos(), seq));
                    }
                }
                Effect::Broadcast(_) => {}
                Effect::Log(record) => {
                    if let LogRecord::Broadcast {
                        wall,
                        offset,
                        seq,
                        delivered,
                        ..
                    } = &record
                    {
                        self.check_advancement(*wall, *offset, *seq);
                        self.result.broadcasts.push(SimBroadcast {
                            wall: *wall,
                            offset: *offset,
                            seq: *seq,
                            delivered: *delivered,
                        });
                    }
                    self.result.log.push(record);
                }
            }
        }
        if let Some(deadline) = self.state.next_deadline() {
            let d = deadline.as_nanos();
            if self.timer_at != Some(d) {
                self.timer_at = Some(d);
                self.push(d, Event::ServerTimer);
            }
        }
    }

    fn check_advancement(&mut self, wall: VirtualTimestamp, offset: ClockOffset, seq: u64) {
        let prev = self.result.broadcasts.last().map_or(0, |b| b.offset.as_nanos());
        if offset.as_nanos() <= prev {
            return;
        }
        let new_virtual = wall.as_nanos() + offset.as_nanos();
        for a in &self.actors {
            let target = match a.phase {
                Phase::AwaitAck { target, .. } | Phase::Waiting { target, .. } => target,
                _ => continue,
            };
            if new_virtual > target {
                self.result.overshoots.push(format!(
                    "broadcast seq {seq} moved virtual time to {new_virtual}, past {}'s target {target}",
                    a.id
                ));
            }
        }
    }

    fn virtual_now(&self, a: usize, now: i64) -> i64 {
        now + self.actors[a].offset
    }

    fn start_step(&mut self, a: usize, now: i64) {
        let script = &self.cfg.actors[a];
        let Some(step) = script.steps.get(self.actors[a].step).copied() else {
            self.actors[a].phase = Phase::Done;
            let id = self.actors[a].id.clone();
            self.deliver(now, Channel::Request(a), Event::ServerRecv(a, Box::new(MessageKey(Message::Deregister { client_id: id }))));
            return;
        };
        let target = self.virtual_now(a, now) + step.delta_ns;
        self.actors[a].start_wall = now;
        self.actors[a].requests = 0;
        self.submit(a, now, target);
    }

    fn submit(&mut self, a: usize, now: i64, target: i64) {
        let actor = &mut self.actors[a];
        actor.requests += 1;
        actor.phase = Phase::AwaitAck {
            target,
            captured: actor.seq,
        };
        let msg = Message::JumpRequest {
            client_id: actor.id.clone(),
            target: VirtualTimestamp::from_nanos(target),
        };
        self.deliver(now, Channel::Request(a), Event::ServerRecv(a, Box::new(MessageKey(msg))));
    }

    fn finish(&mut self, a: usize, now: i64, target: i64) {
        let actor = &mut self.actors[a];
        let step = self.cfg.actors[a].steps[actor.step];
        self.result.jumps.push(JumpOutcome {
            actor: a,
            delta_ns: step.delta_ns,
            start_wall: VirtualTimestamp::from_nanos(actor.start_wall),
            target: VirtualTimestamp::from_nanos(target),
            end_wall: VirtualTimestamp::from_nanos(now),
            end_virtual: VirtualTimestamp::from_nanos(now + actor.offset),
            requests: actor.requests,
        });
        actor.step += 1;
        actor.phase = Phase::Idle;
        let compute = self.cfg.actors[a].steps.get(actor.step).map_or(0, |s| s.compute_ns);
        self.push(now + compute, Event::ActorStart(a));
    }

    /// After an ack or an update: done, resubmit, or keep waiting.
    fn reevaluate(&mut self, a: usize, now: i64, target: i64, captured: u64) {
        if self.virtual_now(a, now) >= target {
            self.finish(a, now, target);
        } else if self.actors[a].seq > captured {
            self.submit(a, now, target);
        } else {
            self.counter += 1;
            let token = self.counter;
            self.actors[a].phase = Phase::Waiting {
                target,
                captured,
                token,
            };
            let remaining = target - self.virtual_now(a, now);
            self.push(now + remaining, Event::Timeout(a, token));
        }
    }

    fn step(&mut self, now: i64, ev: Event) {
        match ev {
            Event::ActorStart(a) => self.start_step(a, now),
            Event::ServerRecv(a, msg) => self.server(now, a, msg.0),
            Event::ServerTimer => {
                self.timer_at = None;
                let mut effects = Vec::new();
                self.state.poll(VirtualTimestamp::from_nanos(now), &mut effects);
                self.apply(now, effects);
            }
            Event::Ack(a) => {
                if let Phase::AwaitAck { target, captured } = self.actors[a].phase {
                    self.reevaluate(a, now, target, captured);
                }
            }
            Event::Update(a, offset, seq) => {
                let actor = &mut self.actors[a];
                if seq > actor.seq {
                    actor.seq = seq;
                    actor.offset = actor.offset.max(offset);
                }
                if let Phase::Waiting { target, captured, .. } = actor.phase {
                    if actor.seq > captured {
                        self.reevaluate(a, now, target, captured);
                    }
                }
            }
            Event::Timeout(a, token) => {
                if let Phase::Waiting { target, token: t, .. } = self.actors[a].phase {
                    if t == token {
                        debug_assert!(self.virtual_now(a, now) >= target);
                        self.finish(a, now, target);
                    }
                }
            }
        }
    }
}

pub fn simulate(cfg: &SimConfig) -> SimResult {
    let mut state = BarrierState::new(BarrierConfig {
        cooldown: Duration::from_nanos(cfg.cooldown_ns.max(0) as u64),
        expect_actors: None,
        faults: FaultConfig {
            drop_broadcast_probability: cfg.drop_probability,
            seed: cfg.seed,
        },
    });
    let start = VirtualTimestamp::from_nanos(SIM_EPOCH_NS);
    let mut log_effects = Vec::new();
    let mut actors = Vec::new();
    for a in 0..cfg.actors.len() {
        let id = state
            .register(a as u64, Role::Actor, start, &mut log_effects)
            .expect("registration before seal");
        actors.push(SimActor {
            id,
            step: 0,
            offset: 0,
            seq: 0,
            phase: Phase::Idle,
            start_wall: SIM_EPOCH_NS,
            requests: 0,
        });
    }
    let mut sim = Sim {
        cfg: cfg.clone(),
        state,
        actors,
        heap: BinaryHeap::new(),
        counter: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
        channel_clock: HashMap::new(),
        timer_at: None,
        result: SimResult {
            log: Vec::new(),
            jumps: Vec::new(),
            broadcasts: Vec::new(),
            completed: false,
            end_wall: start,
            overshoots: Vec::new(),
        },
    };
    if !cfg.actors.is_empty() {
        let _ = sim.state.seal(start, &mut log_effects);
    }
    sim.apply(SIM_EPOCH_NS, log_effects);
    for (a, script) in cfg.actors.iter().enumerate() {
        let first = script.steps.first().map_or(0, |s| s.compute_ns);
        sim.push(SIM_EPOCH_NS + script.start_ns + first, Event::ActorStart(a));
    }

    let mut now = SIM_EPOCH_NS;
    while let Some(Reverse((at, _, ev))) = sim.heap.pop() {
        now = at;
        sim.step(now, ev);
    }
    sim.result.end_wall = VirtualTimestamp::from_nanos(now);
    sim.result.completed = sim.actors.iter().all(|a| a.phase == Phase::Done);
    sim.result
}

/// A random schedule: `actors` actors with up to `max_steps` jumps each.
pub fn random_config(seed: u64, actors: usize, max_steps: usize) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scripts = (0..actors)
        .map(|_| ActorScript {
            start_ns: rng.random_range(0..2_000_000),
            steps: (0..rng.random_range(1..=max_steps))
                .map(|_| SimStep {
                    compute_ns: rng.random_range(0..500_000),
                    delta_ns: rng.random_range(1..=50_000_000),
                })
                .collect(),
        })
        .collect();
    SimConfig {
        actors: scripts,
        latency_ns: rng.random_range(10_000..200_000),
        jitter_ns: rng.random_range(0..100_000),
        cooldown_ns: *[0, 500_000, 2_000_000].get(rng.random_range(0..3)).unwrap(),
        drop_probability: *[0.0, 0.0, 0.2, 1.0].get(rng.random_range(0..4)).unwrap(),
        seed,
    }
}
