//! Live engine: a scheduler loop driving a [`StepExecutor`].

use std::collections::VecDeque;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};
use log::{debug, info};

use super::{BatchPlan, EngineConfig, EngineCore, EngineError, Request, TokenEvent};
use crate::client::ClientHandle;
use crate::clock::{wall_now, VirtualClock, VirtualTimestamp};
use crate::device::{BufferHandle, DeviceAllocator, MIB};
use crate::predictor::RuntimePredictor;

type Ack = Box<dyn FnOnce() + Send>;

struct InboxState {
    queue: VecDeque<Request>,
    eos: bool,
    parked: bool,
    deferred: Vec<Ack>,
    /// No future submission arrives before this time.
    watermark: VirtualTimestamp,
}

impl Default for InboxState {
    fn default() -> Self {
        InboxState {
            queue: VecDeque::new(),
            eos: false,
            parked: false,
            deferred: Vec::new(),
            watermark: VirtualTimestamp::ZERO,
        }
    }
}

/// Hand-off between request ingress and the scheduler.
///
/// While the engine is parked (idle and exempt from time barriers),
/// submission acks are withheld until the engine has re-entered the barrier
/// with its next step. The dispatcher therefore cannot jump past a request
/// the engine has not yet started on.
///
/// Each submission also announces when the next one is due, which lets the
/// engine hold a batch until every arrival up to its start time is known.
#[derive(Default)]
pub struct Inbox {
    state: Mutex<InboxState>,
    changed: Condvar,
}

impl Inbox {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Queues `r`. `next_arrival` is the arrival time of the following
    /// submission, `None` if unknown.
    pub fn submit(&self, r: Request, next_arrival: Option<VirtualTimestamp>, ack: Ack) {
        let mut s = self.state.lock().unwrap();
        let arrival = r.arrival_virtual;
        s.watermark = next_arrival.unwrap_or(arrival);
        s.queue.push_back(r);
        // a follow-up due at the same instant needs no time to pass, so it
        // cannot run ahead of the engine
        let same_instant = next_arrival.is_some_and(|n| n <= arrival);
        if s.parked && !same_instant {
            s.deferred.push(ack);
        } else {
            drop(s);
            ack();
            s = self.state.lock().unwrap();
        }
        drop(s);
        self.changed.notify_all();
    }

    /// No more submissions will follow.
    pub fn finish(&self) {
        let mut s = self.state.lock().unwrap();
        s.eos = true;
        s.watermark = VirtualTimestamp::MAX;
        drop(s);
        self.changed.notify_all();
    }

    /// Blocks until every submission arriving at or before `t` is queued.
    ///
    /// Virtual time is already at or past `t` here, so the dispatcher can
    /// reach the missing arrivals without a barrier round; withheld acks are
    /// released so it is not stuck waiting on us.
    fn wait_for_arrivals(&self, t: VirtualTimestamp, abort: &AtomicBool) {
        let mut s = self.state.lock().unwrap();
        while s.watermark <= t && !s.eos && !abort.load(Ordering::SeqCst) {
            let acks = std::mem::take(&mut s.deferred);
            if !acks.is_empty() {
                drop(s);
                for ack in acks {
                    ack();
                }
                s = self.state.lock().unwrap();
                continue;
            }
            s = self.changed.wait_timeout(s, Duration::from_millis(50)).unwrap().0;
        }
    }

    fn drain(&self) -> Vec<Request> {
        self.state.lock().unwrap().queue.drain(..).collect()
    }

    fn is_finished(&self) -> bool {
        let s = self.state.lock().unwrap();
        s.eos && s.queue.is_empty()
    }

    /// Marks the engine parked if nothing is waiting.
    fn try_park(&self) -> bool {
        let mut s = self.state.lock().unwrap();
        if s.queue.is_empty() && !s.eos {
            s.parked = true;
            true
        } else {
            false
        }
    }

    /// The engine holds a barrier target again; release withheld acks.
    pub fn commit(&self) {
        let acks = {
            let mut s = self.state.lock().unwrap();
            s.parked = false;
            std::mem::take(&mut s.deferred)
        };
        for ack in acks {
            ack();
        }
    }

    fn wait_for_work(&self, abort: &AtomicBool) {
        let mut s = self.state.lock().unwrap();
        while s.queue.is_empty() && !s.eos && !abort.load(Ordering::SeqCst) {
            s = self.changed.wait_timeout(s, Duration::from_millis(50)).unwrap().0;
        }
    }
}

/// Advances time for one batch.
pub trait StepExecutor: Send {
    fn now(&self) -> VirtualTimestamp;

    /// Runs a batch over `[start, start + duration]` of virtual time and
    /// returns the virtual time at completion. `on_committed` is called once
    /// the time barrier holds this step's target.
    fn execute(
        &mut self,
        plan: &BatchPlan,
        start: VirtualTimestamp,
        duration: Duration,
        on_committed: &mut dyn FnMut(),
    ) -> Result<VirtualTimestamp, EngineError>;

    /// Called before the engine idles; must not block time barriers
    /// afterwards.
    fn park(&mut self) -> Result<(), EngineError>;

    fn shutdown(&mut self) -> Result<(), EngineError>;
}

/// Bytes of host-backed scratch each worker uses for batch metadata.
const METADATA_BYTES: u64 = MIB;

/// Per-worker device state: the KV pool (unbacked) and a metadata buffer
/// through which every batch description passes.
struct DeviceContext {
    device: DeviceAllocator,
    kv_pool: BufferHandle,
    metadata: BufferHandle,
}

impl DeviceContext {
    fn new(config: &EngineConfig) -> Result<Self, EngineError> {
        let mut device = DeviceAllocator::new(config.device_capacity_bytes);
        let kv_pool = device.alloc(config.kv_pool_bytes())?;
        let metadata = device.alloc(METADATA_BYTES)?;
        Ok(DeviceContext {
            device,
            kv_pool,
            metadata,
        })
    }

    /// Uploads the batch description, reads it back as the control plane
    /// would, and "writes" kernel outputs into the KV pool.
    fn stage(&mut self, plan_bytes: &[u8]) -> Result<(), EngineError> {
        let len = plan_bytes.len() as u64;
        self.device.write(self.metadata, 0, &(len as u32).to_le_bytes())?;
        self.device.write(self.metadata, 4, plan_bytes)?;
        let header = self.device.read(self.metadata, 0, 4)?;
        let n = u32::from_le_bytes(header.try_into().expect("4 bytes")) as u64;
        let back = self.device.read(self.metadata, 4, n)?;
        if back != plan_bytes {
            return Err(EngineError::Invariant("batch metadata corrupted on device".into()));
        }
        self.device.write(self.kv_pool, 0, plan_bytes)?;
        Ok(())
    }
}

fn encode_plan(plan: &BatchPlan) -> Vec<u8> {
    serde_json::to_vec(&plan.composition).expect("plans serialize")
}

/// Wall-clock execution: sleeps for each predicted duration.
pub struct SleepExecutor {
    device: DeviceContext,
}

impl SleepExecutor {
    pub fn new(config: &EngineConfig) -> Result<Self, EngineError> {
        Ok(SleepExecutor {
            device: DeviceContext::new(config)?,
        })
    }
}

impl StepExecutor for SleepExecutor {
    fn now(&self) -> VirtualTimestamp {
        wall_now()
    }

    fn execute(
        &mut self,
        plan: &BatchPlan,
        start: VirtualTimestamp,
        duration: Duration,
        on_committed: &mut dyn FnMut(),
    ) -> Result<VirtualTimestamp, EngineError> {
        self.device.stage(&encode_plan(plan))?;
        on_committed();
        let target = start.saturating_add(duration);
        loop {
            let left = target.saturating_duration_since(wall_now());
            if left.is_zero() {
                break;
            }
            thread::sleep(left);
        }
        Ok(wall_now())
    }

    fn park(&mut self) -> Result<(), EngineError> {
        Ok(())
    }

    fn shutdown(&mut self) -> Result<(), EngineError> {
        Ok(())
    }
}

enum WorkerCmd {
    Step {
        plan: Arc<Vec<u8>>,
        stage_targets: Arc<Vec<VirtualTimestamp>>,
    },
    Park,
    Shutdown,
}

enum WorkerEvent {
    Committed,
    Parked(Result<(), EngineError>),
    Done(Result<(), EngineError>),
}

struct Worker {
    tx: Sender<WorkerCmd>,
    thread: Option<JoinHandle<()>>,
    stage: u32,
}

/// Jump-based execution across `workers_per_replica x pp_stages` actors.
///
/// Tensor-parallel peers rendezvous before each step and jump to the same
/// target. Pipeline stage `s` covers `[start + s*d/P, start + (s+1)*d/P]`
/// and waits for stage `s - 1` in a two-stage collective; later stages idle
/// inside that collective, so only stage 0 parks.
pub struct TimewarpExecutor {
    workers: Vec<Worker>,
    events: Receiver<WorkerEvent>,
    clock: Arc<VirtualClock>,
    tp: u32,
    pp: u32,
    parked: bool,
}

fn hop_group(from: u32) -> String {
    format!("pp/{from}-{}", from + 1)
}

struct WorkerCtx {
    client: ClientHandle,
    stage: u32,
    tp: u32,
    pp: u32,
    device: DeviceContext,
    events: Sender<WorkerEvent>,
}

impl WorkerCtx {
    fn step(&mut self, plan: &[u8], targets: &[VirtualTimestamp]) -> Result<(), EngineError> {
        self.device.stage(plan)?;
        if self.tp > 1 {
            self.client.rendezvous(&format!("tp/{}", self.stage), self.tp)?;
        }
        let events = &self.events;
        if self.stage == 0 {
            self.client.jump_to_with(targets[0], || {
                let _ = events.send(WorkerEvent::Committed);
            })?;
        } else {
            self.client.jump_to(targets[self.stage as usize])?;
        }
        if self.pp > 1 {
            if self.stage + 1 < self.pp {
                self.client.rendezvous(&hop_group(self.stage), 2 * self.tp)?;
            }
            self.client.rendezvous("step", self.tp * self.pp)?;
        }
        Ok(())
    }

    fn run(mut self, rx: Receiver<WorkerCmd>) {
        loop {
            if self.stage > 0 {
                if let Err(e) = self.client.rendezvous(&hop_group(self.stage - 1), 2 * self.tp) {
                    let _ = self.events.send(WorkerEvent::Done(Err(e.into())));
                    return;
                }
            }
            match rx.recv() {
                Ok(WorkerCmd::Step { plan, stage_targets }) => {
                    let r = self.step(&plan, &stage_targets);
                    let failed = r.is_err();
                    let _ = self.events.send(WorkerEvent::Done(r));
                    if failed {
                        return;
                    }
                }
                Ok(WorkerCmd::Park) => {
                    let r = self.client.park().map_err(EngineError::from);
                    let _ = self.events.send(WorkerEvent::Parked(r));
                }
                Ok(WorkerCmd::Shutdown) | Err(_) => {
                    if self.pp > 1 && self.stage + 1 < self.pp {
                        let _ = self.client.rendezvous(&hop_group(self.stage), 2 * self.tp);
                    }
                    self.client.deregister();
                    return;
                }
            }
        }
    }
}

impl TimewarpExecutor {
    /// Starts one worker per client. `clients` must hold
    /// `workers_per_replica * pp_stages` registered actors, stage-major.
    pub fn start(config: &EngineConfig, clients: Vec<ClientHandle>) -> Result<Self, EngineError> {
        let (tp, pp) = (config.workers_per_replica, config.pp_stages);
        if clients.len() != (tp * pp) as usize {
            return Err(EngineError::InvalidConfig(format!(
                "expected {} worker clients, got {}",
                tp * pp,
                clients.len()
            )));
        }
        let clock = clients[0].clock().clone();
        let (events_tx, events) = unbounded();
        let mut workers = Vec::new();
        for (i, client) in clients.into_iter().enumerate() {
            let stage = i as u32 / tp;
            let ctx = WorkerCtx {
                client,
                stage,
                tp,
                pp,
                device: DeviceContext::new(config)?,
                events: events_tx.clone(),
            };
            let (tx, rx) = unbounded();
            let thread = thread::Builder::new()
                .name(format!("worker-s{stage}-{}", i as u32 % tp))
                .spawn(move || ctx.run(rx))?;
            workers.push(Worker {
                tx,
                thread: Some(thread),
                stage,
            });
        }
        Ok(TimewarpExecutor {
            workers,
            events,
            clock,
            tp,
            pp,
            parked: false,
        })
    }

    fn recv(&self) -> Result<WorkerEvent, EngineError> {
        self.events
            .recv()
            .map_err(|_| EngineError::Worker("all workers exited".into()))
    }
}

impl StepExecutor for TimewarpExecutor {
    fn now(&self) -> VirtualTimestamp {
        self.clock.virtual_now()
    }

    fn execute(
        &mut self,
        plan: &BatchPlan,
        start: VirtualTimestamp,
        duration: Duration,
        on_committed: &mut dyn FnMut(),
    ) -> Result<VirtualTimestamp, EngineError> {
        let d = duration.as_nanos() as i64;
        let pp = self.pp as i64;
        let targets: Arc<Vec<VirtualTimestamp>> =
            Arc::new((1..=pp).map(|s| start.add_nanos(d * s / pp)).collect());
        let bytes = Arc::new(encode_plan(plan));
        for w in &self.workers {
            w.tx.send(WorkerCmd::Step {
                plan: bytes.clone(),
                stage_targets: targets.clone(),
            })
            .map_err(|_| EngineError::Worker("worker exited".into()))?;
        }
        self.parked = false;
        let (mut committed, mut done) = (0, 0);
        while done < self.workers.len() {
            match self.recv()? {
                WorkerEvent::Committed => {
                    committed += 1;
                    if committed == self.tp {
                        on_committed();
                    }
                }
                WorkerEvent::Done(Ok(())) => done += 1,
                WorkerEvent::Done(Err(e)) => return Err(e),
                WorkerEvent::Parked(_) => return Err(EngineError::Worker("unexpected park reply".into())),
            }
        }
        Ok(self.clock.virtual_now())
    }

    fn park(&mut self) -> Result<(), EngineError> {
        if self.parked {
            return Ok(());
        }
        let first_stage: Vec<_> = self.workers.iter().filter(|w| w.stage == 0).collect();
        for w in &first_stage {
            w.tx.send(WorkerCmd::Park)
                .map_err(|_| EngineError::Worker("worker exited".into()))?;
        }
        for _ in 0..first_stage.len() {
            match self.recv()? {
                WorkerEvent::Parked(r) => r?,
                WorkerEvent::Done(Err(e)) => return Err(e),
                _ => return Err(EngineError::Worker("unexpected reply while parking".into())),
            }
        }
        self.parked = true;
        Ok(())
    }

    fn shutdown(&mut self) -> Result<(), EngineError> {
        for w in &self.workers {
            let _ = w.tx.send(WorkerCmd::Shutdown);
        }
        for w in &mut self.workers {
            if let Some(t) = w.thread.take() {
                t.join().map_err(|_| EngineError::Worker("worker panicked".into()))?;
            }
        }
        Ok(())
    }
}

impl Drop for TimewarpExecutor {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

#[derive(Debug, Clone, Default)]
pub struct EngineOutcome {
    pub events: Vec<TokenEvent>,
    pub steps: u64,
    pub finished_requests: u64,
    /// Wall clock when the last request finished.
    pub end_wall: Option<VirtualTimestamp>,
}

/// Runs the scheduler until the inbox is closed and all work is done.
///
/// Steps are laid out on an absolute timeline: a batch starts when the
/// previous one ended (or at its first request's arrival if the engine was
/// idle), regardless of how long scheduling took in wall time.
pub fn run_engine(
    config: &EngineConfig,
    predictor: &dyn RuntimePredictor,
    executor: &mut dyn StepExecutor,
    inbox: &Inbox,
    mut sink: Option<&mut dyn Write>,
    abort: &AtomicBool,
) -> Result<EngineOutcome, EngineError> {
    let mut core = EngineCore::new(config.clone())?;
    let mut out = EngineOutcome::default();
    let mut cursor = VirtualTimestamp::ZERO;
    let result = (|| {
        loop {
            if abort.load(Ordering::SeqCst) {
                return Err(EngineError::Aborted);
            }
            for r in inbox.drain() {
                core.enqueue(r)?;
            }
            let Some(start) = core.next_start(cursor) else {
                if inbox.is_finished() {
                    return Ok(());
                }
                if inbox.try_park() {
                    executor.park()?;
                    debug!("engine parked");
                    inbox.wait_for_work(abort);
                }
                continue;
            };
            if config.mode == super::ExecMode::Timewarp {
                // virtual time may have run past `start` on the wall clock
                // before a submission due by then was handed over
                inbox.wait_for_arrivals(start, abort);
                for r in inbox.drain() {
                    core.enqueue(r)?;
                }
            }
            let plan = core.form_batch(start);
            if plan.is_empty() {
                return Err(EngineError::Invariant("no schedulable work despite pending requests".into()));
            }
            let duration = predictor.predict(&plan.composition, &config.hardware)?;
            let stamp = executor.execute(&plan, start, duration, &mut || inbox.commit())?;
            cursor = start.saturating_add(duration);
            let events = core.complete_step(&plan, stamp)?;
            core.check_invariants()?;
            out.steps += 1;
            if let Some(w) = sink.as_deref_mut() {
                for e in &events {
                    serde_json::to_writer(&mut *w, e).map_err(std::io::Error::from)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            if !events.is_empty() && !core.has_work() {
                out.end_wall = Some(wall_now());
            }
            out.events.extend(events);
        }
    })();
    inbox.commit();
    let shutdown = executor.shutdown();
    out.finished_requests = core.finished_count();
    info!("engine stopped after {} steps, {} requests finished", out.steps, out.finished_requests);
    if let Some(w) = sink {
        let _ = w.flush();
    }
    result?;
    shutdown?;
    Ok(out)
}
