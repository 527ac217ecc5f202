//! Replays planned arrivals against an engine.

use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;

use thiserror::Error;

use super::metrics::SubmissionRecord;
use super::workload::PlannedArrival;
use crate::client::{ClientError, ClientHandle};
use crate::clock::{wall_now, VirtualTimestamp};
use crate::engine::ingress::{EngineLink, LinkError};
use crate::engine::Request;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("dispatch aborted")]
    Aborted,
}

/// How the dispatcher waits for the next arrival.
pub enum DispatchClock<'a> {
    /// Jump virtual time through the Timekeeper.
    Timewarp(&'a ClientHandle),
    /// Sleep on the wall clock.
    Sleep,
}

impl DispatchClock<'_> {
    fn now(&self) -> VirtualTimestamp {
        match self {
            DispatchClock::Timewarp(c) => c.virtual_now(),
            DispatchClock::Sleep => wall_now(),
        }
    }

    fn wait_until(&self, target: VirtualTimestamp, abort: &AtomicBool) -> Result<(), DispatchError> {
        match self {
            DispatchClock::Timewarp(c) => {
                c.jump_to(target)?;
            }
            DispatchClock::Sleep => loop {
                if abort.load(Ordering::SeqCst) {
                    return Err(DispatchError::Aborted);
                }
                let left = target.saturating_duration_since(wall_now());
                if left.is_zero() {
                    break;
                }
                thread::sleep(left.min(std::time::Duration::from_millis(50)));
            },
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DispatchOutcome {
    /// Time zero of the workload.
    pub epoch_virtual: VirtualTimestamp,
    pub epoch_wall: VirtualTimestamp,
    pub submissions: Vec<SubmissionRecord>,
}

/// Submits each arrival once time reaches `epoch + offset`. In timewarp mode
/// requests are stamped with that target, in sleep mode with the wall clock
/// at submission. Closes the link and, in timewarp mode,
/// deregisters when done.
pub fn run_dispatcher(
    arrivals: &[PlannedArrival],
    link: &mut dyn EngineLink,
    clock: DispatchClock<'_>,
    abort: &AtomicBool,
) -> Result<DispatchOutcome, DispatchError> {
    let epoch_wall = wall_now();
    let epoch_virtual = clock.now();
    let mut submissions = Vec::with_capacity(arrivals.len());
    let result = (|| {
        for (i, a) in arrivals.iter().enumerate() {
            if abort.load(Ordering::SeqCst) {
                return Err(DispatchError::Aborted);
            }
            let target = epoch_virtual.add_nanos(a.offset_ns);
            if clock.now() < target {
                clock.wait_until(target, abort)?;
            }
            let stamp = match clock {
                // the jump lands exactly on the target; reading the clock
                // afterwards would add our own wake-up latency
                DispatchClock::Timewarp(_) => target,
                DispatchClock::Sleep => wall_now(),
            };
            let next = arrivals.get(i + 1).map(|n| epoch_virtual.add_nanos(n.offset_ns));
            link.submit(Request::new(a.request_id, stamp, a.prompt_tokens, a.output_tokens), next)?;
            submissions.push(SubmissionRecord {
                request_id: a.request_id,
                planned_offset_ns: a.offset_ns,
                arrival_virtual_ns: stamp,
                prompt_tokens: a.prompt_tokens,
                output_tokens: a.output_tokens,
            });
        }
        link.end()?;
        Ok(())
    })();
    if let DispatchClock::Timewarp(c) = clock {
        c.deregister();
    }
    result?;
    Ok(DispatchOutcome {
        epoch_virtual,
        epoch_wall,
        submissions,
    })
}
