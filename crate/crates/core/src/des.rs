//! Single-threaded discrete-event reference for the engine.
//!
//! Uses the same [`EngineCore`] as the live engine but advances an exact
//! event queue instead of a clock, so it has no coordination overhead and no
//! timing noise. Times are nanoseconds from the workload epoch.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::clock::VirtualTimestamp;
use crate::engine::{BatchPlan, EngineConfig, EngineCore, EngineError, Request, TokenEvent};
use crate::harness::workload::PlannedArrival;
use crate::predictor::RuntimePredictor;

#[derive(Debug, Clone, Default)]
pub struct DesOutcome {
    pub events: Vec<TokenEvent>,
    pub steps: u64,
    pub end: VirtualTimestamp,
    /// Sum of predicted step durations.
    pub busy_ns: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    // step completions at time t are applied before arrivals at t; both
    // happen before the next batch is formed
    StepEnd,
    Arrival(usize),
}

pub fn simulate(
    config: &EngineConfig,
    predictor: &dyn RuntimePredictor,
    arrivals: &[PlannedArrival],
) -> Result<DesOutcome, EngineError> {
    let mut core = EngineCore::new(config.clone())?;
    let mut heap: BinaryHeap<Reverse<(i64, Kind)>> = arrivals
        .iter()
        .enumerate()
        .map(|(i, a)| Reverse((a.offset_ns, Kind::Arrival(i))))
        .collect();
    let mut in_flight: Option<BatchPlan> = None;
    let mut out = DesOutcome::default();

    while let Some(Reverse((t, _))) = heap.peek().copied() {
        let now = VirtualTimestamp::from_nanos(t);
        while let Some(Reverse((te, kind))) = heap.peek().copied() {
            if te != t {
                break;
            }
            heap.pop();
            match kind {
                Kind::Arrival(i) => {
                    let a = &arrivals[i];
                    core.enqueue(Request::new(a.request_id, now, a.prompt_tokens, a.output_tokens))?;
                }
                Kind::StepEnd => {
                    let plan = in_flight.take().expect("step in flight");
                    out.events.extend(core.complete_step(&plan, now)?);
                    core.check_invariants()?;
                    out.end = now;
                }
            }
        }
        if in_flight.is_none() && core.next_start(now).is_some() {
            let plan = core.form_batch(now);
            if !plan.is_empty() {
                let d = predictor.predict(&plan.composition, &config.hardware)?;
                let d = d.as_nanos() as i64;
                out.busy_ns += d;
                out.steps += 1;
                heap.push(Reverse((t + d, Kind::StepEnd)));
                in_flight = Some(plan);
            }
        }
    }
    if core.has_work() {
        return Err(EngineError::Invariant("simulation ended with unfinished requests".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TokenKind;
    use crate::predictor::ConstantPredictor;
    use std::time::Duration;

    const MS: i64 = 1_000_000;

    fn arrival(id: u64, ms: i64, prompt: u32, output: u32) -> PlannedArrival {
        PlannedArrival {
            request_id: id,
            offset_ns: ms * MS,
            prompt_tokens: prompt,
            output_tokens: output,
        }
    }

    fn constant(ms: u64) -> ConstantPredictor {
        ConstantPredictor {
            duration: Duration::from_millis(ms),
        }
    }

    #[test]
    fn single_request_timeline() {
        let out = simulate(&EngineConfig::default(), &constant(10), &[arrival(1, 0, 512, 2)]).unwrap();
        let got: Vec<_> = out.events.iter().map(|e| (e.kind, e.virtual_ts_ns.as_nanos() / MS)).collect();
        assert_eq!(
            got,
            vec![
                (TokenKind::FirstToken, 10),
                (TokenKind::OutputToken, 20),
                (TokenKind::Finished, 20)
            ]
        );
    }

    #[test]
    fn request_arriving_mid_batch_waits() {
        // A at 0 needs a 500ms batch; B arrives at 200ms and starts at 500ms
        let out = simulate(
            &EngineConfig::default(),
            &constant(500),
            &[arrival(0, 0, 16, 1), arrival(1, 200, 16, 1)],
        )
        .unwrap();
        let first_b = out
            .events
            .iter()
            .find(|e| e.request_id == 1 && e.kind == TokenKind::FirstToken)
            .unwrap();
        assert_eq!(first_b.virtual_ts_ns.as_nanos(), 1000 * MS);
    }

    #[test]
    fn simultaneous_arrivals_share_a_batch() {
        let out = simulate(
            &EngineConfig::default(),
            &constant(5),
            &[arrival(0, 3, 16, 1), arrival(1, 3, 16, 1)],
        )
        .unwrap();
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn kv_pressure_delays_admission() {
        let config = EngineConfig {
            kv_block_tokens: 16,
            kv_capacity_blocks: 4,
            ..Default::default()
        };
        let out = simulate(&config, &constant(1), &[arrival(0, 0, 48, 16), arrival(1, 0, 48, 16)]).unwrap();
        let fin0 = out
            .events
            .iter()
            .find(|e| e.request_id == 0 && e.kind == TokenKind::Finished)
            .unwrap()
            .virtual_ts_ns;
        let first1 = out
            .events
            .iter()
            .find(|e| e.request_id == 1 && e.kind == TokenKind::FirstToken)
            .unwrap()
            .virtual_ts_ns;
        assert!(first1 > fin0);
    }

    #[test]
    fn empty_workload() {
        let out = simulate(&EngineConfig::default(), &constant(1), &[]).unwrap();
        assert!(out.events.is_empty());
    }
}
