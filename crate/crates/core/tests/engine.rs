mod common;

use std::sync::atomic::AtomicBool;
use std::sync::Mutex;

use timewarp::des;
use timewarp::engine::{EngineConfig, ExecMode, TokenKind};
use timewarp::harness::config::RunConfig;
use timewarp::harness::orchestrate::{run_in_process, run_oracle};
use timewarp::harness::workload::{PlannedArrival, TokenDist, WorkloadSpec};
use timewarp::predictor::{ConstantPredictor, PredictorConfig};

const MS: i64 = 1_000_000;

/// Live runs measure wall-clock latency; keep them from competing for CPU.
static TIMING: Mutex<()> = Mutex::new(());

fn arrival(id: u64, ms: i64, prompt: u32, output: u32) -> PlannedArrival {
    PlannedArrival {
        request_id: id,
        offset_ns: ms * MS,
        prompt_tokens: prompt,
        output_tokens: output,
    }
}

#[test]
fn des_kv_exhaustion_admits_after_finish() {
    let cfg = EngineConfig {
        kv_capacity_blocks: 10,
        ..Default::default()
    };
    let p = ConstantPredictor {
        duration: std::time::Duration::from_millis(10),
    };
    let out = des::simulate(&cfg, &p, &[arrival(0, 0, 100, 40), arrival(1, 0, 100, 2)]).unwrap();
    let at = |id, kind| {
        out.events
            .iter()
            .find(|e| e.request_id == id && e.kind == kind)
            .unwrap()
            .virtual_ts_ns
    };
    assert!(at(1, TokenKind::FirstToken) > at(0, TokenKind::Finished));
}

fn small_run(num_requests: usize, qps: f64, duration_ms: u64) -> RunConfig {
    RunConfig {
        workload: WorkloadSpec {
            prompt_tokens: TokenDist::Uniform { min: 32, max: 900 },
            output_tokens: TokenDist::Uniform { min: 1, max: 12 },
            ..WorkloadSpec::poisson(qps, 5, num_requests)
        },
        engine: EngineConfig {
            kv_capacity_blocks: 2048,
            ..Default::default()
        },
        predictor: PredictorConfig::constant_ms(duration_ms),
        timekeeper: Default::default(),
    }
}

fn assert_matches_oracle(cfg: &RunConfig, mode: ExecMode, tolerance_ns: i64) {
    let _serial = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let (_, oracle) = run_oracle(cfg).unwrap();
    let live = run_in_process(cfg, mode, &AtomicBool::new(false)).unwrap();
    let worst = common::schedule_deviation(&live.relative_events(), &oracle.events).unwrap();
    eprintln!("{mode}: worst deviation {worst}ns");
    assert!(worst <= tolerance_ns, "{mode}: worst deviation {worst}ns");
}

#[test]
fn timewarp_schedule_matches_oracle() {
    assert_matches_oracle(&small_run(40, 20.0, 10), ExecMode::Timewarp, 2 * MS);
}

#[test]
fn sleep_schedule_matches_oracle_within_a_step() {
    // real time can put an arrival on either side of a batch boundary
    assert_matches_oracle(&small_run(12, 40.0, 5), ExecMode::Sleep, 5 * MS + 3 * MS);
}

#[test]
fn tensor_and_pipeline_parallel_schedule_matches_oracle() {
    let mut cfg = small_run(20, 20.0, 8);
    cfg.engine.workers_per_replica = 2;
    cfg.engine.pp_stages = 3;
    // every step adds stage hand-offs on top of the single-replica path
    assert_matches_oracle(&cfg, ExecMode::Timewarp, 3 * MS);
}

#[test]
fn offline_batch_of_100_completes() {
    let mut cfg = small_run(100, 1e6, 5);
    cfg.workload.prompt_tokens = TokenDist::Fixed { value: 256 };
    let _serial = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let live = run_in_process(&cfg, ExecMode::Timewarp, &AtomicBool::new(false)).unwrap();
    assert_eq!(live.report.num_requests, 100);
    assert!(live.report.speedup > 1.0, "{}", live.report.speedup);
}

#[test]
fn aborted_run_reports_abort() {
    let cfg = small_run(50, 2.0, 5);
    let err = run_in_process(&cfg, ExecMode::Sleep, &AtomicBool::new(true)).unwrap_err();
    assert_eq!(err.exit_code(), 130, "{err}");
}
