//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Takes a few minutes: the sleep-mode baselines run
//! in real time.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::thread;
use std::time::{Duration, Instant};

use timewarp::barrier::LogRecord;
use timewarp::client::ClientHandle;
use timewarp::des;
use timewarp::device::{BufferClass, DeviceAllocator, DeviceError, DEFAULT_THRESHOLD, MIB};
use timewarp::engine::{EngineConfig, ExecMode, Policy};
use timewarp::harness::config::RunConfig;
use timewarp::harness::metrics::{compare_runs, Comparison};
use timewarp::harness::orchestrate::{run_in_process, run_oracle, RunArtifacts};
use timewarp::harness::workload::{generate_arrivals, TokenDist, WorkloadSpec};
use timewarp::predictor::{LinearPredictor, PredictorConfig};
use timewarp::protocol_sim::{random_config, simulate};
use timewarp::server::{self, ServerConfig};
use timewarp::wire::Role;

const MS: i64 = 1_000_000;
const J_NS: i64 = 500_000;
const SEED: u64 = 20_240_601;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn constant_run(qps: f64, duration_ms: u64, num_requests: usize) -> RunConfig {
    RunConfig {
        workload: WorkloadSpec::poisson(qps, SEED, num_requests),
        engine: EngineConfig {
            policy: Policy::Mixed,
            ..Default::default()
        },
        predictor: PredictorConfig::constant_ms(duration_ms),
        timekeeper: Default::default(),
    }
}

fn run(cfg: &RunConfig, mode: ExecMode) -> Result<RunArtifacts, String> {
    run_in_process(cfg, mode, &AtomicBool::new(false)).map_err(|e| format!("{mode} run failed: {e}"))
}

fn worst_error(c: &Comparison) -> f64 {
    [c.ttft.p50, c.ttft.p99, c.tpot.p50, c.tpot.p99]
        .into_iter()
        .fold(0.0, f64::max)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

fn oracle_deviation(cfg: &RunConfig, live: &RunArtifacts) -> Result<i64, String> {
    let (_, oracle) = run_oracle(cfg).map_err(|e| e.to_string())?;
    common::schedule_deviation(&live.relative_events(), &oracle.events)
        .ok_or_else(|| "event schedules differ in shape".to_string())
}

fn broadcast_walls(log: &[LogRecord]) -> Vec<i64> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Broadcast { wall, .. } => Some(wall.as_nanos()),
            _ => None,
        })
        .collect()
}

// 5 (simulated half): randomized actor schedules through the protocol model.
fn replay_simulated() -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    for seed in 0..1000u64 {
        let cfg = random_config(seed, 1 + (seed as usize % 6), 8);
        let r = simulate(&cfg);
        let rep = common::replay(&r.log, cfg.cooldown_ns);
        if !r.completed {
            failures.push(format!("seed {seed}: schedule did not complete"));
        } else if !rep.violations.is_empty() {
            failures.push(format!("seed {seed}: {}", rep.violations[0]));
        } else if rep.expected != rep.logged {
            failures.push(format!("seed {seed}: broadcast sequence differs"));
        }
    }
    (1000, failures)
}

fn criterion_6() -> Result<Verdict, String> {
    let s = server::spawn(ServerConfig::default()).map_err(|e| e.to_string())?;
    let (req, sub) = (s.request_addr().to_string(), s.broadcast_addr().to_string());
    let a = ClientHandle::connect(&req, &sub, Role::Actor).map_err(|e| e.to_string())?;
    let b = ClientHandle::connect(&req, &sub, Role::Actor).map_err(|e| e.to_string())?;
    a.seal().map_err(|e| e.to_string())?;
    let t0 = a.virtual_now();
    let long = thread::spawn(move || a.time_jump(Duration::from_millis(100)).map(|w| (w, a.virtual_now())));
    thread::sleep(Duration::from_millis(20));
    b.time_jump(Duration::from_millis(30)).map_err(|e| e.to_string())?;
    let b_after = b.virtual_now();
    // B has nothing further planned; leaving lets A's remainder resolve.
    b.deregister();
    let (wall, a_end) = long.join().map_err(|_| "jump thread panicked")?.map_err(|e| e.to_string())?;
    let log = s.log_records();
    s.shutdown();
    // rounds resolved while the 100ms jump was outstanding
    let rounds: Vec<i64> = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Resolve { broadcast: true, t_min, .. } => Some(t_min.nanos_since(t0)),
            _ => None,
        })
        .filter(|&t| t <= 100 * MS + MS)
        .collect();
    let ok = wall <= Duration::from_millis(60)
        && rounds.len() == 2
        && a_end.nanos_since(t0) >= 100 * MS
        && b_after.nanos_since(t0) >= 50 * MS - MS;
    Ok(verdict(
        ok,
        format!(
            "100ms jump took {:.1}ms wall over {} rounds (targets at +{:.1}ms, +{:.1}ms)",
            wall.as_secs_f64() * 1e3,
            rounds.len(),
            rounds.first().copied().unwrap_or(0) as f64 / 1e6,
            rounds.get(1).copied().unwrap_or(0) as f64 / 1e6,
        ),
    ))
}

fn criterion_8() -> Verdict {
    let mut problems = Vec::new();
    let mut a = DeviceAllocator::new(64 * MIB);
    if a.classify(4 * MIB - 1) != BufferClass::Metadata || a.classify(4 * MIB) != BufferClass::Compute {
        problems.push("threshold boundary misclassified".to_string());
    }
    for size in [4 * MIB, 4 * MIB + 1, 16 * MIB] {
        match a.alloc(size) {
            Ok(h) => match a.read(h, 0, 1) {
                Err(e @ DeviceError::PhantomRead { .. }) if e.is_fatal() => {}
                other => problems.push(format!("compute read of {size} bytes gave {other:?}")),
            },
            Err(e) => problems.push(e.to_string()),
        }
    }
    let mut phantom = 0;
    for seed in 0..3 {
        let ops = common::device_model::random_ops(seed, 10_000, DEFAULT_THRESHOLD);
        match common::device_model::check(&ops, 64 * MIB, DEFAULT_THRESHOLD) {
            Ok(n) => phantom += n,
            Err(e) => problems.push(e),
        }
    }
    verdict(
        problems.is_empty() && phantom > 0,
        if problems.is_empty() {
            format!("boundary exact, 3 x 10^4 shadow-model ops agree, {phantom} phantom reads all fatal")
        } else {
            problems.join("; ")
        },
    )
}

/// Arrival rate at which the reference engine is busy `target` of the time.
fn tune_qps(base: &RunConfig, target: f64) -> Result<(f64, f64), String> {
    let predictor = base.predictor.build().map_err(|e| e.to_string())?;
    let utilization = |qps: f64| -> Result<f64, String> {
        let mut w = base.workload.clone();
        w.qps = qps;
        let arrivals = generate_arrivals(&w).map_err(|e| e.to_string())?;
        let out = des::simulate(&base.engine, predictor.as_ref(), &arrivals).map_err(|e| e.to_string())?;
        let span = out.end.as_nanos() - arrivals[0].offset_ns;
        Ok(out.busy_ns as f64 / span as f64)
    };
    let (mut lo, mut hi) = (0.01, 50.0);
    for _ in 0..40 {
        let mid = (lo * hi as f64).sqrt();
        if utilization(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo, utilization(lo)?))
}

fn criterion_9() -> Result<Verdict, String> {
    let mut cfg = RunConfig {
        workload: WorkloadSpec {
            prompt_tokens: TokenDist::Fixed { value: 2048 },
            output_tokens: TokenDist::Fixed { value: 64 },
            ..WorkloadSpec::poisson(1.0, SEED, 300)
        },
        engine: EngineConfig::default(),
        predictor: PredictorConfig::Linear(LinearPredictor {
            base_us: 4000.0,
            per_prefill_token_us: 25.0,
            per_decode_us: 60.0,
            per_context_token_us: 0.01,
        }),
        timekeeper: Default::default(),
    };
    let (qps, util) = tune_qps(&cfg, 0.7)?;
    cfg.workload.qps = qps;
    let mixed = run(&cfg, ExecMode::Timewarp)?.report;
    cfg.engine.policy = Policy::PrefillPrioritized;
    let prio = run(&cfg, ExecMode::Timewarp)?.report;
    let ttft_gap = (prio.ttft.p50 - mixed.ttft.p50).abs() / mixed.ttft.p50;
    Ok(verdict(
        prio.tpot.p99 >= mixed.tpot.p99 && ttft_gap < 0.20,
        format!(
            "qps {qps:.3} ({:.0}% busy): p99 TPOT prefill-prioritized {:.1}ms vs mixed {:.1}ms, p50 TTFT gap {}",
            util * 100.0,
            prio.tpot.p99 / 1e6,
            mixed.tpot.p99 / 1e6,
            pct(ttft_gap)
        ),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: BTreeMap<u8, (&str, Result<Verdict, String>)> = BTreeMap::new();

    results.insert(8, ("split-state enforcement", Ok(criterion_8())));
    let (sim_runs, sim_failures) = replay_simulated();
    results.insert(6, ("two-actor worked example", criterion_6()));

    // Sleep-mode baselines run in real time; start them together.
    let mut baselines: Vec<(String, RunConfig)> = vec![("c1-qps1".into(), constant_run(1.0, 20, 200))];
    for d in [5u64, 10, 20, 40] {
        baselines.push((format!("c2-{d}ms"), constant_run(4.0, d, 200)));
    }
    baselines.push(("c4".into(), constant_run(4.0, 20, 50)));
    let handles: Vec<_> = baselines
        .iter()
        .cloned()
        .map(|(name, cfg)| (name, thread::spawn(move || run(&cfg, ExecMode::Sleep))))
        .collect();
    let mut sleep: BTreeMap<String, Result<RunArtifacts, String>> = BTreeMap::new();
    for (name, h) in handles {
        sleep.insert(name, h.join().unwrap_or_else(|_| Err("sleep run panicked".into())));
    }
    let cfg_of = |name: &str| baselines.iter().find(|(n, _)| n == name).unwrap().1.clone();

    // Timewarp runs, one at a time.
    let mut logs: Vec<(String, Vec<LogRecord>)> = Vec::new();
    let mut timewarp: BTreeMap<String, Result<RunArtifacts, String>> = BTreeMap::new();
    for (name, cfg) in &baselines {
        let mut cfg = cfg.clone();
        if name == "c4" {
            cfg.timekeeper.drop_broadcasts = 1.0;
        }
        let r = run(&cfg, ExecMode::Timewarp);
        if let Ok(a) = &r {
            logs.push((name.clone(), a.timekeeper_log.clone()));
        }
        timewarp.insert(name.clone(), r);
    }
    let compare = |name: &str| -> Result<(Comparison, f64), String> {
        let tw = timewarp[name].as_ref().map_err(Clone::clone)?;
        let sl = sleep[name].as_ref().map_err(Clone::clone)?;
        let c = compare_runs(&tw.report, &sl.report).map_err(|e| e.to_string())?;
        Ok((c, tw.report.speedup))
    };

    // 1
    results.insert(
        1,
        ("oracle accuracy", (|| {
            let mut worst: f64 = 0.0;
            let mut parts = Vec::new();
            for (label, name) in [("qps 1", "c1-qps1"), ("qps 4", "c2-20ms")] {
                let (c, _) = compare(name)?;
                worst = worst.max(worst_error(&c));
                parts.push(format!(
                    "{label}: TTFT p50/p99 err {}/{}, TPOT p50/p99 err {}/{}",
                    pct(c.ttft.p50),
                    pct(c.ttft.p99),
                    pct(c.tpot.p50),
                    pct(c.tpot.p99)
                ));
            }
            Ok(verdict(worst < 0.05, parts.join("; ")))
        })()),
    );

    // 2
    results.insert(
        2,
        ("batch-duration sweep", (|| {
            let mut speedups = Vec::new();
            let mut worst: f64 = 0.0;
            for d in [5, 10, 20, 40] {
                let (c, s) = compare(&format!("c2-{d}ms"))?;
                worst = worst.max(worst_error(&c));
                speedups.push((d, s));
            }
            let monotone = speedups.windows(2).all(|w| w[1].1 >= w[0].1);
            let s20 = speedups[2].1;
            let s40 = speedups[3].1;
            let listing: Vec<String> = speedups.iter().map(|(d, s)| format!("{d}ms {s:.1}x")).collect();
            Ok(verdict(
                worst < 0.05 && monotone && s20 >= 5.0 && s40 >= 10.0,
                format!("speedups {}; worst percentile error {}", listing.join(", "), pct(worst)),
            ))
        })()),
    );

    // 3
    results.insert(
        3,
        ("DES equivalence", (|| {
            let cfg = cfg_of("c2-20ms");
            let live = timewarp["c2-20ms"].as_ref().map_err(Clone::clone)?;
            let dev = oracle_deviation(&cfg, live)?;
            Ok(verdict(
                dev <= 2 * MS,
                format!("{} events match the reference, max deviation {:.3}ms", live.events.len(), dev as f64 / 1e6),
            ))
        })()),
    );

    // 4
    results.insert(
        4,
        ("graceful degradation", (|| {
            let cfg = cfg_of("c4");
            let faulty = timewarp["c4"].as_ref().map_err(Clone::clone)?;
            let base = sleep["c4"].as_ref().map_err(Clone::clone)?;
            let dev = oracle_deviation(&cfg, faulty)?;
            let ratio = faulty.report.wall_elapsed_ns as f64 / base.report.wall_elapsed_ns as f64;
            let delivered = faulty
                .timekeeper_log
                .iter()
                .filter(|r| matches!(r, LogRecord::Broadcast { delivered: true, .. }))
                .count();
            Ok(verdict(
                dev <= 2 * MS && (ratio - 1.0).abs() <= 0.10,
                format!(
                    "all broadcasts dropped ({delivered} delivered): max deviation {:.3}ms, wall {:.2}s vs sleep {:.2}s",
                    dev as f64 / 1e6,
                    faulty.report.wall_elapsed_ns as f64 / 1e9,
                    base.report.wall_elapsed_ns as f64 / 1e9
                ),
            ))
        })()),
    );

    // 5
    results.insert(
        5,
        ("barrier-protocol replay", (|| {
            let mut failures = sim_failures.clone();
            let mut rounds = 0;
            for (name, log) in &logs {
                let rep = common::replay(log, J_NS);
                rounds += rep.rounds;
                if !rep.violations.is_empty() {
                    failures.push(format!("{name}: {}", rep.violations[0]));
                } else if rep.expected != rep.logged {
                    failures.push(format!("{name}: broadcast sequence differs"));
                }
            }
            Ok(verdict(
                failures.is_empty() && logs.len() == baselines.len(),
                if failures.is_empty() {
                    format!("{sim_runs} simulated schedules and {} server logs ({rounds} rounds) replay exactly", logs.len())
                } else {
                    format!("{} failures, first: {}", failures.len(), failures[0])
                },
            ))
        })()),
    );

    // 7
    results.insert(
        7,
        ("jitter cooldown", (|| {
            let mut min_gap = i64::MAX;
            let mut count = 0;
            for (_, log) in &logs {
                let walls = broadcast_walls(log);
                count += walls.len();
                if let Some(g) = walls.windows(2).map(|w| w[1] - w[0]).min() {
                    min_gap = min_gap.min(g);
                }
            }
            Ok(verdict(
                count > 100 && min_gap >= J_NS,
                format!("{count} broadcasts, min gap {:.1}us", min_gap as f64 / 1e3),
            ))
        })()),
    );

    results.insert(9, ("policy divergence", criterion_9()));

    let mut all = true;
    for (id, (name, r)) in &results {
        let (pass, detail) = match r {
            Ok(v) => (v.pass, v.detail.clone()),
            Err(e) => (false, e.clone()),
        };
        all &= pass;
        println!("criterion {id} ({name}): {} : {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!(
        "acceptance: {} in {:.0}s",
        if all { "all criteria pass" } else { "FAILURES" },
        started.elapsed().as_secs_f64()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
