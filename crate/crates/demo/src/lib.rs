//! wasm-bindgen exports behind `www/index.html`. Everything here runs on
//! simulated clocks; nothing touches the host's wall time.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use timewarp::engine::{EngineConfig, Policy};
use timewarp::harness::config::RunConfig;
use timewarp::harness::orchestrate::run_oracle;
use timewarp::harness::workload::{TokenDist, WorkloadSpec};
use timewarp::predictor::{LinearPredictor, PredictorConfig};
use timewarp::protocol_sim::{simulate, ActorScript, SimConfig, SimStep, SIM_EPOCH_NS};

const MS: f64 = 1e6;

/// Parses one actor per line: `start_ms: delta_ms delta_ms ...`, with an
/// optional `+compute_ms` suffix on a delta for time spent before that jump.
pub fn parse_actors(text: &str) -> Result<Vec<ActorScript>, String> {
    let mut actors = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |what: &str| format!("line {}: {what}", n + 1);
        let (start, rest) = line.split_once(':').ok_or_else(|| err("expected `start_ms: delta ...`"))?;
        let start: f64 = start.trim().parse().map_err(|_| err("bad start time"))?;
        let mut steps = Vec::new();
        for tok in rest.split_whitespace() {
            let (delta, compute) = match tok.split_once('+') {
                Some((d, c)) => (d, c.parse::<f64>().map_err(|_| err("bad compute time"))?),
                None => (tok, 0.0),
            };
            let delta: f64 = delta.parse().map_err(|_| err("bad delta"))?;
            if !(delta > 0.0) || compute < 0.0 {
                return Err(err("deltas must be positive"));
            }
            steps.push(SimStep {
                compute_ns: (compute * MS) as i64,
                delta_ns: (delta * MS) as i64,
            });
        }
        if steps.is_empty() || start < 0.0 {
            return Err(err("need a non-negative start and at least one delta"));
        }
        actors.push(ActorScript {
            start_ns: (start * MS) as i64,
            steps,
        });
    }
    if actors.is_empty() {
        return Err("no actors".into());
    }
    Ok(actors)
}

pub fn timeline(actors: &str, cooldown_us: f64, latency_us: f64, drop_probability: f64, seed: u64) -> Result<Value, String> {
    let cfg = SimConfig {
        actors: parse_actors(actors)?,
        latency_ns: (latency_us * 1e3) as i64,
        jitter_ns: 0,
        cooldown_ns: (cooldown_us * 1e3) as i64,
        drop_probability: drop_probability.clamp(0.0, 1.0),
        seed,
    };
    let r = simulate(&cfg);
    let rel = |ns: i64| (ns - SIM_EPOCH_NS) as f64 / MS;
    let jumps: Vec<Value> = r
        .jumps
        .iter()
        .map(|j| {
            json!({
                "actor": j.actor,
                "delta_ms": j.delta_ns as f64 / MS,
                "start_wall_ms": rel(j.start_wall.as_nanos()),
                "end_wall_ms": rel(j.end_wall.as_nanos()),
                "target_ms": rel(j.target.as_nanos()),
                "end_virtual_ms": rel(j.end_virtual.as_nanos()),
                "requests": j.requests,
            })
        })
        .collect();
    let broadcasts: Vec<Value> = r
        .broadcasts
        .iter()
        .map(|b| {
            json!({
                "wall_ms": rel(b.wall.as_nanos()),
                "offset_ms": b.offset.as_nanos() as f64 / MS,
                "seq": b.seq,
                "delivered": b.delivered,
            })
        })
        .collect();
    Ok(json!({
        "completed": r.completed,
        "end_wall_ms": rel(r.end_wall.as_nanos()),
        "jumps": jumps,
        "broadcasts": broadcasts,
    }))
}

fn policy_run(policy: Policy, qps: f64, prompt: u32, output: u32, requests: usize, seed: u64) -> Result<Value, String> {
    let cfg = RunConfig {
        workload: WorkloadSpec {
            prompt_tokens: TokenDist::Fixed { value: prompt },
            output_tokens: TokenDist::Fixed { value: output },
            ..WorkloadSpec::poisson(qps, seed, requests)
        },
        engine: EngineConfig {
            policy,
            ..Default::default()
        },
        predictor: PredictorConfig::Linear(LinearPredictor {
            base_us: 4000.0,
            per_prefill_token_us: 25.0,
            per_decode_us: 60.0,
            per_context_token_us: 0.01,
        }),
        timekeeper: Default::default(),
    };
    let (report, des) = run_oracle(&cfg).map_err(|e| e.to_string())?;
    let ms = |v: Vec<f64>| -> Vec<f64> {
        let mut v: Vec<f64> = v.into_iter().map(|x| x / MS).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    Ok(json!({
        "ttft_ms": ms(report.ttft_samples()),
        "tpot_ms": ms(report.tpot_samples()),
        "busy": des.busy_ns as f64 / des.end.as_nanos().max(1) as f64,
        "steps": des.steps,
    }))
}

pub fn policies(qps: f64, prompt: u32, output: u32, requests: usize, seed: u64) -> Result<Value, String> {
    if !(qps > 0.0) || prompt == 0 || output == 0 || requests == 0 || requests > 20_000 {
        return Err("qps, lengths and request count must be positive (at most 20000 requests)".into());
    }
    Ok(json!({
        "mixed": policy_run(Policy::Mixed, qps, prompt, output, requests, seed)?,
        "prefill_prioritized": policy_run(Policy::PrefillPrioritized, qps, prompt, output, requests, seed)?,
    }))
}

/// Replays actor scripts through the barrier protocol on a simulated clock.
#[wasm_bindgen(js_name = barrierTimeline)]
pub fn barrier_timeline(actors: &str, cooldown_us: f64, latency_us: f64, drop_probability: f64, seed: u32) -> Result<String, JsValue> {
    timeline(actors, cooldown_us, latency_us, drop_probability, seed as u64)
        .map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&e))
}

/// TTFT and TPOT samples (ms, sorted) under both scheduling policies.
#[wasm_bindgen(js_name = policyCdfs)]
pub fn policy_cdfs(qps: f64, prompt: u32, output: u32, requests: u32, seed: u32) -> Result<String, JsValue> {
    policies(qps, prompt, output, requests as usize, seed as u64)
        .map(|v| v.to_string())
        .map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_actor_script() {
        let v = timeline("0: 100\n20: 30", 500.0, 50.0, 0.0, 1).unwrap();
        assert_eq!(v["completed"], true);
        let long = v["jumps"].as_array().unwrap().iter().find(|j| j["actor"] == 0).unwrap().clone();
        let wall = long["end_wall_ms"].as_f64().unwrap() - long["start_wall_ms"].as_f64().unwrap();
        assert!(wall < 25.0, "{wall}");
        assert!(long["end_virtual_ms"].as_f64().unwrap() >= 100.0);
    }

    #[test]
    fn script_errors_name_the_line() {
        assert!(parse_actors("0: 10\nx: 5").unwrap_err().contains("line 2"));
        assert!(parse_actors("0: -1").is_err());
        assert!(parse_actors("# nothing").is_err());
        assert_eq!(parse_actors("5: 10+2 20").unwrap()[0].steps[0].compute_ns, 2_000_000);
    }

    #[test]
    fn both_policies_cover_every_request() {
        let v = policies(2.0, 1024, 16, 50, 3).unwrap();
        for p in ["mixed", "prefill_prioritized"] {
            assert_eq!(v[p]["ttft_ms"].as_array().unwrap().len(), 50);
            assert_eq!(v[p]["tpot_ms"].as_array().unwrap().len(), 50);
        }
        assert!(policies(0.0, 1, 1, 1, 0).is_err());
    }
}
