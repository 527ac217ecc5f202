//! TTFT/TPOT metrics from producer-side event timestamps.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::VirtualTimestamp;
use crate::engine::{TokenEvent, TokenKind};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("request {request_id} has no {missing} event")]
    IncompleteLog { request_id: u64, missing: &'static str },
    #[error("event log inconsistent for request {request_id}: {detail}")]
    InconsistentLog { request_id: u64, detail: String },
    #[error("workloads differ: {0}")]
    WorkloadMismatch(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// What the dispatcher handed to the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionRecord {
    pub request_id: u64,
    pub planned_offset_ns: i64,
    pub arrival_virtual_ns: VirtualTimestamp,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub request_id: u64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    /// Relative to the run epoch.
    pub arrival_ns: i64,
    pub ttft_ns: i64,
    /// Absent for single-token requests.
    pub tpot_mean_ns: Option<f64>,
    pub finished_ns: i64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub mean: f64,
}

impl Summary {
    pub fn of(samples: &[f64]) -> Summary {
        if samples.is_empty() {
            return Summary::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Summary {
            count: s.len(),
            p50: nearest_rank(&s, 50.0),
            p90: nearest_rank(&s, 90.0),
            p99: nearest_rank(&s, 99.0),
            mean: s.iter().sum::<f64>() / s.len() as f64,
        }
    }
}

/// Nearest-rank percentile of sorted, non-empty samples.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Identifies the workload and model a report was produced from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub mode: String,
    pub seed: u64,
    /// Hash over workload, engine and predictor settings, excluding mode.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub identity: RunIdentity,
    pub num_requests: usize,
    pub ttft: Summary,
    pub tpot: Summary,
    pub virtual_elapsed_ns: i64,
    pub wall_elapsed_ns: i64,
    pub speedup: f64,
    pub requests: Vec<RequestMetrics>,
}

impl RunReport {
    pub fn ttft_samples(&self) -> Vec<f64> {
        self.requests.iter().map(|r| r.ttft_ns as f64).collect()
    }

    pub fn tpot_samples(&self) -> Vec<f64> {
        self.requests.iter().filter_map(|r| r.tpot_mean_ns).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn write_requests_csv(&self, w: impl Write) -> Result<(), MetricsError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "request_id",
            "prompt_tokens",
            "output_tokens",
            "arrival_ns",
            "ttft_ns",
            "tpot_mean_ns",
            "finished_ns",
        ])?;
        for r in &self.requests {
            out.write_record([
                r.request_id.to_string(),
                r.prompt_tokens.to_string(),
                r.output_tokens.to_string(),
                r.arrival_ns.to_string(),
                r.ttft_ns.to_string(),
                r.tpot_mean_ns.map(|v| format!("{v:.0}")).unwrap_or_default(),
                r.finished_ns.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Empirical CDFs in milliseconds, TTFT then TPOT as two gnuplot data
    /// blocks (`index 0` and `index 1`).
    pub fn write_cdf(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, (name, samples)) in [("ttft", self.ttft_samples()), ("tpot", self.tpot_samples())]
            .into_iter()
            .enumerate()
        {
            if i > 0 {
                writeln!(w, "\n")?;
            }
            writeln!(w, "# {name}_ms cdf")?;
            let mut s = samples;
            s.sort_by(f64::total_cmp);
            let n = s.len() as f64;
            for (k, v) in s.iter().enumerate() {
                writeln!(w, "{:.6} {:.6}", v / 1e6, (k + 1) as f64 / n)?;
            }
        }
        Ok(())
    }

    /// Writes `report.json`, `requests.csv` and `cdf.dat` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), MetricsError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        self.write_requests_csv(std::fs::File::create(dir.join("requests.csv"))?)?;
        self.write_cdf(std::io::BufWriter::new(std::fs::File::create(dir.join("cdf.dat"))?))?;
        Ok(())
    }
}

#[derive(Default)]
struct Seen {
    first: Option<i64>,
    finished: Option<i64>,
    tokens: u32,
    last: i64,
}

/// Builds a report. Timestamps are taken relative to `epoch`; speedup is
/// virtual over wall elapsed time.
pub fn collect_metrics(
    events: &[TokenEvent],
    submissions: &[SubmissionRecord],
    epoch: VirtualTimestamp,
    wall_elapsed_ns: i64,
    identity: RunIdentity,
) -> Result<RunReport, MetricsError> {
    let mut seen: HashMap<u64, Seen> = HashMap::new();
    for e in events {
        let ts = e.virtual_ts_ns.nanos_since(epoch);
        let s = seen.entry(e.request_id).or_default();
        let bad = |detail: &str| MetricsError::InconsistentLog {
            request_id: e.request_id,
            detail: detail.to_string(),
        };
        if s.finished.is_some() {
            return Err(bad("event after FINISHED"));
        }
        if (s.first.is_some() || s.tokens > 0) && ts < s.last {
            return Err(bad("timestamps go backwards"));
        }
        match e.kind {
            TokenKind::FirstToken => {
                if s.first.is_some() {
                    return Err(bad("duplicate FIRST_TOKEN"));
                }
                s.first = Some(ts);
                s.tokens += 1;
            }
            TokenKind::OutputToken => {
                if s.first.is_none() {
                    return Err(bad("OUTPUT_TOKEN before FIRST_TOKEN"));
                }
                s.tokens += 1;
            }
            TokenKind::Finished => s.finished = Some(ts),
        }
        s.last = ts;
    }

    let mut requests = Vec::with_capacity(submissions.len());
    let mut ttft = Vec::new();
    let mut tpot = Vec::new();
    let mut end = 0i64;
    let mut ordered: Vec<&SubmissionRecord> = submissions.iter().collect();
    ordered.sort_by_key(|s| s.request_id);
    for sub in ordered {
        let id = sub.request_id;
        let s = seen.remove(&id).unwrap_or_default();
        let first = s.first.ok_or(MetricsError::IncompleteLog {
            request_id: id,
            missing: "FIRST_TOKEN",
        })?;
        let finished = s.finished.ok_or(MetricsError::IncompleteLog {
            request_id: id,
            missing: "FINISHED",
        })?;
        if s.tokens != sub.output_tokens {
            return Err(MetricsError::InconsistentLog {
                request_id: id,
                detail: format!("{} tokens emitted, {} expected", s.tokens, sub.output_tokens),
            });
        }
        let arrival = sub.arrival_virtual_ns.nanos_since(epoch);
        let ttft_ns = first - arrival;
        let tpot_mean_ns = (sub.output_tokens > 1).then(|| (finished - first) as f64 / (sub.output_tokens - 1) as f64);
        ttft.push(ttft_ns as f64);
        tpot.extend(tpot_mean_ns);
        end = end.max(finished);
        requests.push(RequestMetrics {
            request_id: id,
            prompt_tokens: sub.prompt_tokens,
            output_tokens: sub.output_tokens,
            arrival_ns: arrival,
            ttft_ns,
            tpot_mean_ns,
            finished_ns: finished,
        });
    }
    if let Some((&request_id, _)) = seen.iter().min_by_key(|(id, _)| **id) {
        return Err(MetricsError::InconsistentLog {
            request_id,
            detail: "events for a request that was never submitted".into(),
        });
    }
    let speedup = if wall_elapsed_ns > 0 {
        end as f64 / wall_elapsed_ns as f64
    } else {
        0.0
    };
    Ok(RunReport {
        identity,
        num_requests: requests.len(),
        ttft: Summary::of(&ttft),
        tpot: Summary::of(&tpot),
        virtual_elapsed_ns: end,
        wall_elapsed_ns,
        speedup,
        requests,
    })
}

/// Two-sample Kolmogorov-Smirnov statistic: the largest gap between the
/// empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (a - b).abs() / b.abs()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PercentileErrors {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub ks: f64,
}

impl PercentileErrors {
    fn between(a: &Summary, b: &Summary, sa: &[f64], sb: &[f64]) -> Self {
        PercentileErrors {
            p50: relative_error(a.p50, b.p50),
            p90: relative_error(a.p90, b.p90),
            p99: relative_error(a.p99, b.p99),
            ks: ks_statistic(sa, sb),
        }
    }

    pub fn max_percentile_error(&self) -> f64 {
        self.p50.max(self.p90).max(self.p99)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a_mode: String,
    pub b_mode: String,
    pub ttft: PercentileErrors,
    pub tpot: PercentileErrors,
    /// Wall time of `b` over wall time of `a`.
    pub wall_ratio: f64,
}

/// Relative errors of `a` against reference `b`.
pub fn compare_runs(a: &RunReport, b: &RunReport) -> Result<Comparison, MetricsError> {
    if a.identity.seed != b.identity.seed {
        return Err(MetricsError::WorkloadMismatch(format!(
            "seed {} vs {}",
            a.identity.seed, b.identity.seed
        )));
    }
    if a.identity.fingerprint != b.identity.fingerprint {
        return Err(MetricsError::WorkloadMismatch("configuration fingerprints differ".into()));
    }
    let ids = |r: &RunReport| r.requests.iter().map(|q| (q.request_id, (q.prompt_tokens, q.output_tokens))).collect::<BTreeMap<_, _>>();
    if ids(a) != ids(b) {
        return Err(MetricsError::WorkloadMismatch("request sets differ".into()));
    }
    Ok(Comparison {
        a_mode: a.identity.mode.clone(),
        b_mode: b.identity.mode.clone(),
        ttft: PercentileErrors::between(&a.ttft, &b.ttft, &a.ttft_samples(), &b.ttft_samples()),
        tpot: PercentileErrors::between(&a.tpot, &b.tpot, &a.tpot_samples(), &b.tpot_samples()),
        wall_ratio: if a.wall_elapsed_ns > 0 {
            b.wall_elapsed_ns as f64 / a.wall_elapsed_ns as f64
        } else {
            0.0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: i64 = 1_000_000;

    fn ev(id: u64, kind: TokenKind, ms: i64) -> TokenEvent {
        TokenEvent {
            request_id: id,
            kind,
            virtual_ts_ns: VirtualTimestamp::from_nanos(ms * MS),
        }
    }

    fn sub(id: u64, arrival_ms: i64, output: u32) -> SubmissionRecord {
        SubmissionRecord {
            request_id: id,
            planned_offset_ns: arrival_ms * MS,
            arrival_virtual_ns: VirtualTimestamp::from_nanos(arrival_ms * MS),
            prompt_tokens: 16,
            output_tokens: output,
        }
    }

    fn ident(seed: u64) -> RunIdentity {
        RunIdentity {
            mode: "timewarp".into(),
            seed,
            fingerprint: "f".into(),
        }
    }

    fn report() -> RunReport {
        use TokenKind::*;
        let events = [
            ev(0, FirstToken, 10),
            ev(0, OutputToken, 20),
            ev(0, OutputToken, 30),
            ev(0, Finished, 30),
            ev(1, FirstToken, 25),
            ev(1, Finished, 25),
        ];
        collect_metrics(&events, &[sub(0, 0, 3), sub(1, 5, 1)], VirtualTimestamp::ZERO, 10 * MS, ident(1)).unwrap()
    }

    #[test]
    fn ttft_and_tpot() {
        let r = report();
        assert_eq!(r.requests[0].ttft_ns, 10 * MS);
        assert_eq!(r.requests[0].tpot_mean_ns, Some((10 * MS) as f64));
        assert_eq!(r.requests[1].ttft_ns, 20 * MS);
        assert_eq!(r.requests[1].tpot_mean_ns, None);
        assert_eq!(r.ttft.count, 2);
        assert_eq!(r.tpot.count, 1);
        assert_eq!(r.virtual_elapsed_ns, 30 * MS);
        assert!((r.speedup - 3.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&s, 50.0), 50.0);
        assert_eq!(nearest_rank(&s, 99.0), 99.0);
        assert_eq!(nearest_rank(&[3.0, 7.0], 50.0), 3.0);
        assert_eq!(nearest_rank(&[3.0, 7.0], 90.0), 7.0);
        assert_eq!(nearest_rank(&[4.0], 0.0), 4.0);
    }

    #[test]
    fn missing_terminal_event() {
        let events = [ev(0, TokenKind::FirstToken, 10)];
        assert!(matches!(
            collect_metrics(&events, &[sub(0, 0, 1)], VirtualTimestamp::ZERO, 1, ident(1)),
            Err(MetricsError::IncompleteLog { request_id: 0, .. })
        ));
        assert!(matches!(
            collect_metrics(&[], &[sub(0, 0, 1)], VirtualTimestamp::ZERO, 1, ident(1)),
            Err(MetricsError::IncompleteLog { .. })
        ));
    }

    #[test]
    fn token_count_is_checked() {
        let events = [ev(0, TokenKind::FirstToken, 10), ev(0, TokenKind::Finished, 10)];
        assert!(matches!(
            collect_metrics(&events, &[sub(0, 0, 2)], VirtualTimestamp::ZERO, 1, ident(1)),
            Err(MetricsError::InconsistentLog { .. })
        ));
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(report().to_json(), report().to_json());
        let mut a = Vec::new();
        report().write_requests_csv(&mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().ends_with(",,25000000"));
    }

    #[test]
    fn identical_reports_compare_to_zero() {
        let c = compare_runs(&report(), &report()).unwrap();
        assert_eq!(c.ttft, PercentileErrors::default());
        assert_eq!(c.tpot, PercentileErrors::default());
    }

    #[test]
    fn mismatched_seeds_rejected() {
        let mut b = report();
        b.identity.seed = 2;
        assert!(matches!(compare_runs(&report(), &b), Err(MetricsError::WorkloadMismatch(_))));
    }

    #[test]
    fn ks_statistic_known_values() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cdf_dump_has_two_blocks() {
        let mut out = Vec::new();
        report().write_cdf(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.matches("# ").count(), 2);
        assert!(text.contains("10.000000 0.500000"));
    }
}
