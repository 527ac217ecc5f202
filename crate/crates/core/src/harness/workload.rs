use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("trace line {line}: {message}")]
    TraceParseError { line: usize, message: String },
    #[error("reading trace {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenDist {
    Fixed { value: u32 },
    /// Inclusive on both ends.
    Uniform { min: u32, max: u32 },
}

impl TokenDist {
    fn validate(&self, what: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            TokenDist::Fixed { value } => value >= 1,
            TokenDist::Uniform { min, max } => min >= 1 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::Invalid(format!("{what} lengths must be >= 1 with min <= max")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        match *self {
            TokenDist::Fixed { value } => value,
            TokenDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalSource {
    #[serde(alias = "POISSON")]
    Poisson,
    #[serde(alias = "TRACE")]
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(default = "poisson")]
    pub source: ArrivalSource,
    #[serde(default)]
    pub qps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub num_requests: usize,
    #[serde(default = "default_prompt")]
    pub prompt_tokens: TokenDist,
    #[serde(default = "default_output")]
    pub output_tokens: TokenDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
}

fn poisson() -> ArrivalSource {
    ArrivalSource::Poisson
}

fn default_prompt() -> TokenDist {
    TokenDist::Uniform { min: 64, max: 1024 }
}

fn default_output() -> TokenDist {
    TokenDist::Uniform { min: 8, max: 64 }
}

impl WorkloadSpec {
    pub fn poisson(qps: f64, seed: u64, num_requests: usize) -> Self {
        WorkloadSpec {
            source: ArrivalSource::Poisson,
            qps,
            seed,
            num_requests,
            prompt_tokens: default_prompt(),
            output_tokens: default_output(),
            trace_path: None,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self.source {
            ArrivalSource::Poisson => {
                if !(self.qps > 0.0 && self.qps.is_finite()) {
                    return Err(WorkloadError::Invalid("qps must be positive".into()));
                }
                if self.num_requests == 0 {
                    return Err(WorkloadError::Invalid("num_requests must be at least 1".into()));
                }
                self.prompt_tokens.validate("prompt")?;
                self.output_tokens.validate("output")?;
            }
            ArrivalSource::Trace => {
                if self.trace_path.is_none() {
                    return Err(WorkloadError::Invalid("trace source needs trace_path".into()));
                }
            }
        }
        Ok(())
    }
}

/// One request of a workload, `offset_ns` after the run's epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedArrival {
    pub request_id: u64,
    pub offset_ns: i64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

/// Deterministic per spec. Poisson gaps and token lengths come from
/// separate streams of the seeded generator, so changing `qps` rescales the
/// gaps without changing the lengths.
pub fn generate_arrivals(spec: &WorkloadSpec) -> Result<Vec<PlannedArrival>, WorkloadError> {
    spec.validate()?;
    match spec.source {
        ArrivalSource::Trace => load_trace(spec.trace_path.as_deref().expect("validated")),
        ArrivalSource::Poisson => {
            let mut gaps = ChaCha8Rng::seed_from_u64(spec.seed);
            gaps.set_stream(0);
            let mut lengths = ChaCha8Rng::seed_from_u64(spec.seed);
            lengths.set_stream(1);
            let exp = Exp::new(spec.qps).map_err(|e| WorkloadError::Invalid(e.to_string()))?;
            let mut t = 0.0f64;
            Ok((0..spec.num_requests)
                .map(|i| {
                    t += exp.sample(&mut gaps);
                    PlannedArrival {
                        request_id: i as u64,
                        offset_ns: (t * 1e9).round() as i64,
                        prompt_tokens: spec.prompt_tokens.sample(&mut lengths),
                        output_tokens: spec.output_tokens.sample(&mut lengths),
                    }
                })
                .collect())
        }
    }
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    arrival_ms: f64,
    prompt_tokens: u32,
    output_tokens: u32,
}

/// Reads `arrival_ms,prompt_tokens,output_tokens` rows in arrival order.
pub fn parse_trace(reader: impl Read) -> Result<Vec<PlannedArrival>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: Vec<PlannedArrival> = Vec::new();
    for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| WorkloadError::TraceParseError {
            line,
            message: e.to_string(),
        })?;
        let fail = |message: &str| WorkloadError::TraceParseError {
            line,
            message: message.to_string(),
        };
        if !(row.arrival_ms.is_finite() && row.arrival_ms >= 0.0) {
            return Err(fail("arrival_ms must be a non-negative number"));
        }
        if row.prompt_tokens == 0 || row.output_tokens == 0 {
            return Err(fail("token counts must be at least 1"));
        }
        let offset_ns = (row.arrival_ms * 1e6).round() as i64;
        if out.last().is_some_and(|p| p.offset_ns > offset_ns) {
            return Err(fail("arrivals must be in non-decreasing order"));
        }
        out.push(PlannedArrival {
            request_id: i as u64,
            offset_ns,
            prompt_tokens: row.prompt_tokens,
            output_tokens: row.output_tokens,
        });
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Vec<PlannedArrival>, WorkloadError> {
    let file = std::fs::File::open(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(file)
}
