//! Batch-duration predictors.
//!
//! Every predictor maps a [`BatchComposition`] and a [`HardwareSpec`] to a
//! strictly positive duration, quantized to whole microseconds so that sleep
//! and jump execution use numerically identical values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillChunk {
    pub request_id: u64,
    pub chunk_tokens: u32,
    pub context_len_before: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeEntry {
    pub request_id: u64,
    pub context_len: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub prefill_chunks: Vec<PrefillChunk>,
    pub decodes: Vec<DecodeEntry>,
}

impl BatchComposition {
    pub fn is_empty(&self) -> bool {
        self.prefill_chunks.is_empty() && self.decodes.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill_chunks.iter().map(|c| c.chunk_tokens as u64).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.prefill_tokens() + self.decodes.len() as u64
    }

    pub fn context_tokens(&self) -> u64 {
        self.prefill_chunks.iter().map(|c| c.context_len_before as u64).sum::<u64>()
            + self.decodes.iter().map(|d| d.context_len as u64).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        HardwareSpec {
            name: "generic".into(),
            parameters: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("cannot predict an empty batch")]
    EmptyBatch,
    #[error("no table entry near ({prefill_tokens} prefill tokens, {decodes} decodes) and extrapolation is off")]
    TableMiss { prefill_tokens: u64, decodes: u64 },
    #[error("hardware spec needs a name")]
    InvalidHardware,
    #[error("table parse error: {0}")]
    ParseError(String),
    #[error("row {row}: negative duration {value}us")]
    NegativeDuration { row: usize, value: f64 },
    #[error("invalid predictor configuration: {0}")]
    InvalidConfig(String),
}

/// Maps a batch to its predicted execution time. Implementations must be
/// pure: identical inputs give identical outputs in every process.
pub trait RuntimePredictor: Send + Sync + std::fmt::Debug {
    fn predict(&self, batch: &BatchComposition, hw: &HardwareSpec) -> Result<Duration, PredictError>;
}

fn quantize_us(us: f64) -> Duration {
    let whole = us.round();
    Duration::from_micros(if whole.is_finite() && whole >= 1.0 { whole as u64 } else { 1 })
}

fn check(batch: &BatchComposition, hw: &HardwareSpec) -> Result<(), PredictError> {
    if batch.is_empty() {
        return Err(PredictError::EmptyBatch);
    }
    if hw.name.trim().is_empty() {
        return Err(PredictError::InvalidHardware);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPredictor {
    pub duration: Duration,
}

impl RuntimePredictor for ConstantPredictor {
    fn predict(&self, batch: &BatchComposition, hw: &HardwareSpec) -> Result<Duration, PredictError> {
        check(batch, hw)?;
        Ok(quantize_us(self.duration.as_secs_f64() * 1e6))
    }
}

/// `base + k_p * prefill tokens + k_d * decodes + k_ctx * context tokens`,
/// all coefficients in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictor {
    pub base_us: f64,
    pub per_prefill_token_us: f64,
    pub per_decode_us: f64,
    #[serde(default)]
    pub per_context_token_us: f64,
}

impl RuntimePredictor for LinearPredictor {
    fn predict(&self, batch: &BatchComposition, hw: &HardwareSpec) -> Result<Duration, PredictError> {
        check(batch, hw)?;
        let us = self.base_us
            + self.per_prefill_token_us * batch.prefill_tokens() as f64
            + self.per_decode_us * batch.decodes.len() as f64
            + self.per_context_token_us * batch.context_tokens() as f64;
        Ok(quantize_us(us))
    }
}

/// Profiled durations keyed by (total prefill tokens, number of decodes).
#[derive(Debug, Clone, PartialEq)]
pub struct TablePredictor {
    rows: BTreeMap<(u64, u64), f64>,
    extrapolate: bool,
    replaced: Vec<(u64, u64)>,
}

#[derive(Debug, Deserialize)]
struct TableRow {
    total_prefill_tokens: u64,
    num_decodes: u64,
    duration_us: f64,
}

impl TablePredictor {
    pub fn from_rows(rows: impl IntoIterator<Item = (u64, u64, f64)>, extrapolate: bool) -> Result<Self, PredictError> {
        let mut table = BTreeMap::new();
        let mut replaced = Vec::new();
        for (i, (p, d, us)) in rows.into_iter().enumerate() {
            if us < 0.0 {
                return Err(PredictError::NegativeDuration { row: i + 1, value: us });
            }
            if !us.is_finite() {
                return Err(PredictError::ParseError(format!("row {}: duration is not finite", i + 1)));
            }
            if table.insert((p, d), us).is_some() {
                warn!("duplicate table key ({p}, {d}) at row {}; keeping the later value", i + 1);
                replaced.push((p, d));
            }
        }
        if table.is_empty() {
            return Err(PredictError::ParseError("table has no rows".into()));
        }
        Ok(TablePredictor {
            rows: table,
            extrapolate,
            replaced,
        })
    }

    pub fn from_reader(reader: impl std::io::Read, extrapolate: bool) -> Result<Self, PredictError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| PredictError::ParseError(e.to_string()))?.clone();
        for needed in ["total_prefill_tokens", "num_decodes", "duration_us"] {
            if !headers.iter().any(|h| h == needed) {
                return Err(PredictError::ParseError(format!("missing column {needed}")));
            }
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<TableRow>().enumerate() {
            let r = rec.map_err(|e| PredictError::ParseError(format!("row {}: {e}", i + 1)))?;
            rows.push((r.total_prefill_tokens, r.num_decodes, r.duration_us));
        }
        Self::from_rows(rows, extrapolate)
    }

    pub fn load(path: &Path, extrapolate: bool) -> Result<Self, PredictError> {
        let file = std::fs::File::open(path).map_err(|e| PredictError::ParseError(format!("{}: {e}", path.display())))?;
        Self::from_reader(file, extrapolate)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keys that appeared more than once while loading.
    pub fn replaced_keys(&self) -> &[(u64, u64)] {
        &self.replaced
    }

    fn axis(&self, f: impl Fn(&(u64, u64)) -> u64) -> Vec<u64> {
        let mut v: Vec<u64> = self.rows.keys().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn bracket(axis: &[u64], x: u64) -> (u64, u64) {
        match axis.binary_search(&x) {
            Ok(i) => (axis[i], axis[i]),
            Err(i) => (axis[i - 1], axis[i]),
        }
    }

    fn lookup_us(&self, p: u64, d: u64) -> Result<f64, PredictError> {
        if let Some(&us) = self.rows.get(&(p, d)) {
            return Ok(us);
        }
        let ps = self.axis(|k| k.0);
        let ds = self.axis(|k| k.1);
        let (pmin, pmax) = (ps[0], *ps.last().unwrap());
        let (dmin, dmax) = (ds[0], *ds.last().unwrap());
        let inside = (pmin..=pmax).contains(&p) && (dmin..=dmax).contains(&d);
        if !inside && !self.extrapolate {
            return Err(PredictError::TableMiss {
                prefill_tokens: p,
                decodes: d,
            });
        }
        let (p, d) = (p.clamp(pmin, pmax), d.clamp(dmin, dmax));
        let (p0, p1) = Self::bracket(&ps, p);
        let (d0, d1) = Self::bracket(&ds, d);
        let corners = [(p0, d0), (p1, d0), (p0, d1), (p1, d1)].map(|k| self.rows.get(&k).copied());
        if let [Some(v00), Some(v10), Some(v01), Some(v11)] = corners {
            let fp = if p1 == p0 { 0.0 } else { (p - p0) as f64 / (p1 - p0) as f64 };
            let fd = if d1 == d0 { 0.0 } else { (d - d0) as f64 / (d1 - d0) as f64 };
            let low = v00 + (v10 - v00) * fp;
            let high = v01 + (v11 - v01) * fp;
            return Ok(low + (high - low) * fd);
        }
        // sparse grid: nearest row under range-normalized distance
        let span = |lo: u64, hi: u64| (hi - lo).max(1) as f64;
        let (sp, sd) = (span(pmin, pmax), span(dmin, dmax));
        let nearest = self
            .rows
            .iter()
            .map(|(&(kp, kd), &us)| {
                let dist = (kp as f64 - p as f64).abs() / sp + (kd as f64 - d as f64).abs() / sd;
                (dist, us)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("table is non-empty");
        Ok(nearest.1)
    }
}

impl RuntimePredictor for TablePredictor {
    fn predict(&self, batch: &BatchComposition, hw: &HardwareSpec) -> Result<Duration, PredictError> {
        check(batch, hw)?;
        Ok(quantize_us(self.lookup_us(batch.prefill_tokens(), batch.decodes.len() as u64)?))
    }
}

/// Predictor selection as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorConfig {
    Constant {
        duration_us: u64,
    },
    Linear(LinearPredictor),
    Table {
        path: PathBuf,
        #[serde(default)]
        extrapolate: bool,
    },
}

impl PredictorConfig {
    pub fn constant_ms(ms: u64) -> Self {
        PredictorConfig::Constant { duration_us: ms * 1000 }
    }

    pub fn build(&self) -> Result<Arc<dyn RuntimePredictor>, PredictError> {
        Ok(match self {
            PredictorConfig::Constant { duration_us } => {
                if *duration_us == 0 {
                    return Err(PredictError::InvalidConfig("constant duration must be positive".into()));
                }
                Arc::new(ConstantPredictor {
                    duration: Duration::from_micros(*duration_us),
                })
            }
            PredictorConfig::Linear(l) => Arc::new(l.clone()),
            PredictorConfig::Table { path, extrapolate } => Arc::new(TablePredictor::load(path, *extrapolate)?),
        })
    }
}
