//! Append-only JSONL search trace.
//!
//! Line 1 is a [`TraceHeader`]. Each iteration then writes one `evaluation`
//! record per candidate, in candidate order, followed by one `iteration`
//! summary. A failed iteration writes a `failure` record instead of the
//! summary. Timing information is deliberately absent so identical searches
//! produce byte-identical traces.
//!
//! An iteration is durable once its summary line is on disk. Resuming
//! truncates everything after the last summary (partial evaluations, failure
//! records, torn lines) and continues from there.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchConfig;
use crate::candidates::Provenance;
use crate::search::SearchSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("trace schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("trace does not start with a header record")]
    MissingHeader,
    #[error("trace header does not match this search: {0}")]
    HeaderMismatch(String),
    #[error("trace is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub schema_version: u32,
    pub template_digest: String,
    pub base_macs: u64,
    pub spec: SearchSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationRecord {
    pub iteration: u32,
    pub index: usize,
    pub parent: usize,
    pub provenance: Provenance,
    pub config: ArchConfig,
    pub macs: u64,
    pub accuracy: f64,
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSummary {
    pub iteration: u32,
    pub step_target: u64,
    pub candidate_count: usize,
    pub selected: usize,
    pub parent: usize,
    pub provenance: Provenance,
    pub config: ArchConfig,
    pub macs: u64,
    pub accuracy: f64,
    pub relaxed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureRecord {
    pub iteration: u32,
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nearest_misses: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Evaluation(EvaluationRecord),
    Iteration(IterationSummary),
    Failure(FailureRecord),
}

/// Destination for trace records.
pub trait TraceSink {
    fn record(&mut self, record: &TraceRecord) -> Result<(), TraceError>;

    /// Makes everything recorded so far durable.
    fn commit(&mut self) -> Result<(), TraceError> {
        Ok(())
    }
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, record: &TraceRecord) -> Result<(), TraceError> {
        self.push(record.clone());
        Ok(())
    }
}

/// Discards records.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _record: &TraceRecord) -> Result<(), TraceError> {
        Ok(())
    }
}

pub fn to_line(record: &TraceRecord) -> String {
    serde_json::to_string(record).expect("trace records serialize")
}

pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    /// Creates (or truncates) a trace file.
    pub fn create(path: &Path) -> Result<Self, TraceError> {
        let file = File::create(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(TraceWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    /// Truncates to `len` bytes and appends from there.
    pub fn append_at(path: &Path, len: u64) -> Result<Self, TraceError> {
        let io = |source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = OpenOptions::new().write(true).open(path).map_err(io)?;
        file.set_len(len).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(TraceWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl TraceSink for TraceWriter {
    fn record(&mut self, record: &TraceRecord) -> Result<(), TraceError> {
        writeln!(self.out, "{}", to_line(record)).map_err(|source| TraceError::Io {
            path: self.path.clone(),
            source,
        })
    }

    fn commit(&mut self) -> Result<(), TraceError> {
        let io = |source| TraceError::Io {
            path: self.path.clone(),
            source,
        };
        self.out.flush().map_err(io)?;
        self.out.get_ref().sync_data().map_err(io)
    }
}

/// A parsed trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
    /// Byte length of the prefix ending with the last iteration summary
    /// (or the header when no iteration completed).
    pub durable_len: u64,
    /// Number of leading records (header included) inside `durable_len`.
    pub durable_records: usize,
}

impl TraceLog {
    /// Reads a trace. A torn final line is ignored; any other malformed line
    /// is an error.
    pub fn read(path: &Path) -> Result<Self, TraceError> {
        let file = File::open(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(BufReader::new(file), path)
    }

    pub fn parse<R: BufRead>(mut reader: R, path: &Path) -> Result<Self, TraceError> {
        let mut raw = Vec::new();
        let mut offset = 0u64;
        loop {
            let mut line = Vec::new();
            let n = reader
                .read_until(b'\n', &mut line)
                .map_err(|source| TraceError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
            if n == 0 {
                break;
            }
            offset += n as u64;
            raw.push((line, offset));
        }

        let mut header = None;
        let mut records = Vec::new();
        let mut durable_len = 0;
        let mut durable_records = 0;
        for (i, (bytes, end)) in raw.into_iter().enumerate() {
            let complete = bytes.ends_with(b"\n");
            let parsed = std::str::from_utf8(&bytes)
                .map_err(|e| e.to_string())
                .and_then(|text| {
                    serde_json::from_str::<TraceRecord>(text).map_err(|e| e.to_string())
                });
            let record = match (parsed, complete) {
                (Ok(record), true) => record,
                // Only the final line can lack a newline: a crash tore it.
                (_, false) => break,
                (Err(message), true) => {
                    return Err(TraceError::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message,
                    })
                }
            };
            if i == 0 {
                match &record {
                    TraceRecord::Header(h) => {
                        if h.schema_version != SCHEMA_VERSION {
                            return Err(TraceError::SchemaVersion {
                                found: h.schema_version,
                                expected: SCHEMA_VERSION,
                            });
                        }
                        header = Some(h.clone());
                        durable_len = end;
                        durable_records = 1;
                    }
                    _ => return Err(TraceError::MissingHeader),
                }
            } else if matches!(record, TraceRecord::Header(_)) {
                return Err(TraceError::Inconsistent(format!(
                    "second header at line {}",
                    i + 1
                )));
            } else if matches!(record, TraceRecord::Iteration(_)) {
                durable_len = end;
                durable_records = records.len() + 1;
            }
            records.push(record);
        }
        let header = header.ok_or(TraceError::MissingHeader)?;
        Ok(TraceLog {
            header,
            records,
            durable_len,
            durable_records,
        })
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationSummary> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Iteration(s) => Some(s),
            _ => None,
        })
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &EvaluationRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Evaluation(e) => Some(e),
            _ => None,
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &FailureRecord> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Failure(f) => Some(f),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::GrowthParams;
    use crate::estimator::{EvaluatorRef, SurrogateParams};

    fn header() -> TraceHeader {
        TraceHeader {
            schema_version: SCHEMA_VERSION,
            template_digest: "abc".into(),
            base_macs: 100,
            spec: SearchSpec {
                target_macs: 200,
                iterations: 2,
                growth: GrowthParams::default(),
                evaluator: EvaluatorRef::Surrogate {
                    params: SurrogateParams {
                        stage_scales: vec![1.0],
                        stage_weights: vec![0.5],
                        resolution_scale: 32.0,
                        resolution_weight: 0.1,
                        noise: 0.0,
                        seed: 0,
                    },
                },
                seed: 1,
                frontier_only: false,
                relax_on_empty: false,
            },
        }
    }

    fn failure(iteration: u32) -> TraceRecord {
        TraceRecord::Failure(FailureRecord {
            iteration,
            kind: "timeout".into(),
            message: "x".into(),
            index: Some(0),
            nearest_misses: vec![],
        })
    }

    #[test]
    fn torn_last_line_is_ignored() {
        let mut text = to_line(&TraceRecord::Header(header())) + "\n";
        let header_len = text.len() as u64;
        text.push_str(&to_line(&failure(1)));
        text.push('\n');
        text.push_str("{\"record\": \"evalua");
        let log = TraceLog::parse(text.as_bytes(), Path::new("t")).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.durable_len, header_len);
        assert_eq!(log.durable_records, 1);
    }

    #[test]
    fn malformed_middle_line_is_an_error() {
        let text =
            to_line(&TraceRecord::Header(header())) + "\nnot json\n" + &to_line(&failure(1)) + "\n";
        assert!(matches!(
            TraceLog::parse(text.as_bytes(), Path::new("t")),
            Err(TraceError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn schema_version_is_checked() {
        let mut h = header();
        h.schema_version = 99;
        let text = to_line(&TraceRecord::Header(h)) + "\n";
        assert!(matches!(
            TraceLog::parse(text.as_bytes(), Path::new("t")),
            Err(TraceError::SchemaVersion { found: 99, .. })
        ));
        let text = to_line(&failure(1)) + "\n";
        assert!(matches!(
            TraceLog::parse(text.as_bytes(), Path::new("t")),
            Err(TraceError::MissingHeader)
        ));
    }

    #[test]
    fn header_round_trips() {
        let rec = TraceRecord::Header(header());
        let back: TraceRecord = serde_json::from_str(&to_line(&rec)).unwrap();
        assert_eq!(rec, back);
    }
}
