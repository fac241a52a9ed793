//! Timestamped current/voltage samples and the CSV formats built on them.

use std::fmt::Write as _;
use std::io::Read;

use thiserror::Error;

/// One measurement: time in seconds, current in amperes (charging positive),
/// terminal voltage in volts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub i: f64,
    pub v: f64,
}

impl Sample {
    pub fn new(t: f64, i: f64, v: f64) -> Self {
        Sample { t, i, v }
    }
}

pub const TRACE_HEADER: &str = "t_s,i_a,v_v";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("schema mismatch at line {line}: {msg}")]
    SchemaMismatch { line: u64, msg: String },
    #[error("timestamp {t} at line {line} is earlier than the previous sample")]
    NonMonotoneTime { line: u64, t: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Formats a float with 17 significant digits, which always parses back to
/// the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_to_csv(samples: &[Sample]) -> String {
    let mut out = String::with_capacity(samples.len() * 72 + 16);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for s in samples {
        let _ = writeln!(out, "{},{},{}", fmt_f64(s.t), fmt_f64(s.i), fmt_f64(s.v));
    }
    out
}

pub fn write_trace(samples: &[Sample], path: &std::path::Path) -> Result<(), TraceError> {
    std::fs::write(path, trace_to_csv(samples))?;
    Ok(())
}

pub fn read_trace<R: Read>(reader: R) -> Result<Vec<Sample>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| TraceError::SchemaMismatch {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(TRACE_HEADER.split(',')) {
        return Err(TraceError::SchemaMismatch {
            line: 1,
            msg: format!("expected header `{TRACE_HEADER}`"),
        });
    }
    let mut samples: Vec<Sample> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TraceError::SchemaMismatch {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(TraceError::SchemaMismatch {
                line,
                msg: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let mut vals = [0.0; 3];
        for (k, field) in rec.iter().enumerate() {
            vals[k] = field
                .parse::<f64>()
                .map_err(|e| TraceError::SchemaMismatch {
                    line,
                    msg: format!("field {} `{field}`: {e}", k + 1),
                })?;
            if !vals[k].is_finite() {
                return Err(TraceError::SchemaMismatch {
                    line,
                    msg: format!("field {} is not finite", k + 1),
                });
            }
        }
        let s = Sample::new(vals[0], vals[1], vals[2]);
        if let Some(prev) = samples.last() {
            if s.t < prev.t {
                return Err(TraceError::NonMonotoneTime { line, t: s.t });
            }
        }
        samples.push(s);
    }
    Ok(samples)
}

pub fn load_trace(path: &std::path::Path) -> Result<Vec<Sample>, TraceError> {
    read_trace(std::fs::File::open(path)?)
}
