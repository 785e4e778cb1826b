use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use evidence_core::trace_schema::{parse_trace, CandidateTrace, FrameHorizon, RawOutput};
use evidence_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn open_input(path: Option<&Path>) -> Result<Box<dyn BufRead>> {
    match path {
        None => Ok(Box::new(BufReader::new(io::stdin()))),
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::Data(format!("cannot open {}: {e}", p.display())))?;
            Ok(Box::new(BufReader::new(f)))
        }
    }
}

pub fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::Data(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Parses every non-blank line as `T`, naming `source` and the line on failure.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead, source: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Data(format!("{source} line {}: {e}", n + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub fn source_name(path: Option<&Path>) -> String {
    path.map_or_else(|| "stdin".to_string(), |p| p.display().to_string())
}

pub fn write_json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// A raw output, optionally with its own frame count.
#[derive(Debug, Clone, Deserialize)]
pub struct RawInput {
    #[serde(default)]
    pub total_frames: Option<u32>,
    #[serde(flatten)]
    pub raw: RawOutput,
}

/// Either an already parsed trace or a raw output to parse.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TraceInput {
    Trace(CandidateTrace),
    Raw(RawInput),
}

impl TraceInput {
    pub fn into_trace(self, default_frames: u32, tail_fraction: f64) -> Result<CandidateTrace> {
        match self {
            TraceInput::Trace(t) => Ok(t),
            TraceInput::Raw(r) => {
                r.raw.validate()?;
                let horizon = FrameHorizon::new(r.total_frames.unwrap_or(default_frames))
                    .map_err(|e| Error::Data(e.to_string()))?;
                parse_trace(&r.raw, horizon, tail_fraction)
            }
        }
    }
}
