//! Attack traces: one JSON line per proposed step, plus a per-binary summary.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Family, Mode};
use crate::detect::DetectorId;
use crate::error::{Error, Result};
use crate::toyprog::ToyProgram;
use crate::xform::{replay, size_limit, TransformRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Evaded,
    Exhausted,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// The acceptance test (gradient direction or confidence decrease) failed.
    NotImproving,
    /// The candidate behaved differently from the original.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub iteration: usize,
    pub record: TransformRecord,
    /// Objective before and after the candidate: cross-entropy for white-box
    /// attacks, p_c or nearest-signature similarity for black-box ones.
    pub before: f64,
    pub after: f64,
    /// `<g, delta>` for white-box candidates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_order: Option<f64>,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rejection: Option<Rejection>,
    /// Detector queries spent on this step.
    pub queries: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub block_size: u32,
    pub windows: usize,
    pub covered: usize,
    /// Windows overlapping code in which no substitution applied.
    pub uncovered_code_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub binary_id: u32,
    pub label: u8,
    pub target: DetectorId,
    pub mode: Mode,
    pub family: Family,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub iterations: usize,
    pub proposed: usize,
    pub accepted: usize,
    pub queries: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub original_size: usize,
    pub final_size: usize,
    pub final_nld: f64,
    pub final_digest: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub chunks: Option<ChunkStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrace {
    pub summary: AttackSummary,
    pub steps: Vec<TraceStep>,
}

impl AttackTrace {
    pub fn accepted_records(&self) -> Vec<TransformRecord> {
        self.steps
            .iter()
            .filter(|s| s.accepted)
            .map(|s| s.record.clone())
            .collect()
    }

    /// Re-applies the accepted records to `original`.
    pub fn replay(&self, original: &ToyProgram) -> Result<ToyProgram> {
        replay(
            original,
            &self.accepted_records(),
            size_limit(original.serialized_len()),
        )
    }

    /// Writes `<dir>/traces/<id>.jsonl` and `<dir>/summaries/<id>.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let traces = dir.join("traces");
        let summaries = dir.join("summaries");
        for d in [&traces, &summaries] {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let id = self.summary.binary_id;
        let path = traces.join(format!("{id:05}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for step in &self.steps {
            serde_json::to_writer(&mut w, step)?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = summaries.join(format!("{id:05}.json"));
        let mut text = serde_json::to_vec_pretty(&self.summary)?;
        text.push(b'\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn read_trace_steps(path: &Path) -> Result<Vec<TraceStep>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut steps = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        steps.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_owned(),
            reason: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(steps)
}
