//! The three reference detectors behind one verdict interface, and their
//! on-disk model format.
//!
//! A model file starts with one line of JSON ([`ModelHeader`]) followed by a
//! kind-specific payload: little-endian f64 values for the learned detectors,
//! JSON lines of signatures for the hash detector.

mod hash;
mod knn;
mod rawbyte;

use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hash::{HashDetector, DEFAULT_THETA};
pub use knn::{KnnDetector, DEFAULT_K};
pub(crate) use rawbyte::{column_stats, fit_logistic};
pub use rawbyte::{sigmoid, softplus, train_rawbyte, RawByteScorer, TrainConfig, TrainReport};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorId {
    Rawbyte,
    Knn,
    Ctph,
}

impl DetectorId {
    pub const ALL: [DetectorId; 3] = [DetectorId::Rawbyte, DetectorId::Knn, DetectorId::Ctph];

    pub fn name(self) -> &'static str {
        match self {
            DetectorId::Rawbyte => "rawbyte",
            DetectorId::Knn => "knn",
            DetectorId::Ctph => "ctph",
        }
    }
}

impl fmt::Display for DetectorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DetectorId::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown detector `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: u8,
    /// Confidence in `label`.
    pub confidence: f64,
    pub detector: DetectorId,
}

impl Verdict {
    /// Confidence assigned to `class`; this is p_c when `class` is the true label.
    pub fn confidence_in(&self, class: u8) -> f64 {
        if class == self.label {
            self.confidence
        } else {
            1.0 - self.confidence
        }
    }
}

/// A detector that labels serialized binaries (header included).
pub trait Detector: Send + Sync {
    fn id(&self) -> DetectorId;
    fn classify(&self, binary: &[u8]) -> Result<Verdict>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: DetectorId,
    pub version: u32,
    pub seed: u64,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Any of the three detectors, as loaded from a model file.
#[derive(Clone, Debug)]
pub enum Model {
    Rawbyte(RawByteScorer),
    Knn(KnnDetector),
    Ctph(HashDetector),
}

impl Model {
    pub fn load(path: &Path) -> Result<Model> {
        let (header, _) = read_model(path)?;
        Ok(match header.kind {
            DetectorId::Rawbyte => Model::Rawbyte(RawByteScorer::load(path)?),
            DetectorId::Knn => Model::Knn(KnnDetector::load(path)?),
            DetectorId::Ctph => Model::Ctph(HashDetector::load(path)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Model::Rawbyte(m) => m.save(path),
            Model::Knn(m) => m.save(path),
            Model::Ctph(m) => m.save(path),
        }
    }

    pub fn as_detector(&self) -> &dyn Detector {
        match self {
            Model::Rawbyte(m) => m,
            Model::Knn(m) => m,
            Model::Ctph(m) => m,
        }
    }
}

pub(crate) fn write_model(path: &Path, header: &ModelHeader, payload: &[u8]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

pub(crate) fn read_model(path: &Path) -> Result<(ModelHeader, Vec<u8>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if !line.ends_with('\n') {
        return Err(corrupt(path, "missing model header"));
    }
    let header: ModelHeader =
        serde_json::from_str(&line).map_err(|e| corrupt(path, format!("bad model header: {e}")))?;
    if header.version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: header.version,
        });
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    Ok((header, payload))
}

pub(crate) fn expect_kind(path: &Path, expected: DetectorId) -> Result<(ModelHeader, Vec<u8>)> {
    let (header, payload) = read_model(path)?;
    if header.kind != expected {
        return Err(Error::KindMismatch {
            expected: expected.to_string(),
            found: header.kind.to_string(),
        });
    }
    Ok((header, payload))
}

pub(crate) fn f64_payload(path: &Path, payload: &[u8], expected: usize) -> Result<Vec<f64>> {
    if payload.len() != expected * 8 {
        return Err(corrupt(
            path,
            format!("expected {} payload bytes, found {}", expected * 8, payload.len()),
        ));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub(crate) fn header_field<T: serde::de::DeserializeOwned>(path: &Path, header: &ModelHeader, key: &str) -> Result<T> {
    let value = header
        .extra
        .get(key)
        .ok_or_else(|| corrupt(path, format!("model header lacks `{key}`")))?;
    serde_json::from_value(value.clone()).map_err(|e| corrupt(path, format!("bad `{key}`: {e}")))
}
