//! Evasion attacks: hill climbs over functionality-preserving
//! transformations, plus the per-window attack on the fuzzy hash.
//!
//! Every candidate must pass the [`Oracle`] before it can be accepted, so a
//! shipped binary always behaves like its original on the oracle inputs.

mod chunks;
mod oracle;
mod search;
mod trace;

use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ctph::FuzzyDigest;
use crate::detect::{DetectorId, HashDetector, KnnDetector, RawByteScorer};
use crate::error::{Error, Result};
use crate::featx::{embedding_for_gradient, extract_binary};
use crate::toyprog::strip_header;

pub use chunks::{attack_ctph_chunks, chunk_windows};
pub use oracle::{Oracle, ORACLE_INPUTS};
pub use search::{attack_blackbox, attack_whitebox, optimize_nop_byte, NopChoice, NopObjective};
pub use trace::{read_trace_steps, AttackSummary, AttackTrace, ChunkStats, Outcome, Rejection, TraceStep};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Whitebox,
    Blackbox,
    Chunks,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitebox" => Ok(Mode::Whitebox),
            "blackbox" => Ok(Mode::Blackbox),
            "chunks" => Ok(Mode::Chunks),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}`"))),
        }
    }
}

/// Transformation family an attack proposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ipr,
    Disp,
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ipr" => Ok(Family::Ipr),
            "disp" => Ok(Family::Disp),
            _ => Err(Error::InvalidArgument(format!("unknown family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target: DetectorId,
    pub mode: Mode,
    pub family: Family,
    pub max_iterations: usize,
    /// Wall-clock limit per binary, in seconds.
    pub time_limit: f64,
    /// Fraction of the binary size to displace, spread evenly over functions.
    pub disp_budget: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// Mode and family per target: white-box displacement against the raw-byte
    /// scorer, black-box displacement against k-NN, black-box in-place
    /// rewriting against the fuzzy hash.
    pub fn default_for(target: DetectorId, seed: u64) -> Self {
        let (mode, family) = match target {
            DetectorId::Rawbyte => (Mode::Whitebox, Family::Disp),
            DetectorId::Knn => (Mode::Blackbox, Family::Disp),
            DetectorId::Ctph => (Mode::Blackbox, Family::Ipr),
        };
        AttackConfig {
            target,
            mode,
            family,
            max_iterations: 20,
            time_limit: 60.0,
            disp_budget: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.disp_budget > 0.0 && self.disp_budget <= 0.05) {
            return Err(Error::Config(format!(
                "disp_budget {} outside (0, 0.05]",
                self.disp_budget
            )));
        }
        if self.time_limit.is_nan() || self.time_limit <= 0.0 {
            return Err(Error::Config("time_limit must be positive".into()));
        }
        match (self.mode, self.target, self.family) {
            (Mode::Whitebox, t, _) if t != DetectorId::Rawbyte => Err(Error::Config(format!(
                "white-box mode needs a differentiable target, not {t}"
            ))),
            (Mode::Whitebox, _, Family::Ipr) => Err(Error::Config("white-box mode proposes displacements only".into())),
            (Mode::Chunks, t, _) if t != DetectorId::Ctph => {
                Err(Error::Config(format!("chunk mode attacks the fuzzy hash, not {t}")))
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn time_limit(&self) -> Duration {
        Duration::from_secs_f64(self.time_limit)
    }
}

/// A detector viewed as an attack target.
#[derive(Clone, Copy)]
pub enum Target<'a> {
    Rawbyte(&'a RawByteScorer),
    Knn(&'a KnnDetector),
    Ctph(&'a HashDetector),
}

impl Target<'_> {
    pub fn id(&self) -> DetectorId {
        match self {
            Target::Rawbyte(_) => DetectorId::Rawbyte,
            Target::Knn(_) => DetectorId::Knn,
            Target::Ctph(_) => DetectorId::Ctph,
        }
    }

    /// The quantity a black-box attack drives down: p_c for the learned
    /// detectors, similarity to the nearest signature for the hash detector.
    pub fn objective(&self, binary: &[u8], label: u8) -> Result<f64> {
        match self {
            Target::Rawbyte(m) => Ok(m.p_class(&embedding_for_gradient(strip_header(binary)?), label)),
            Target::Knn(m) => {
                let f = m.malware_fraction(extract_binary(binary)?.as_slice());
                Ok(if label == 1 { f } else { 1.0 - f })
            }
            Target::Ctph(m) => Ok(1.0 - m.nearest(&FuzzyDigest::of(strip_header(binary)?))?.distance),
        }
    }

    /// Learned detectors are evaded when their label differs from the true
    /// one; the hash detector when the nearest signature is beyond theta.
    pub fn evaded(&self, binary: &[u8], label: u8) -> Result<bool> {
        match self {
            Target::Rawbyte(m) => Ok(m
                .classify_embedding(&embedding_for_gradient(strip_header(binary)?))
                .label
                != label),
            Target::Knn(m) => Ok(m.classify_features(extract_binary(binary)?.as_slice()).label != label),
            Target::Ctph(m) => Ok(m.nearest(&FuzzyDigest::of(strip_header(binary)?))?.distance > m.theta()),
        }
    }
}
