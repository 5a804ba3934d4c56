//! Fuzzy-hash database detector.

use std::io::BufReader;
use std::path::Path;

use super::{expect_kind, header_field, write_model, Detector, DetectorId, ModelHeader, Verdict, MODEL_VERSION};
use crate::ctph::{FuzzyDigest, Nearest, SignatureDb};
use crate::error::{Error, Result};
use crate::toyprog::strip_header;

/// Largest distance still counted as a match.
pub const DEFAULT_THETA: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct HashDetector {
    db: SignatureDb,
    theta: f64,
}

impl HashDetector {
    pub fn new(db: SignatureDb, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
        }
        Ok(HashDetector { db, theta })
    }

    pub fn db(&self) -> &SignatureDb {
        &self.db
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn nearest(&self, digest: &FuzzyDigest) -> Result<Nearest> {
        self.db.nearest(digest)
    }

    /// Within `theta`, the label of the nearest signature; a tie between
    /// several signatures at that distance is not an unambiguous match and
    /// yields label 0. Beyond `theta`, label 0 with confidence `1 - d`.
    pub fn verdict_for(&self, nearest: &Nearest) -> Verdict {
        let similarity = 1.0 - nearest.distance;
        let label = if nearest.distance <= self.theta && nearest.ties == 1 {
            nearest.label
        } else {
            0
        };
        Verdict {
            label,
            confidence: similarity,
            detector: DetectorId::Ctph,
        }
    }

    pub fn classify_digest(&self, digest: &FuzzyDigest) -> Result<Verdict> {
        Ok(self.verdict_for(&self.nearest(digest)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = serde_json::Map::new();
        extra.insert("theta".into(), self.theta.into());
        let header = ModelHeader {
            kind: DetectorId::Ctph,
            version: MODEL_VERSION,
            seed: 0,
            extra,
        };
        let mut payload = Vec::new();
        for entry in self.db.entries() {
            serde_json::to_writer(&mut payload, entry)?;
            payload.push(b'\n');
        }
        write_model(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = expect_kind(path, DetectorId::Ctph)?;
        let theta: f64 = header_field(path, &header, "theta")?;
        let db = SignatureDb::read(BufReader::new(&payload[..]), path)?;
        HashDetector::new(db, theta)
    }
}

impl Detector for HashDetector {
    fn id(&self) -> DetectorId {
        DetectorId::Ctph
    }

    fn classify(&self, binary: &[u8]) -> Result<Verdict> {
        self.classify_digest(&FuzzyDigest::of(strip_header(binary)?))
    }
}
