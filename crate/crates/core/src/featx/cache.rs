//! `.fvec` files: flat little-endian f64 arrays with a JSON sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FeatureVector, DIM};
use crate::error::{Error, Result};

pub const EXTRACTION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FvecSidecar {
    pub dimension: usize,
    pub extraction_version: u32,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_fvec(path: &Path, v: &FeatureVector) -> Result<()> {
    let bytes: Vec<u8> = v.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = FvecSidecar {
        dimension: DIM,
        extraction_version: EXTRACTION_VERSION,
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn read_fvec(path: &Path) -> Result<FeatureVector> {
    let side = sidecar_path(path);
    let raw = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: FvecSidecar = serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.extraction_version != EXTRACTION_VERSION {
        return Err(Error::VersionMismatch {
            expected: EXTRACTION_VERSION,
            found: sidecar.extraction_version,
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if sidecar.dimension != DIM || bytes.len() != DIM * 8 {
        return Err(Error::Corrupt {
            path: path.to_owned(),
            reason: format!("expected {DIM} values, found {} bytes", bytes.len()),
        });
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    FeatureVector::from_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fvec");
        let v = FeatureVector::from_values((0..DIM).map(|i| i as f64 / 7.0).collect()).unwrap();
        write_fvec(&path, &v).unwrap();
        assert_eq!(read_fvec(&path).unwrap(), v);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(read_fvec(&path), Err(Error::Corrupt { .. })));
    }
}
