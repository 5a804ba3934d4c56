//! Brute-force k-nearest-neighbour detector over full feature vectors.

use std::path::Path;

use super::{
    expect_kind, f64_payload, header_field, write_model, Detector, DetectorId, ModelHeader, Verdict, MODEL_VERSION,
};
use crate::error::{Error, Result};
use crate::featx::{extract_binary, DIM};

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct KnnDetector {
    k: usize,
    seed: u64,
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

impl KnnDetector {
    pub fn train(features: Vec<Vec<f64>>, labels: Vec<u8>, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("k must be odd, got {k}")));
        }
        if features.len() != labels.len() || features.len() < k {
            return Err(Error::Training(format!(
                "{} samples, {} labels, k = {k}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(f) = features.iter().find(|f| f.len() != features[0].len()) {
            return Err(Error::Training(format!(
                "ragged feature rows ({} vs {})",
                f.len(),
                features[0].len()
            )));
        }
        Ok(KnnDetector {
            k,
            seed,
            features,
            labels,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Indices of the k nearest rows, ordered by distance then index.
    pub fn neighbours(&self, x: &[f64]) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        d.select_nth_unstable_by(self.k - 1, by_distance);
        d.truncate(self.k);
        d.sort_by(by_distance);
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// Fraction of malware among the k nearest neighbours.
    pub fn malware_fraction(&self, x: &[f64]) -> f64 {
        let hits = self.neighbours(x).iter().filter(|&&i| self.labels[i] == 1).count();
        hits as f64 / self.k as f64
    }

    pub fn classify_features(&self, x: &[f64]) -> Verdict {
        let f = self.malware_fraction(x);
        let label = u8::from(f > 0.5);
        Verdict {
            label,
            confidence: if label == 1 { f } else { 1.0 - f },
            detector: DetectorId::Knn,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut extra = serde_json::Map::new();
        extra.insert("k".into(), self.k.into());
        extra.insert("dim".into(), DIM.into());
        extra.insert("labels".into(), serde_json::to_value(&self.labels)?);
        let header = ModelHeader {
            kind: DetectorId::Knn,
            version: MODEL_VERSION,
            seed: self.seed,
            extra,
        };
        let payload: Vec<u8> = self.features.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
        write_model(path, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = expect_kind(path, DetectorId::Knn)?;
        let k: usize = header_field(path, &header, "k")?;
        let dim: usize = header_field(path, &header, "dim")?;
        let labels: Vec<u8> = header_field(path, &header, "labels")?;
        let values = f64_payload(path, &payload, labels.len() * dim)?;
        let features = values.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        KnnDetector::train(features, labels, k, header.seed)
    }
}

impl Detector for KnnDetector {
    fn id(&self) -> DetectorId {
        DetectorId::Knn
    }

    fn classify(&self, binary: &[u8]) -> Result<Verdict> {
        Ok(self.classify_features(extract_binary(binary)?.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_distances_prefer_smaller_index() {
        let knn = KnnDetector::train(vec![vec![1.0], vec![-1.0], vec![5.0]], vec![1, 0, 0], 1, 0).unwrap();
        assert_eq!(knn.neighbours(&[0.0]), vec![0]);
        assert_eq!(knn.classify_features(&[0.0]).label, 1);
    }

    #[test]
    fn even_k_is_rejected() {
        assert!(KnnDetector::train(vec![vec![0.0]; 4], vec![0, 1, 0, 1], 2, 0).is_err());
    }

    #[test]
    fn confidence_is_malware_fraction() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let knn = KnnDetector::train(rows, vec![1, 1, 1, 0, 0], 5, 0).unwrap();
        let v = knn.classify_features(&[0.0]);
        assert_eq!((v.label, v.confidence), (1, 0.6));
    }
}
