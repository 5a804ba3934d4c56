//! Detecting the transformation itself: a standardized logistic model over
//! the full feature vector that separates originals (label 0) from their
//! transformed versions (label 1).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detect::{column_stats, fit_logistic, sigmoid, TrainConfig};
use crate::error::{Error, Result};
use crate::featx::DIM;
use crate::metrics::ConfusionMatrix;
use crate::rng;

/// An original and one transformed version of it, as feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPair {
    pub binary_id: u32,
    /// Name of the attack set the transform came from, e.g. `ctph`.
    pub set: String,
    /// NLD recorded in the attack summary.
    pub nld: f64,
    pub original: Vec<f64>,
    pub transformed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl MetaModel {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Probability that `x` was transformed.
    pub fn score(&self, x: &[f64]) -> f64 {
        let z: f64 = self.standardize(x).iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        sigmoid(z + self.bias)
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.score(x) >= 0.5)
    }

    /// Confusion matrix over pairs: each original counts as a negative and
    /// each transformed version as a positive.
    pub fn evaluate<'a>(&self, pairs: impl IntoIterator<Item = &'a MetaPair>) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for p in pairs {
            cm.record(self.predict(&p.original), 0);
            cm.record(self.predict(&p.transformed), 1);
        }
        cm
    }

    /// Weights in standardized units, largest magnitude first.
    pub fn top_features(&self, n: usize) -> Vec<(usize, f64)> {
        let mut idx: Vec<(usize, f64)> = self.weights.iter().copied().enumerate().collect();
        idx.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        idx.truncate(n);
        idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTraining {
    pub model: MetaModel,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
    pub held_out: ConfusionMatrix,
    /// Held-out confusion matrix per attack set.
    pub by_set: BTreeMap<String, ConfusionMatrix>,
}

/// Deterministic 80/20 split of binary ids: the sorted ids are shuffled with
/// the seed and the first `ceil(0.8 n)` train.
pub fn meta_split(ids: &[u32], seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut rng::stream(seed, &["meta-split"]));
    let cut = (ids.len() * 4).div_ceil(5);
    let (mut train, mut test) = (ids[..cut].to_vec(), ids[cut..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn meta_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 300,
        learning_rate: 1.0,
        l2: 0.0,
    }
}

/// Fits on the training pairs; features are standardized with the training
/// mean and deviation (constant features get unit scale).
pub fn fit_meta(pairs: &[&MetaPair], cfg: &TrainConfig) -> Result<MetaModel> {
    if pairs.is_empty() {
        return Err(Error::Training("meta-model needs at least one pair".into()));
    }
    if pairs
        .iter()
        .any(|p| p.original.len() != DIM || p.transformed.len() != DIM)
    {
        return Err(Error::Training(format!("meta features must have {DIM} entries")));
    }
    let rows: Vec<Vec<f64>> = pairs
        .iter()
        .flat_map(|p| [p.original.clone(), p.transformed.clone()])
        .collect();
    let (mean, scale) = column_stats(&rows);
    let mut model = MetaModel {
        mean,
        scale,
        weights: Vec::new(),
        bias: 0.0,
    };
    let xs: Vec<Vec<f64>> = rows.iter().map(|r| model.standardize(r)).collect();
    let ys: Vec<u8> = (0..rows.len()).map(|i| (i % 2) as u8).collect();
    let (w, b, _) = fit_logistic(&xs, &ys, cfg)?;
    model.weights = w;
    model.bias = b;
    Ok(model)
}

/// Splits pairs 80/20 by binary id (an original and its transform always
/// land on the same side), fits, and scores the held-out pairs.
pub fn train_meta(pairs: &[MetaPair], seed: u64) -> Result<MetaTraining> {
    let ids: Vec<u32> = pairs.iter().map(|p| p.binary_id).collect();
    let (train_ids, test_ids) = meta_split(&ids, seed);
    let train: Vec<&MetaPair> = pairs
        .iter()
        .filter(|p| train_ids.binary_search(&p.binary_id).is_ok())
        .collect();
    let test: Vec<&MetaPair> = pairs
        .iter()
        .filter(|p| test_ids.binary_search(&p.binary_id).is_ok())
        .collect();
    let model = fit_meta(&train, &meta_train_config(seed))?;
    let held_out = model.evaluate(test.iter().copied());
    let mut by_set: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
    for p in &test {
        let cm = by_set.entry(p.set.clone()).or_default();
        *cm = *cm + model.evaluate(std::iter::once(*p));
    }
    Ok(MetaTraining {
        model,
        train_ids,
        test_ids,
        held_out,
        by_set,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub n: usize,
    pub top_ids: Vec<u32>,
    pub bottom_ids: Vec<u32>,
    pub top: ConfusionMatrix,
    pub bottom: ConfusionMatrix,
}

/// Indices of `pairs` sorted by NLD, highest first; ties by binary id.
pub fn rank_by_nld(pairs: &[MetaPair]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| {
        pairs[b]
            .nld
            .total_cmp(&pairs[a].nld)
            .then(pairs[a].binary_id.cmp(&pairs[b].binary_id))
    });
    idx
}

/// Scores the model on the `n` most and `n` least transformed pairs.
pub fn extremes_experiment(model: &MetaModel, pairs: &[MetaPair], n: usize) -> Result<Extremes> {
    if n == 0 {
        return Err(Error::InvalidArgument("extremes experiment needs n >= 1".into()));
    }
    if pairs.len() < 2 * n {
        return Err(Error::InvalidArgument(format!(
            "extremes experiment needs {} pairs, got {}",
            2 * n,
            pairs.len()
        )));
    }
    let ranked = rank_by_nld(pairs);
    let top = &ranked[..n];
    let bottom = &ranked[ranked.len() - n..];
    Ok(Extremes {
        n,
        top_ids: top.iter().map(|&i| pairs[i].binary_id).collect(),
        bottom_ids: bottom.iter().map(|&i| pairs[i].binary_id).collect(),
        top: model.evaluate(top.iter().map(|&i| &pairs[i])),
        bottom: model.evaluate(bottom.iter().map(|&i| &pairs[i])),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pair(id: u32, nld: f64, shift: f64, rng: &mut impl Rng) -> MetaPair {
        let original: Vec<f64> = (0..DIM).map(|_| rng.gen::<f64>()).collect();
        let mut transformed = original.clone();
        transformed[7] += shift;
        MetaPair {
            binary_id: id,
            set: "ctph".into(),
            nld,
            original,
            transformed,
        }
    }

    #[test]
    fn split_is_reproducible_and_eighty_percent() {
        let ids: Vec<u32> = (0..50).collect();
        let (a, b) = meta_split(&ids, 9);
        assert_eq!((a.clone(), b.clone()), meta_split(&ids, 9));
        assert_eq!(a.len(), 40);
        assert_eq!(b.len(), 10);
        assert_ne!(meta_split(&ids, 10).0, a);
    }

    #[test]
    fn identical_classes_are_near_chance() {
        let mut rng = rng::stream(1, &["t"]);
        let pairs: Vec<MetaPair> = (0..60).map(|i| pair(i, 0.0, 0.0, &mut rng)).collect();
        let t = train_meta(&pairs, 3).unwrap();
        let acc = t.held_out.accuracy().value().unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn shifted_feature_is_detected() {
        let mut rng = rng::stream(2, &["t"]);
        let pairs: Vec<MetaPair> = (0..200).map(|i| pair(i, 0.1, 2.0, &mut rng)).collect();
        let t = train_meta(&pairs, 3).unwrap();
        assert!(t.held_out.accuracy().value().unwrap() >= 0.95, "{:?}", t.held_out);
        assert_eq!(t.model.top_features(1)[0].0, 7);
        assert_eq!(t.by_set["ctph"], t.held_out);
    }

    #[test]
    fn extremes_ranking_matches_sort() {
        let mut rng = rng::stream(3, &["t"]);
        let pairs: Vec<MetaPair> = (0..30).map(|i| pair(i, rng.gen::<f64>(), 0.0, &mut rng)).collect();
        let mut nlds: Vec<f64> = pairs.iter().map(|p| p.nld).collect();
        nlds.sort_by(|a, b| b.total_cmp(a));
        let ranked: Vec<f64> = rank_by_nld(&pairs).iter().map(|&i| pairs[i].nld).collect();
        assert_eq!(ranked, nlds);
        let refs: Vec<&MetaPair> = pairs.iter().collect();
        let model = fit_meta(&refs, &meta_train_config(0)).unwrap();
        let ex = extremes_experiment(&model, &pairs, 5).unwrap();
        assert_eq!(ex.top.total(), 10);
        assert!(matches!(
            extremes_experiment(&model, &pairs, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(extremes_experiment(&model, &pairs, 16).is_err());
    }
}
