#![allow(dead_code)]

use evasim::corpus::{generate_corpus, train_test_split, GenConfig, Sample};
use evasim::ctph::{DbEntry, FuzzyDigest, SignatureDb};
use evasim::detect::{train_rawbyte, HashDetector, KnnDetector, RawByteScorer, TrainConfig};
use evasim::featx::{embedding_for_gradient, extract_binary};
use evasim::toyprog::strip_header;

pub fn small_config(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        n_benign: 12,
        n_malware: 12,
        ..GenConfig::default()
    }
}

pub struct Fixture {
    pub samples: Vec<Sample>,
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub rawbyte: RawByteScorer,
    pub knn: KnnDetector,
    pub ctph: HashDetector,
}

impl Fixture {
    pub fn sample(&self, id: u32) -> &Sample {
        self.samples.iter().find(|s| s.id == id).unwrap()
    }

    /// The longest program, which has room for a three-instruction displacement.
    pub fn largest(&self) -> &Sample {
        self.samples.iter().max_by_key(|s| s.program.serialized_len()).unwrap()
    }

    pub fn test_malware(&self) -> Vec<&Sample> {
        self.test
            .iter()
            .map(|&i| self.sample(i))
            .filter(|s| s.label() == 1)
            .collect()
    }
}

pub fn fixture(seed: u64) -> Fixture {
    let samples = generate_corpus(&small_config(seed)).unwrap();
    let (train, test) = train_test_split(&samples, seed);
    let bins = |ids: &[u32]| -> Vec<(Vec<u8>, u8)> {
        ids.iter()
            .map(|&i| {
                let s = samples.iter().find(|s| s.id == i).unwrap();
                (s.program.serialize().unwrap(), s.label())
            })
            .collect()
    };
    let tr = bins(&train);
    let ys: Vec<u8> = tr.iter().map(|b| b.1).collect();
    let emb: Vec<Vec<f64>> = tr
        .iter()
        .map(|(b, _)| embedding_for_gradient(strip_header(b).unwrap()))
        .collect();
    let feats: Vec<Vec<f64>> = tr.iter().map(|(b, _)| extract_binary(b).unwrap().into_vec()).collect();
    let rawbyte = train_rawbyte(
        &emb,
        &ys,
        TrainConfig {
            seed,
            epochs: 100,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let knn = KnnDetector::train(feats, ys, 3, seed).unwrap();
    let entries = bins(&test)
        .into_iter()
        .zip(&test)
        .map(|((b, label), &id)| DbEntry {
            id,
            label,
            digest: FuzzyDigest::of(strip_header(&b).unwrap()),
            source_path: format!("{id}"),
        })
        .collect();
    let ctph = HashDetector::new(SignatureDb::new(entries), 0.25).unwrap();
    Fixture {
        samples,
        train,
        test,
        rawbyte,
        knn,
        ctph,
    }
}
