//! End-to-end orchestration: corpus generation, training, hashing,
//! detection, attacking every evaluation binary, and evaluation.
//!
//! All randomness derives from one root seed through named sub-streams, and
//! every parallel step collects its results in id order, so the thread count
//! never changes an output byte.

mod attacks;
mod eval;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, GenConfig, Manifest, Sample};
use crate::ctph::{DbEntry, FuzzyDigest, SignatureDb};
use crate::detect::{
    train_rawbyte, Detector, DetectorId, HashDetector, KnnDetector, RawByteScorer, TrainConfig, Verdict,
};
use crate::error::{Error, Result};
use crate::featx;
use crate::rng;
use crate::toyprog::strip_header;

pub use attacks::{attack_all, set_name, AttackSet, AttackSetSummary, ClassTally};
pub use eval::{
    evaluate, render_markdown, write_report, DetectorRow, EnsembleChoice, EnsembleRow, EvalOptions, ExtremesBlock,
    MetaBlock, Report, SetReport, REPORT_SCHEMA,
};

/// Where each stage reads and writes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub corpus: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn new(corpus: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Layout {
            corpus: corpus.into(),
            out: out.into(),
        }
    }

    /// Corpus under `<root>/corpus`, everything else under `<root>/out`.
    pub fn under(root: &Path) -> Self {
        Layout::new(root.join("corpus"), root.join("out"))
    }

    pub fn models(&self) -> PathBuf {
        self.out.join("models")
    }
    pub fn model(&self, id: DetectorId) -> PathBuf {
        self.models().join(format!("{id}.model"))
    }
    pub fn split(&self) -> PathBuf {
        self.models().join("split.json")
    }
    pub fn features(&self) -> PathBuf {
        self.out.join("features")
    }
    pub fn attacks(&self) -> PathBuf {
        self.out.join("attacks")
    }
    pub fn report(&self) -> PathBuf {
        self.out.join("report")
    }
}

/// Resolved configuration of one command, written as `run.json` next to its
/// outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord<T> {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub layout: Layout,
    pub config: T,
    pub version: String,
}

pub fn write_run<T: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    threads: usize,
    layout: &Layout,
    config: &T,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = RunRecord {
        command: command.to_owned(),
        seed,
        threads,
        layout: layout.clone(),
        config,
        version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    write_json(&dir.join("run.json"), &record)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

/// Runs `f` on a pool of `threads` workers (0 = one per core).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn gen_corpus(layout: &Layout, cfg: &GenConfig, threads: usize) -> Result<Manifest> {
    let samples = with_threads(threads, || corpus::generate_corpus(cfg))??;
    let manifest = corpus::write_corpus(&layout.corpus, cfg, &samples)?;
    write_run(&layout.corpus, "gen-corpus", cfg.seed, threads, layout, cfg)?;
    Ok(manifest)
}

/// Training and detector settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    pub k: usize,
    pub theta: f64,
}

impl TrainOptions {
    pub fn new(seed: u64) -> Self {
        let t = TrainConfig::default();
        TrainOptions {
            seed,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            l2: t.l2,
            k: crate::detect::DEFAULT_K,
            theta: crate::detect::DEFAULT_THETA,
        }
    }
}

/// Stratified halves of the corpus: the learned detectors train on `train`;
/// the hash database, the attacks and the evaluation use `test`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub train_size: usize,
    pub test_size: usize,
    pub rawbyte_train_accuracy: f64,
    /// Held-out accuracy of each learned detector on the test half.
    pub rawbyte_test_accuracy: f64,
    pub knn_test_accuracy: f64,
    pub signatures: usize,
}

/// The three trained detectors.
#[derive(Clone, Debug)]
pub struct Detectors {
    pub rawbyte: RawByteScorer,
    pub knn: KnnDetector,
    pub ctph: HashDetector,
}

impl Detectors {
    pub fn load(layout: &Layout) -> Result<Self> {
        Ok(Detectors {
            rawbyte: RawByteScorer::load(&layout.model(DetectorId::Rawbyte))?,
            knn: KnnDetector::load(&layout.model(DetectorId::Knn))?,
            ctph: HashDetector::load(&layout.model(DetectorId::Ctph))?,
        })
    }

    pub fn get(&self, id: DetectorId) -> &dyn Detector {
        match id {
            DetectorId::Rawbyte => &self.rawbyte,
            DetectorId::Knn => &self.knn,
            DetectorId::Ctph => &self.ctph,
        }
    }

    /// One verdict per detector, in [`DetectorId::ALL`] order.
    pub fn classify_all(&self, binary: &[u8]) -> Result<[Verdict; 3]> {
        Ok([
            self.rawbyte.classify(binary)?,
            self.knn.classify(binary)?,
            self.ctph.classify(binary)?,
        ])
    }
}

pub fn read_split(layout: &Layout) -> Result<Split> {
    read_json(&layout.split())
}

fn by_id<'a>(samples: &'a [Sample], ids: &[u32]) -> Vec<&'a Sample> {
    ids.iter()
        .map(|id| {
            samples
                .iter()
                .find(|s| s.id == *id)
                .expect("split ids come from the corpus")
        })
        .collect()
}

pub fn feature_path(layout: &Layout, id: u32) -> PathBuf {
    layout.features().join(format!("{id:05}.fvec"))
}

/// Extracts the feature vectors of `samples`, writing each to the feature
/// cache. The cache is always rewritten, never trusted, at training time.
fn features_for(layout: &Layout, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    std::fs::create_dir_all(layout.features()).map_err(|e| Error::io(layout.features(), e))?;
    samples
        .par_iter()
        .map(|s| {
            let path = feature_path(layout, s.id);
            let v = featx::extract_binary(&s.program.serialize()?)?;
            featx::write_fvec(&path, &v)?;
            Ok(v.into_vec())
        })
        .collect()
}

pub fn train(layout: &Layout, opts: &TrainOptions, threads: usize) -> Result<(Detectors, TrainSummary)> {
    let (_, samples) = corpus::read_corpus(&layout.corpus)?;
    let (train_ids, test_ids) = corpus::train_test_split(&samples, rng::sub_seed(opts.seed, &["split"]));
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(Error::Training("corpus too small to split".into()));
    }
    let split = Split {
        train: train_ids,
        test: test_ids,
    };
    let train = by_id(&samples, &split.train);
    let test = by_id(&samples, &split.test);
    let models = layout.models();
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    write_json(&layout.split(), &split)?;

    let (detectors, summary) = with_threads(threads, || -> Result<_> {
        let embed = |set: &[&Sample]| -> Result<Vec<Vec<f64>>> {
            set.par_iter()
                .map(|s| Ok(featx::embedding_for_gradient(strip_header(&s.program.serialize()?)?)))
                .collect()
        };
        let labels = |set: &[&Sample]| -> Vec<u8> { set.iter().map(|s| s.label()).collect() };
        let train_cfg = TrainConfig {
            seed: rng::sub_seed(opts.seed, &["train", "rawbyte"]),
            epochs: opts.epochs,
            learning_rate: opts.learning_rate,
            l2: opts.l2,
        };
        let rawbyte = train_rawbyte(&embed(&train)?, &labels(&train), train_cfg)?;
        let knn = KnnDetector::train(
            features_for(layout, &train)?,
            labels(&train),
            opts.k,
            rng::sub_seed(opts.seed, &["train", "knn"]),
        )?;
        let mut db = SignatureDb::new(Vec::new());
        let digests: Vec<FuzzyDigest> = test
            .par_iter()
            .map(|s| Ok(FuzzyDigest::of(strip_header(&s.program.serialize()?)?)))
            .collect::<Result<_>>()?;
        for (s, digest) in test.iter().zip(digests) {
            db.push(DbEntry {
                id: s.id,
                label: s.label(),
                digest,
                source_path: corpus::sample_path(Path::new(""), s.class, s.id)
                    .to_string_lossy()
                    .into_owned(),
            });
        }
        let ctph = HashDetector::new(db, opts.theta)?;

        let test_x = embed(&test)?;
        let test_f = features_for(layout, &test)?;
        let test_y = labels(&test);
        let acc = |hits: usize| hits as f64 / test.len() as f64;
        let raw_hits = test_x
            .iter()
            .zip(&test_y)
            .filter(|(x, &y)| rawbyte.classify_embedding(x).label == y)
            .count();
        let knn_hits = test_f
            .par_iter()
            .zip(&test_y)
            .filter(|(x, &y)| knn.classify_features(x).label == y)
            .count();
        let summary = TrainSummary {
            train_size: train.len(),
            test_size: test.len(),
            rawbyte_train_accuracy: rawbyte.report.train_accuracy,
            rawbyte_test_accuracy: acc(raw_hits),
            knn_test_accuracy: acc(knn_hits),
            signatures: ctph.db().len(),
        };
        Ok((Detectors { rawbyte, knn, ctph }, summary))
    })??;

    detectors.rawbyte.save(&layout.model(DetectorId::Rawbyte))?;
    detectors.knn.save(&layout.model(DetectorId::Knn))?;
    detectors.ctph.save(&layout.model(DetectorId::Ctph))?;
    write_json(&models.join("train_summary.json"), &summary)?;
    write_run(&models, "train", opts.seed, threads, layout, opts)?;
    Ok((detectors, summary))
}

/// A digest line of `hashes.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashLine {
    pub id: u32,
    pub label: u8,
    pub digest: FuzzyDigest,
}

pub fn digest_file(path: &Path) -> Result<FuzzyDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FuzzyDigest::of(strip_header(&bytes)?))
}

/// Digests every corpus binary into `<out>/hashes/hashes.jsonl`.
pub fn hash_corpus(layout: &Layout, threads: usize) -> Result<Vec<HashLine>> {
    let (manifest, samples) = corpus::read_corpus(&layout.corpus)?;
    let lines: Vec<HashLine> = with_threads(threads, || {
        samples
            .par_iter()
            .map(|s| {
                Ok(HashLine {
                    id: s.id,
                    label: s.label(),
                    digest: FuzzyDigest::of(strip_header(&s.program.serialize()?)?),
                })
            })
            .collect::<Result<_>>()
    })??;
    let dir = layout.out.join("hashes");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_jsonl(&dir.join("hashes.jsonl"), &lines)?;
    write_run(&dir, "hash", manifest.config.seed, threads, layout, &())?;
    Ok(lines)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Verdicts of all three detectors on one binary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub id: u32,
    pub label: u8,
    pub verdicts: [Verdict; 3],
    /// Signatures tied at the nearest distance; a tie within theta is
    /// reported as a miss by the hash detector.
    pub hash_ties: usize,
}

/// Classifies the evaluation half into `<out>/detections/originals.jsonl`.
pub fn detect_corpus(layout: &Layout, threads: usize) -> Result<Vec<DetectionLine>> {
    let detectors = Detectors::load(layout)?;
    let split = read_split(layout)?;
    let (manifest, samples) = corpus::read_corpus(&layout.corpus)?;
    let test = by_id(&samples, &split.test);
    let lines: Vec<DetectionLine> = with_threads(threads, || {
        test.par_iter()
            .map(|s| {
                let bytes = s.program.serialize()?;
                let nearest = detectors.ctph.nearest(&FuzzyDigest::of(strip_header(&bytes)?))?;
                Ok(DetectionLine {
                    id: s.id,
                    label: s.label(),
                    verdicts: detectors.classify_all(&bytes)?,
                    hash_ties: nearest.ties,
                })
            })
            .collect::<Result<_>>()
    })??;
    let dir = layout.out.join("detections");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_jsonl(&dir.join("originals.jsonl"), &lines)?;
    write_run(&dir, "detect", manifest.config.seed, threads, layout, &())?;
    Ok(lines)
}

/// Everything a full run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: GenConfig,
    pub train: TrainOptions,
    pub max_iterations: usize,
    pub time_limit: f64,
    pub threads: usize,
    /// Also run the per-window attack on the hash detector.
    pub chunks: bool,
    /// Binaries on each side of the meta model's extremes comparison.
    pub extremes_n: usize,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            seed,
            corpus: GenConfig {
                seed,
                ..GenConfig::default()
            },
            train: TrainOptions::new(seed),
            max_iterations: 20,
            time_limit: 60.0,
            threads: 0,
            chunks: true,
            extremes_n: 20,
        }
    }

    pub fn attack_configs(&self) -> Vec<crate::attack::AttackConfig> {
        let mut out: Vec<_> = DetectorId::ALL
            .into_iter()
            .map(|t| {
                let mut c = crate::attack::AttackConfig::default_for(t, self.seed);
                c.max_iterations = self.max_iterations;
                c.time_limit = self.time_limit;
                c
            })
            .collect();
        if self.chunks {
            let mut c = out[2];
            c.mode = crate::attack::Mode::Chunks;
            out.push(c);
        }
        out
    }
}

/// gen-corpus, train, attack-all for each target, eval.
pub fn run_all(layout: &Layout, cfg: &PipelineConfig) -> Result<Report> {
    gen_corpus(layout, &cfg.corpus, cfg.threads)?;
    train(layout, &cfg.train, cfg.threads)?;
    for attack in cfg.attack_configs() {
        attack_all(layout, &attack, cfg.threads)?;
    }
    let mut opts = EvalOptions::new(cfg.seed);
    opts.extremes_n = cfg.extremes_n;
    let report = evaluate(layout, &opts, cfg.threads)?;
    write_report(layout, &report, &opts, cfg.threads)?;
    Ok(report)
}
