//! A small corpus and trained detectors for the attack examples.

#![allow(dead_code)]

use evasim::corpus::{read_corpus, GenConfig, Sample};
use evasim::pipeline::{gen_corpus, read_split, train, Detectors, Layout, TrainOptions};

pub struct Bench {
    pub dir: tempfile::TempDir,
    pub layout: Layout,
    pub detectors: Detectors,
    pub test: Vec<Sample>,
}

impl Bench {
    pub fn test_malware(&self) -> impl Iterator<Item = &Sample> {
        self.test.iter().filter(|s| s.label() == 1)
    }
}

pub fn bench(n_per_class: usize) -> evasim::Result<Bench> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let layout = Layout::under(dir.path());
    let cfg = GenConfig {
        n_benign: n_per_class,
        n_malware: n_per_class,
        ..GenConfig::default()
    };
    gen_corpus(&layout, &cfg, 0)?;
    let (detectors, summary) = train(&layout, &TrainOptions::new(0), 0)?;
    println!(
        "trained on {} binaries: rawbyte test accuracy {:.3}, knn {:.3}, {} signatures",
        summary.train_size, summary.rawbyte_test_accuracy, summary.knn_test_accuracy, summary.signatures
    );
    let split = read_split(&layout)?;
    let (_, samples) = read_corpus(&layout.corpus)?;
    let test = samples.into_iter().filter(|s| split.test.contains(&s.id)).collect();
    Ok(Bench {
        dir,
        layout,
        detectors,
        test,
    })
}
