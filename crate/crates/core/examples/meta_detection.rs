//! Detecting the transformation itself: attack a reduced corpus, fit the meta
//! model on original/transformed feature pairs, and compare the most and
//! least perturbed binaries.

use evasim::corpus::GenConfig;
use evasim::pipeline::{run_all, Layout, PipelineConfig};

fn main() -> evasim::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut cfg = PipelineConfig::new(0);
    cfg.corpus = GenConfig {
        n_benign: 100,
        n_malware: 100,
        ..GenConfig::default()
    };
    cfg.extremes_n = 5;
    let report = run_all(&Layout::under(dir.path()), &cfg)?;
    let Some(meta) = report.meta_detection else {
        println!("meta detection skipped: {}", report.meta_skipped.unwrap_or_default());
        return Ok(());
    };
    println!("{} pairs; held-out accuracy {}", meta.pairs, meta.held_out.acc);
    for row in &meta.by_set {
        println!("  {:<16} TPR {}", row.name, row.tpr);
    }
    let top: Vec<String> = meta
        .top_features
        .iter()
        .take(5)
        .map(|f| format!("{}:{:+.2}", f.index, f.weight))
        .collect();
    println!("heaviest features: {}", top.join(" "));
    match (&meta.extremes, &meta.extremes_skipped) {
        (Some(e), _) => println!(
            "top-{} NLD accuracy {}, bottom-{} {}",
            e.n, e.top.acc, e.n, e.bottom.acc
        ),
        (None, Some(why)) => println!("extremes skipped: {why}"),
        _ => {}
    }
    Ok(())
}
