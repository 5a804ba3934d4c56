//! m-of-3 voting over the three detectors on the evaluation half.

mod common;

use evasim::ensemble::{ensemble_verdict, EnsembleRule};
use evasim::metrics::ConfusionMatrix;

fn main() -> evasim::Result<()> {
    let bench = common::bench(60)?;
    let mut cms = [ConfusionMatrix::default(); 3];
    for s in &bench.test {
        let verdicts = bench.detectors.classify_all(&s.program.serialize()?)?;
        for (cm, rule) in cms.iter_mut().zip(EnsembleRule::ALL) {
            cm.record(ensemble_verdict(&verdicts, rule)?.label, s.label());
        }
    }
    for (cm, rule) in cms.iter().zip(EnsembleRule::ALL) {
        println!(
            "{:<9} (m = {}): TPR {}, FPR {}, accuracy {}",
            rule.name(),
            rule.m(),
            cm.tpr(),
            cm.fpr(),
            cm.accuracy()
        );
    }
    Ok(())
}
