//! Black-box displacement attack on k-NN, using only the detector's score.
//! Shows the trace of one binary, then how the transform fares against the
//! detectors it was not built for.

mod common;

use evasim::attack::{attack_blackbox, AttackConfig, Target};
use evasim::detect::{Detector, DetectorId};

fn main() -> evasim::Result<()> {
    let bench = common::bench(60)?;
    let d = &bench.detectors;
    let cfg = AttackConfig::default_for(DetectorId::Knn, 0);
    for s in bench.test_malware().take(6) {
        let t = attack_blackbox(&s.program, s.id, 1, Target::Knn(&d.knn), &cfg)?;
        let out = t.replay(&s.program)?.serialize()?;
        let before = s.program.serialize()?;
        let labels = |b: &[u8]| -> evasim::Result<String> {
            Ok(format!(
                "{}{}{}",
                d.rawbyte.classify(b)?.label,
                d.knn.classify(b)?.label,
                d.ctph.classify(b)?.label
            ))
        };
        println!(
            "#{:<4} {:?}: knn malware share {:.2} -> {:.2} in {} queries; verdicts (rawbyte knn ctph) {} -> {}",
            s.id,
            t.summary.outcome,
            t.summary.initial_objective,
            t.summary.final_objective,
            t.summary.queries,
            labels(&before)?,
            labels(&out)?
        );
    }
    Ok(())
}
