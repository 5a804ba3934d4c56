//! White-box displacement attack on the raw-byte scorer: candidates are kept
//! when they move the byte histogram along the loss gradient.

mod common;

use evasim::attack::{attack_whitebox, AttackConfig, Outcome};
use evasim::detect::DetectorId;

fn main() -> evasim::Result<()> {
    let bench = common::bench(60)?;
    let cfg = AttackConfig::default_for(DetectorId::Rawbyte, 0);
    let mut evaded = 0;
    let mut total = 0;
    for s in bench.test_malware().take(10) {
        let t = attack_whitebox(&s.program, s.id, 1, &bench.detectors.rawbyte, &cfg)?;
        let m = &t.summary;
        total += 1;
        evaded += usize::from(m.outcome == Outcome::Evaded);
        println!(
            "#{:<4} {:?}: loss {:.3} -> {:.3}, {}/{} steps kept, size {} -> {}",
            s.id,
            m.outcome,
            m.initial_objective,
            m.final_objective,
            m.accepted,
            m.proposed,
            m.original_size,
            m.final_size
        );
    }
    println!("{evaded}/{total} evaded");
    Ok(())
}
