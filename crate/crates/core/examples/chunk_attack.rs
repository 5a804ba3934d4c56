//! Fuzzy-hash evasion: the per-window attack places one in-place substitution
//! in every chunk-sized window, compared with the greedy black-box attack.

mod common;

use evasim::attack::{attack_blackbox, attack_ctph_chunks, AttackConfig, Mode, Target};
use evasim::detect::DetectorId;

fn main() -> evasim::Result<()> {
    let bench = common::bench(30)?;
    let hash = &bench.detectors.ctph;
    let greedy = AttackConfig::default_for(DetectorId::Ctph, 0);
    let chunks = AttackConfig {
        mode: Mode::Chunks,
        ..greedy
    };
    for s in bench.test_malware().take(6) {
        let g = attack_blackbox(&s.program, s.id, 1, Target::Ctph(hash), &greedy)?;
        let c = attack_ctph_chunks(&s.program, s.id, 1, hash, &chunks)?;
        let stats = c.summary.chunks.clone().unwrap_or_default();
        println!(
            "#{:<4} greedy: {:?} after {} edits (NLD {:.4}); windows: {:?}, {}/{} windows edited (b = {}), NLD {:.4}",
            s.id,
            g.summary.outcome,
            g.summary.accepted,
            g.summary.final_nld,
            c.summary.outcome,
            stats.covered,
            stats.windows,
            stats.block_size,
            c.summary.final_nld
        );
    }
    Ok(())
}
