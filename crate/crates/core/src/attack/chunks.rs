//! Per-window attack on the fuzzy hash: one in-place substitution in every
//! window of `b` bytes, away from the window's last 7 bytes.

use rand::seq::SliceRandom;
use rand::Rng;

use super::search::Run;
use super::trace::{AttackTrace, ChunkStats, Outcome, Rejection, TraceStep};
use super::{AttackConfig, Mode};
use crate::ctph::{initial_block_size, FuzzyDigest, WINDOW};
use crate::detect::HashDetector;
use crate::error::{Error, Result};
use crate::toyprog::{strip_header, ToyProgram, HEADER_LEN, INSTR_WIDTH};
use crate::xform::{enumerate_sites, equivalents, TransformKind, TransformRecord};

/// Block size for `n` stripped bytes and the number of windows, `ceil(n / b)`.
pub fn chunk_windows(n: usize) -> (u32, usize) {
    let b = initial_block_size(n);
    (b, n.div_ceil(b as usize))
}

pub fn attack_ctph_chunks(
    program: &ToyProgram,
    binary_id: u32,
    label: u8,
    detector: &HashDetector,
    cfg: &AttackConfig,
) -> Result<AttackTrace> {
    if cfg.mode != Mode::Chunks {
        return Err(Error::Config("attack_ctph_chunks needs mode chunks".into()));
    }
    let mut run = Run::new(cfg, binary_id, label, program)?;
    let similarity = |p: &ToyProgram| -> Result<f64> {
        let bytes = p.serialize()?;
        Ok(1.0 - detector.nearest(&FuzzyDigest::of(strip_header(&bytes)?))?.distance)
    };
    let n = run.original_bytes.len() - HEADER_LEN;
    let code_end = program.code_instrs() * INSTR_WIDTH;
    let (b, windows) = chunk_windows(n);
    let b = b as usize;

    // substitution sites by byte offset in the stripped binary
    let sites: Vec<(usize, crate::xform::Site)> = enumerate_sites(program, TransformKind::IprSubstitute)
        .into_iter()
        .map(|s| (program.address_of(s.function, s.index) as usize * INSTR_WIDTH, s))
        .collect();

    let initial = similarity(&run.current)?;
    run.queries += 1;
    let mut current_sim = initial;
    let mut stats = ChunkStats {
        block_size: b as u32,
        windows,
        ..ChunkStats::default()
    };
    for w in 0..windows {
        let lo = w * b;
        let hi = ((w + 1) * b).min(n);
        let usable_end = hi.saturating_sub(WINDOW);
        let inside: Vec<_> = sites
            .iter()
            .filter(|(off, _)| *off >= lo && off + INSTR_WIDTH <= usable_end)
            .map(|&(_, s)| s)
            .collect();
        let Some(&site) = inside.choose(&mut run.rng) else {
            if lo < code_end {
                stats.uncovered_code_windows += 1;
            }
            continue;
        };
        let instr = run.current.functions[site.function].body[site.index];
        let choice = run.rng.gen_range(0..equivalents(&instr).len());
        let record = TransformRecord::substitute(site, choice);
        let candidate = record.apply(&run.current)?;
        let after = similarity(&candidate)?;
        let passes = run.oracle.check(&candidate);
        run.push(TraceStep {
            step: 0,
            iteration: 0,
            record,
            before: current_sim,
            after,
            first_order: None,
            accepted: passes,
            rejection: (!passes).then_some(Rejection::Oracle),
            queries: 1,
        });
        if passes {
            stats.covered += 1;
            run.current = candidate;
            current_sim = after;
        }
    }
    run.iterations = 1;
    let outcome = if 1.0 - current_sim > detector.theta() {
        Outcome::Evaded
    } else {
        Outcome::Exhausted
    };
    let mut trace = run.finish(outcome, None, initial, current_sim)?;
    trace.summary.chunks = Some(stats);
    Ok(trace)
}
