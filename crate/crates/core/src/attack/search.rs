//! White-box and black-box hill climbs.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use super::trace::{AttackSummary, AttackTrace, Outcome, Rejection, TraceStep};
use super::{AttackConfig, Family, Mode, Oracle, Target};
use crate::ctph::FuzzyDigest;
use crate::detect::RawByteScorer;
use crate::error::{Error, Result};
use crate::featx::embedding_for_gradient;
use crate::metrics::nld;
use crate::rng::{self, StreamRng};
use crate::toyprog::{strip_header, ToyProgram, HEADER_LEN, INSTR_WIDTH};
use crate::xform::{
    bytes_per_function, disp_sites, enumerate_sites, equivalents, growth, nop_at, random_layout, set_nop_byte,
    size_limit, SemanticNop, Site, TransformKind, TransformParams, TransformRecord,
};

/// What [`optimize_nop_byte`] maximizes or minimizes.
pub enum NopObjective<'a> {
    /// Maximize `<g, delta>` in embedding space (closed form per byte value).
    Gradient(&'a [f64]),
    /// Minimize a black-box score of the whole program.
    Blackbox(&'a dyn Fn(&ToyProgram) -> Result<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NopChoice {
    pub byte: u8,
    /// Objective at the chosen byte: the dot-product gain, or the black-box score.
    pub value: f64,
    pub evaluations: usize,
}

/// Tries all 256 values of the settable byte at `site`; ties go to the
/// smallest byte value.
pub fn optimize_nop_byte(program: &ToyProgram, site: Site, objective: NopObjective<'_>) -> Result<NopChoice> {
    let nop = nop_at(program, site)
        .ok_or_else(|| Error::Misuse(format!("fn{}[{}] holds no settable byte", site.function, site.index)))?;
    match objective {
        NopObjective::Gradient(g) => {
            if g.len() != 256 {
                return Err(Error::InvalidArgument(format!("gradient has {} entries", g.len())));
            }
            let copies = nop.kind.byte_offsets().len() as f64;
            let n = (program.serialized_len() - HEADER_LEN) as f64;
            let old = g[nop.byte as usize];
            let mut best = NopChoice {
                byte: 0,
                value: f64::NEG_INFINITY,
                evaluations: 256,
            };
            for v in 0..=255u8 {
                let gain = copies * (g[v as usize] - old) / n;
                if gain > best.value {
                    best.byte = v;
                    best.value = gain;
                }
            }
            Ok(best)
        }
        NopObjective::Blackbox(score) => {
            let mut best = NopChoice {
                byte: 0,
                value: f64::INFINITY,
                evaluations: 256,
            };
            for v in 0..=255u8 {
                let s = score(&set_nop_byte(program, site, v)?)?;
                if s < best.value {
                    best.byte = v;
                    best.value = s;
                }
            }
            Ok(best)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// State shared by every attack on one binary.
pub(super) struct Run<'a> {
    pub cfg: &'a AttackConfig,
    pub binary_id: u32,
    pub label: u8,
    pub original: &'a ToyProgram,
    pub original_bytes: Vec<u8>,
    pub oracle: Oracle,
    pub rng: StreamRng,
    pub started: Instant,
    pub max_size: usize,
    pub current: ToyProgram,
    pub steps: Vec<TraceStep>,
    pub queries: usize,
    pub iterations: usize,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a AttackConfig, binary_id: u32, label: u8, original: &'a ToyProgram) -> Result<Self> {
        cfg.validate()?;
        let id = binary_id.to_string();
        let seed = rng::sub_seed(cfg.seed, &["attack", cfg.target.name(), &id]);
        let original_bytes = original.serialize()?;
        Ok(Run {
            cfg,
            binary_id,
            label,
            original,
            max_size: size_limit(original_bytes.len()),
            original_bytes,
            oracle: Oracle::new(original, rng::sub_seed(cfg.seed, &["oracle", &id]))?,
            rng: rng::stream(seed, &[]),
            started: Instant::now(),
            current: original.clone(),
            steps: Vec::new(),
            queries: 0,
            iterations: 0,
        })
    }

    pub fn out_of_time(&self) -> bool {
        self.started.elapsed() > self.cfg.time_limit()
    }

    pub fn push(&mut self, mut step: TraceStep) {
        step.step = self.steps.len();
        step.iteration = self.iterations;
        self.queries += step.queries;
        self.steps.push(step);
    }

    /// A displaceable range in `function`: the per-function share of the
    /// budget, clamped to what the size cap still allows, shortened until
    /// some range of that length fits.
    pub fn propose_range(&mut self, function: usize) -> Option<(usize, usize)> {
        let size = self.current.serialized_len();
        if size + growth(2) > self.max_size {
            return None;
        }
        let cap_len = (self.max_size - size) / INSTR_WIDTH - 1;
        let share = bytes_per_function(
            self.cfg.disp_budget,
            self.original_bytes.len(),
            self.original.functions.len(),
        );
        let mut len = ((share / INSTR_WIDTH as f64).round() as usize).clamp(2, cap_len);
        loop {
            let sites: Vec<Site> = disp_sites(&self.current, len)
                .into_iter()
                .filter(|s| s.function == function)
                .collect();
            if let Some(site) = sites.choose(&mut self.rng) {
                return Some((site.index, len));
            }
            if len == 2 {
                return None;
            }
            len -= 1;
        }
    }

    pub fn random_nops(&mut self, slots: usize, random_bytes: bool) -> Vec<SemanticNop> {
        random_layout(slots, &mut self.rng)
            .into_iter()
            .map(|kind| SemanticNop {
                kind,
                byte: if random_bytes { self.rng.gen() } else { 0 },
            })
            .collect()
    }

    pub fn finish(
        self,
        outcome: Outcome,
        error: Option<String>,
        initial_objective: f64,
        final_objective: f64,
    ) -> Result<AttackTrace> {
        let final_bytes = self.current.serialize()?;
        let summary = AttackSummary {
            binary_id: self.binary_id,
            label: self.label,
            target: self.cfg.target,
            mode: self.cfg.mode,
            family: self.cfg.family,
            outcome,
            error,
            iterations: self.iterations,
            proposed: self.steps.len(),
            accepted: self.steps.iter().filter(|s| s.accepted).count(),
            queries: self.queries,
            initial_objective,
            final_objective,
            original_size: self.original_bytes.len(),
            final_size: final_bytes.len(),
            final_nld: nld(&self.original_bytes, &final_bytes),
            final_digest: FuzzyDigest::of(strip_header(&final_bytes)?).to_string(),
            chunks: None,
        };
        Ok(AttackTrace {
            summary,
            steps: self.steps,
        })
    }
}

/// White-box attack on the raw-byte scorer with displacement. A candidate is
/// accepted when `<g, delta> > 0` in embedding space and the oracle agrees.
/// Settable nop bytes are chosen to maximize the same dot product.
pub fn attack_whitebox(
    program: &ToyProgram,
    binary_id: u32,
    label: u8,
    scorer: &RawByteScorer,
    cfg: &AttackConfig,
) -> Result<AttackTrace> {
    if cfg.mode != Mode::Whitebox {
        return Err(Error::Config("attack_whitebox needs mode whitebox".into()));
    }
    let mut run = Run::new(cfg, binary_id, label, program)?;
    let embed = |p: &ToyProgram| -> Result<Vec<f64>> { Ok(embedding_for_gradient(strip_header(&p.serialize()?)?)) };
    let mut x = embed(&run.current)?;
    let initial = scorer.loss(&x, label);
    if scorer.classify_embedding(&x).label != label {
        return run.finish(Outcome::Evaded, None, initial, initial);
    }
    let mut loss = initial;
    while run.iterations < cfg.max_iterations {
        let mut functions: Vec<usize> = (0..run.current.functions.len()).collect();
        functions.shuffle(&mut run.rng);
        let mut proposed = false;
        for f in functions {
            if run.out_of_time() {
                return run.finish(Outcome::Exhausted, None, initial, loss);
            }
            let Some((start, len)) = run.propose_range(f) else {
                continue;
            };
            proposed = true;
            let g = scorer.gradient(&x, label);
            let nops = run.random_nops(len - 1, false);
            let mut record = TransformRecord::displace(f, start, len, nops);
            let mut candidate = record.apply_within(&run.current, run.max_size)?;
            for (i, site) in record.nop_sites().into_iter().enumerate() {
                let choice = optimize_nop_byte(&candidate, site, NopObjective::Gradient(&g))?;
                candidate = set_nop_byte(&candidate, site, choice.byte)?;
                if let TransformParams::Disp { nops, .. } = &mut record.params {
                    nops[i].byte = choice.byte;
                }
            }
            let x_new = embed(&candidate)?;
            let delta: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let first_order = dot(&g, &delta);
            let loss_new = scorer.loss(&x_new, label);
            let rejection = if first_order <= 0.0 {
                Some(Rejection::NotImproving)
            } else if !run.oracle.check(&candidate) {
                Some(Rejection::Oracle)
            } else {
                None
            };
            run.push(TraceStep {
                step: 0,
                iteration: 0,
                record,
                before: loss,
                after: loss_new,
                first_order: Some(first_order),
                accepted: rejection.is_none(),
                rejection,
                queries: 1,
            });
            if rejection.is_none() {
                run.current = candidate;
                x = x_new;
                loss = loss_new;
                if scorer.classify_embedding(&x).label != label {
                    run.iterations += 1;
                    return run.finish(Outcome::Evaded, None, initial, loss);
                }
            }
        }
        run.iterations += 1;
        if !proposed {
            break;
        }
    }
    run.finish(Outcome::Exhausted, None, initial, loss)
}

/// Black-box attack: a candidate is accepted when the target's objective
/// strictly decreases and the oracle agrees. Accepted displacements then have
/// each settable byte refined by a 256-way search.
pub fn attack_blackbox(
    program: &ToyProgram,
    binary_id: u32,
    label: u8,
    target: Target<'_>,
    cfg: &AttackConfig,
) -> Result<AttackTrace> {
    if cfg.mode != Mode::Blackbox {
        return Err(Error::Config("attack_blackbox needs mode blackbox".into()));
    }
    if target.id() != cfg.target {
        return Err(Error::Config(format!(
            "config targets {}, detector is {}",
            cfg.target,
            target.id()
        )));
    }
    let mut run = Run::new(cfg, binary_id, label, program)?;
    let score = |p: &ToyProgram| -> Result<f64> { target.objective(&p.serialize()?, label) };
    let initial = score(&run.current)?;
    run.queries += 1;
    if target.evaded(&run.original_bytes, label)? {
        return run.finish(Outcome::Evaded, None, initial, initial);
    }
    let mut objective = initial;
    while run.iterations < cfg.max_iterations {
        let candidates = propose_all(&mut run)?;
        let proposed = !candidates.is_empty();
        for mut record in candidates {
            if run.out_of_time() {
                return run.finish(Outcome::Exhausted, None, initial, objective);
            }
            if let TransformParams::Substitute { choice } = &mut record.params {
                // pick among the equivalents of the instruction as it is now
                let instr = run.current.functions[record.function].body[record.start];
                let options = equivalents(&instr).len();
                if options == 0 {
                    continue;
                }
                *choice = run.rng.gen_range(0..options);
            }
            let Ok(mut candidate) = record.apply_within(&run.current, run.max_size) else {
                continue;
            };
            let mut after = score(&candidate)?;
            let mut queries = 1;
            let rejection = if after >= objective {
                Some(Rejection::NotImproving)
            } else if !run.oracle.check(&candidate) {
                Some(Rejection::Oracle)
            } else {
                None
            };
            if rejection.is_none() && record.kind == TransformKind::Disp {
                for (i, site) in record.nop_sites().into_iter().enumerate() {
                    let choice = optimize_nop_byte(&candidate, site, NopObjective::Blackbox(&score))?;
                    queries += choice.evaluations;
                    if choice.value <= after {
                        candidate = set_nop_byte(&candidate, site, choice.byte)?;
                        after = choice.value;
                        if let TransformParams::Disp { nops, .. } = &mut record.params {
                            nops[i].byte = choice.byte;
                        }
                    }
                }
                if !run.oracle.check(&candidate) {
                    return Err(Error::State("semantic nop refinement changed behaviour".into()));
                }
            }
            run.push(TraceStep {
                step: 0,
                iteration: 0,
                record,
                before: objective,
                after,
                first_order: None,
                accepted: rejection.is_none(),
                rejection,
                queries,
            });
            if rejection.is_none() {
                run.current = candidate;
                objective = after;
                run.queries += 1;
                if target.evaded(&run.current.serialize()?, label)? {
                    run.iterations += 1;
                    return run.finish(Outcome::Evaded, None, initial, objective);
                }
            }
        }
        run.iterations += 1;
        if !proposed {
            break;
        }
    }
    run.finish(Outcome::Exhausted, None, initial, objective)
}

/// One iteration's candidates. Displacement proposes one range per function;
/// in-place rewriting proposes every substitution and reordering site. Both
/// are shuffled with the attack's stream.
fn propose_all(run: &mut Run<'_>) -> Result<Vec<TransformRecord>> {
    match run.cfg.family {
        Family::Disp => {
            let mut functions: Vec<usize> = (0..run.current.functions.len()).collect();
            functions.shuffle(&mut run.rng);
            let mut out = Vec::new();
            // Ranges are drawn against the current program; later ones are
            // re-validated when applied.
            for f in functions {
                if let Some((start, len)) = run.propose_range(f) {
                    let nops = run.random_nops(len - 1, true);
                    out.push(TransformRecord::displace(f, start, len, nops));
                }
            }
            Ok(out)
        }
        Family::Ipr => {
            let mut out: Vec<TransformRecord> = enumerate_sites(&run.current, TransformKind::IprSubstitute)
                .into_iter()
                .map(|s| TransformRecord::substitute(s, 0))
                .chain(
                    enumerate_sites(&run.current, TransformKind::IprReorder)
                        .into_iter()
                        .map(TransformRecord::reorder),
                )
                .collect();
            out.shuffle(&mut run.rng);
            Ok(out)
        }
    }
}
