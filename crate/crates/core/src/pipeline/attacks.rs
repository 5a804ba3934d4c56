//! Attacking every binary of the evaluation half against one target.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{by_id, read_json, read_split, with_threads, write_json, write_run, Detectors, Layout};
use crate::attack::{
    attack_blackbox, attack_ctph_chunks, attack_whitebox, read_trace_steps, AttackConfig, AttackSummary, AttackTrace,
    Mode, Outcome, Target,
};
use crate::corpus::{self, Class, Sample};
use crate::ctph::FuzzyDigest;
use crate::detect::DetectorId;
use crate::error::{Error, Result};
use crate::toyprog::{strip_header, ToyProgram};

/// Directory name of an attack set: the target alone for its default mode
/// and family, `<target>_<mode>_<family>` otherwise.
pub fn set_name(cfg: &AttackConfig) -> String {
    let default = AttackConfig::default_for(cfg.target, cfg.seed);
    if cfg.mode == default.mode && cfg.family == default.family {
        cfg.target.to_string()
    } else {
        let mode = serde_json::to_value(cfg.mode).expect("enum serializes");
        let family = serde_json::to_value(cfg.family).expect("enum serializes");
        format!(
            "{}_{}_{}",
            cfg.target,
            mode.as_str().unwrap_or(""),
            family.as_str().unwrap_or("")
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub attempted: usize,
    pub processed: usize,
    pub evaded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSetSummary {
    pub name: String,
    pub config: AttackConfig,
    pub attempted: usize,
    /// Attacks that ran to completion (evaded or exhausted).
    pub processed: usize,
    pub processed_fraction: f64,
    pub evaded: usize,
    /// Evaded over processed.
    pub evasion_rate: f64,
    pub mean_nld: f64,
    pub max_size_ratio: f64,
    pub benign: ClassTally,
    pub malware: ClassTally,
}

/// One attacked binary as loaded back from disk.
#[derive(Clone, Debug)]
pub struct AttackSet {
    pub name: String,
    pub dir: PathBuf,
    pub summary: AttackSetSummary,
    pub per_binary: Vec<AttackSummary>,
}

impl AttackSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let summary: AttackSetSummary = read_json(&dir.join("summary.json"))?;
        let summaries = dir.join("summaries");
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&summaries)
            .map_err(|e| Error::io(&summaries, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(&summaries, e)))
            .collect::<Result<_>>()?;
        paths.sort();
        let per_binary = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
        Ok(AttackSet {
            name: summary.name.clone(),
            dir: dir.to_owned(),
            summary,
            per_binary,
        })
    }

    pub fn transformed_path(&self, id: u32) -> PathBuf {
        self.dir.join("transformed").join(format!("{id:05}.tbin"))
    }

    pub fn trace_path(&self, id: u32) -> PathBuf {
        self.dir.join("traces").join(format!("{id:05}.jsonl"))
    }

    pub fn load_transformed(&self, id: u32) -> Result<ToyProgram> {
        let path = self.transformed_path(id);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        ToyProgram::deserialize(&bytes)
    }

    pub fn load_trace(&self, id: u32) -> Result<Vec<crate::attack::TraceStep>> {
        read_trace_steps(&self.trace_path(id))
    }

    /// Summaries of the attacks that ran to completion.
    pub fn processed(&self) -> impl Iterator<Item = &AttackSummary> {
        self.per_binary.iter().filter(|s| s.outcome != Outcome::Error)
    }
}

fn run_one(detectors: &Detectors, sample: &Sample, cfg: &AttackConfig) -> Result<AttackTrace> {
    let (p, id, label) = (&sample.program, sample.id, sample.label());
    match (cfg.mode, cfg.target) {
        (Mode::Whitebox, _) => attack_whitebox(p, id, label, &detectors.rawbyte, cfg),
        (Mode::Chunks, _) => attack_ctph_chunks(p, id, label, &detectors.ctph, cfg),
        (Mode::Blackbox, DetectorId::Rawbyte) => {
            attack_blackbox(p, id, label, Target::Rawbyte(&detectors.rawbyte), cfg)
        }
        (Mode::Blackbox, DetectorId::Knn) => attack_blackbox(p, id, label, Target::Knn(&detectors.knn), cfg),
        (Mode::Blackbox, DetectorId::Ctph) => attack_blackbox(p, id, label, Target::Ctph(&detectors.ctph), cfg),
    }
}

/// A summary for an attack that failed before producing a trace.
fn error_summary(sample: &Sample, cfg: &AttackConfig, err: &Error) -> Result<AttackSummary> {
    let bytes = sample.program.serialize()?;
    Ok(AttackSummary {
        binary_id: sample.id,
        label: sample.label(),
        target: cfg.target,
        mode: cfg.mode,
        family: cfg.family,
        outcome: Outcome::Error,
        error: Some(err.to_string()),
        iterations: 0,
        proposed: 0,
        accepted: 0,
        queries: 0,
        // no objective was evaluated; NaN would not survive JSON
        initial_objective: 0.0,
        final_objective: 0.0,
        original_size: bytes.len(),
        final_size: bytes.len(),
        final_nld: 0.0,
        final_digest: FuzzyDigest::of(strip_header(&bytes)?).to_string(),
        chunks: None,
    })
}

/// Attacks every binary of the evaluation half. Writes
/// `attacks/<set>/{traces,summaries,transformed}` plus `summary.json`.
pub fn attack_all(layout: &Layout, cfg: &AttackConfig, threads: usize) -> Result<AttackSetSummary> {
    cfg.validate()?;
    let detectors = Detectors::load(layout)?;
    let split = read_split(layout)?;
    let (_, samples) = corpus::read_corpus(&layout.corpus)?;
    let test = by_id(&samples, &split.test);
    let name = set_name(cfg);
    let dir = layout.attacks().join(&name);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let transformed = dir.join("transformed");
    std::fs::create_dir_all(&transformed).map_err(|e| Error::io(&transformed, e))?;
    let summaries_dir = dir.join("summaries");
    std::fs::create_dir_all(&summaries_dir).map_err(|e| Error::io(&summaries_dir, e))?;

    let results: Vec<AttackSummary> = with_threads(threads, || {
        test.par_iter()
            .map(|s| -> Result<AttackSummary> {
                match run_one(&detectors, s, cfg) {
                    Ok(trace) => {
                        trace.write(&dir)?;
                        let program = trace.replay(&s.program)?;
                        let path = transformed.join(format!("{:05}.tbin", s.id));
                        std::fs::write(&path, program.serialize()?).map_err(|e| Error::io(&path, e))?;
                        Ok(trace.summary)
                    }
                    Err(e) => {
                        let summary = error_summary(s, cfg, &e)?;
                        write_json(&summaries_dir.join(format!("{:05}.json", s.id)), &summary)?;
                        Ok(summary)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let processed: Vec<&AttackSummary> = results.iter().filter(|s| s.outcome != Outcome::Error).collect();
    let evaded = processed.iter().filter(|s| s.outcome == Outcome::Evaded).count();
    let tally = |class: Class| {
        let of: Vec<&AttackSummary> = results.iter().filter(|s| s.label == class.label()).collect();
        ClassTally {
            attempted: of.len(),
            processed: of.iter().filter(|s| s.outcome != Outcome::Error).count(),
            evaded: of.iter().filter(|s| s.outcome == Outcome::Evaded).count(),
        }
    };
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let summary = AttackSetSummary {
        name,
        config: *cfg,
        attempted: results.len(),
        processed: processed.len(),
        processed_fraction: ratio(processed.len(), results.len()),
        evaded,
        evasion_rate: ratio(evaded, processed.len()),
        mean_nld: if processed.is_empty() {
            0.0
        } else {
            processed.iter().map(|s| s.final_nld).sum::<f64>() / processed.len() as f64
        },
        max_size_ratio: processed
            .iter()
            .map(|s| s.final_size as f64 / s.original_size as f64)
            .fold(1.0, f64::max),
        benign: tally(Class::Benign),
        malware: tally(Class::Malware),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    write_run(&dir, "attack-all", cfg.seed, threads, layout, cfg)?;
    Ok(summary)
}
