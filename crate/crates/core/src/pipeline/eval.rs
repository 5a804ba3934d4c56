//! Scoring originals and transformed sets, ensembles, NLD CDFs and
//! meta-detection; writing `report.json`, `tables.csv` and `cdf_<set>.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{by_id, feature_path, read_split, with_threads, write_json, write_run, AttackSet, Detectors, Layout};
use crate::attack::{Family, Mode};
use crate::corpus;
use crate::detect::{DetectorId, Verdict};
use crate::ensemble::{ensemble_verdict, EnsembleRule};
use crate::error::{Error, Result};
use crate::featx;
use crate::metadet::{extremes_experiment, fit_meta, meta_split, meta_train_config, train_meta, MetaPair};
use crate::metrics::{cdf, round4, threat_check, ConfusionMatrix, EvasionReport, Rate, DEFAULT_THETA0};
use crate::rng;

/// JSON schema that every `report.json` validates against.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

/// Which ensemble rules to tabulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleChoice {
    All,
    None,
    #[serde(untagged)]
    Rule(EnsembleRule),
}

impl EnsembleChoice {
    pub fn rules(self) -> Vec<EnsembleRule> {
        match self {
            EnsembleChoice::All => EnsembleRule::ALL.to_vec(),
            EnsembleChoice::None => Vec::new(),
            EnsembleChoice::Rule(r) => vec![r],
        }
    }
}

impl FromStr for EnsembleChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EnsembleChoice::All),
            "none" => Ok(EnsembleChoice::None),
            _ => s.parse().map(EnsembleChoice::Rule),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    pub ensemble: EnsembleChoice,
    /// Attack set directories; all of `<out>/attacks/*` when empty.
    pub sets: Vec<PathBuf>,
    /// Size of each end in the extremes experiment.
    pub extremes_n: usize,
    /// Attack set whose pairs feed the extremes experiment.
    pub extremes_set: String,
    pub theta0: f64,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        EvalOptions {
            seed,
            ensemble: EnsembleChoice::All,
            sets: Vec::new(),
            extremes_n: 20,
            extremes_set: "ctph".into(),
            theta0: DEFAULT_THETA0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorRow {
    pub name: String,
    pub acc: Rate,
    pub f1: Rate,
    pub tpr: Rate,
    pub fpr: Rate,
    pub cm: ConfusionMatrix,
}

impl DetectorRow {
    pub fn new(name: impl Into<String>, cm: ConfusionMatrix) -> Self {
        DetectorRow {
            name: name.into(),
            acc: cm.accuracy().rounded(),
            f1: cm.f1().rounded(),
            tpr: cm.tpr().rounded(),
            fpr: cm.fpr().rounded(),
            cm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub m: u8,
    #[serde(flatten)]
    pub row: DetectorRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvasionRow {
    pub detector: DetectorId,
    pub fpr: Rate,
    pub tpr: Rate,
    pub fpr_evasive: Rate,
    pub tpr_evasive: Rate,
    pub perturbation_bounded: bool,
    pub offending: usize,
    pub rates_degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetReport {
    pub name: String,
    pub target: DetectorId,
    pub mode: Mode,
    pub family: Family,
    pub attempted: usize,
    pub processed: usize,
    pub processed_fraction: f64,
    pub evaded: usize,
    pub evasion_rate: f64,
    pub mean_nld: f64,
    pub original: Vec<DetectorRow>,
    pub transformed: Vec<DetectorRow>,
    pub ensembles_original: Vec<EnsembleRow>,
    pub ensembles_transformed: Vec<EnsembleRow>,
    pub evasion: Vec<EvasionRow>,
    /// NLD per processed binary, ascending id.
    pub nld: Vec<f64>,
}

impl SetReport {
    pub fn row(&self, transformed: bool, detector: DetectorId) -> &DetectorRow {
        let rows = if transformed { &self.transformed } else { &self.original };
        rows.iter()
            .find(|r| r.name == detector.name())
            .expect("one row per detector")
    }

    /// Drop in TPR from originals to transformed, in [0, 1] units.
    pub fn tpr_drop(&self, detector: DetectorId) -> Option<f64> {
        let before = self.row(false, detector).cm.tpr().value()?;
        let after = self.row(true, detector).cm.tpr().value()?;
        Some(before - after)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtremesBlock {
    pub set: String,
    pub n: usize,
    pub top: DetectorRow,
    pub bottom: DetectorRow,
    pub top_ids: Vec<u32>,
    pub bottom_ids: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub index: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaBlock {
    pub pairs: usize,
    pub train_binaries: usize,
    pub test_binaries: usize,
    pub held_out: DetectorRow,
    pub by_set: Vec<DetectorRow>,
    pub top_features: Vec<FeatureWeight>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extremes: Option<ExtremesBlock>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extremes_skipped: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub benign: usize,
    pub malware: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub evaluation_set: ClassCounts,
    pub baseline: Vec<DetectorRow>,
    pub baseline_ensembles: Vec<EnsembleRow>,
    pub sets: Vec<SetReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub meta_detection: Option<MetaBlock>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub meta_skipped: Option<String>,
}

impl Report {
    pub fn set(&self, name: &str) -> Option<&SetReport> {
        self.sets.iter().find(|s| s.name == name)
    }
}

fn detector_rows(verdicts: &[(u8, [Verdict; 3])]) -> Vec<DetectorRow> {
    DetectorId::ALL
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut cm = ConfusionMatrix::default();
            for (label, v) in verdicts {
                cm.record(v[i].label, *label);
            }
            DetectorRow::new(d.name(), cm)
        })
        .collect()
}

fn ensemble_rows(verdicts: &[(u8, [Verdict; 3])], rules: &[EnsembleRule]) -> Result<Vec<EnsembleRow>> {
    rules
        .iter()
        .map(|&rule| {
            let mut cm = ConfusionMatrix::default();
            for (label, v) in verdicts {
                cm.record(ensemble_verdict(v, rule)?.label, *label);
            }
            Ok(EnsembleRow {
                m: rule.m(),
                row: DetectorRow::new(rule.name(), cm),
            })
        })
        .collect()
}

fn load_sets(layout: &Layout, opts: &EvalOptions) -> Result<Vec<AttackSet>> {
    let dirs: Vec<PathBuf> = if opts.sets.is_empty() {
        let root = layout.attacks();
        if !root.exists() {
            return Ok(Vec::new());
        }
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.json").exists())
            .collect();
        dirs.sort();
        dirs
    } else {
        opts.sets.clone()
    };
    dirs.iter().map(|d| AttackSet::load(d)).collect()
}

/// Scores every detector on the evaluation half and on each attack set.
pub fn evaluate(layout: &Layout, opts: &EvalOptions, threads: usize) -> Result<Report> {
    let detectors = Detectors::load(layout)?;
    let split = read_split(layout)?;
    let (_, samples) = corpus::read_corpus(&layout.corpus)?;
    let test = by_id(&samples, &split.test);
    let sets = load_sets(layout, opts)?;
    let rules = opts.ensemble.rules();

    with_threads(threads, || -> Result<Report> {
        let originals: BTreeMap<u32, (u8, [Verdict; 3])> = test
            .par_iter()
            .map(|s| Ok((s.id, (s.label(), detectors.classify_all(&s.program.serialize()?)?))))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let all: Vec<(u8, [Verdict; 3])> = originals.values().copied().collect();

        let mut set_reports = Vec::new();
        for set in &sets {
            let processed: Vec<u32> = set.processed().map(|s| s.binary_id).collect();
            let before: Vec<(u8, [Verdict; 3])> = processed
                .iter()
                .map(|id| {
                    originals.get(id).copied().ok_or_else(|| {
                        Error::Config(format!("set {} attacked {id}, not in the evaluation half", set.name))
                    })
                })
                .collect::<Result<_>>()?;
            let after: Vec<(u8, [Verdict; 3])> = processed
                .par_iter()
                .zip(&before)
                .map(|(&id, (label, _))| {
                    let bytes = set.load_transformed(id)?.serialize()?;
                    Ok((*label, detectors.classify_all(&bytes)?))
                })
                .collect::<Result<_>>()?;
            let nld: Vec<f64> = set.processed().map(|s| s.final_nld).collect();
            let original = detector_rows(&before);
            let transformed = detector_rows(&after);
            let evasion = DetectorId::ALL
                .iter()
                .zip(original.iter().zip(&transformed))
                .map(|(&d, (o, t))| {
                    let report = EvasionReport {
                        detector: d.to_string(),
                        original: o.cm,
                        transformed: t.cm,
                        nld: nld.clone(),
                    };
                    let check = threat_check(&report, opts.theta0);
                    EvasionRow {
                        detector: d,
                        fpr: report.fpr().rounded(),
                        tpr: report.tpr().rounded(),
                        fpr_evasive: report.fpr_evasive().rounded(),
                        tpr_evasive: report.tpr_evasive().rounded(),
                        perturbation_bounded: check.perturbation_bounded,
                        offending: check.offending.len(),
                        rates_degraded: check.rates_degraded,
                    }
                })
                .collect();
            let s = &set.summary;
            set_reports.push(SetReport {
                name: set.name.clone(),
                target: s.config.target,
                mode: s.config.mode,
                family: s.config.family,
                attempted: s.attempted,
                processed: s.processed,
                processed_fraction: round4(s.processed_fraction),
                evaded: s.evaded,
                evasion_rate: round4(s.evasion_rate),
                mean_nld: round4(s.mean_nld),
                ensembles_original: ensemble_rows(&before, &rules)?,
                ensembles_transformed: ensemble_rows(&after, &rules)?,
                original,
                transformed,
                evasion,
                nld,
            });
        }

        let (meta_detection, meta_skipped) = match meta_block(layout, &sets, opts) {
            Ok(block) => (Some(block), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let malware = all.iter().filter(|(l, _)| *l == 1).count();
        Ok(Report {
            seed: opts.seed,
            evaluation_set: ClassCounts {
                benign: all.len() - malware,
                malware,
            },
            baseline: detector_rows(&all),
            baseline_ensembles: ensemble_rows(&all, &rules)?,
            sets: set_reports,
            meta_detection,
            meta_skipped,
        })
    })?
}

/// Original/transformed feature pairs for every binary an attack changed.
fn meta_pairs(layout: &Layout, set: &AttackSet) -> Result<Vec<MetaPair>> {
    let (_, samples) = corpus::read_corpus(&layout.corpus)?;
    set.processed()
        .filter(|s| s.accepted > 0)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|s| {
            let original = match featx::read_fvec(&feature_path(layout, s.binary_id)) {
                Ok(v) => v.into_vec(),
                Err(_) => {
                    let sample = samples
                        .iter()
                        .find(|x| x.id == s.binary_id)
                        .ok_or_else(|| Error::Config(format!("binary {} missing from corpus", s.binary_id)))?;
                    featx::extract_binary(&sample.program.serialize()?)?.into_vec()
                }
            };
            let transformed = featx::extract_binary(&set.load_transformed(s.binary_id)?.serialize()?)?.into_vec();
            Ok(MetaPair {
                binary_id: s.binary_id,
                set: set.name.clone(),
                nld: s.final_nld,
                original,
                transformed,
            })
        })
        .collect()
}

fn meta_block(layout: &Layout, sets: &[AttackSet], opts: &EvalOptions) -> Result<MetaBlock> {
    let mut pairs = Vec::new();
    for set in sets {
        pairs.extend(meta_pairs(layout, set)?);
    }
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no transformed binaries to learn from".into()));
    }
    let seed = rng::sub_seed(opts.seed, &["meta"]);
    let trained = train_meta(&pairs, seed)?;
    let mut block = MetaBlock {
        pairs: pairs.len(),
        train_binaries: trained.train_ids.len(),
        test_binaries: trained.test_ids.len(),
        held_out: DetectorRow::new("all", trained.held_out),
        by_set: trained
            .by_set
            .iter()
            .map(|(name, cm)| DetectorRow::new(name.clone(), *cm))
            .collect(),
        top_features: trained
            .model
            .top_features(10)
            .into_iter()
            .map(|(index, weight)| FeatureWeight {
                index,
                weight: round4(weight),
            })
            .collect(),
        extremes: None,
        extremes_skipped: None,
    };

    // A model of one transformation only, scored on its held-out extremes.
    let set_pairs: Vec<MetaPair> = pairs.into_iter().filter(|p| p.set == opts.extremes_set).collect();
    let extremes = || -> Result<ExtremesBlock> {
        if set_pairs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no pairs from set `{}`",
                opts.extremes_set
            )));
        }
        let seed = rng::sub_seed(opts.seed, &["meta", &opts.extremes_set]);
        let ids: Vec<u32> = set_pairs.iter().map(|p| p.binary_id).collect();
        let (train_ids, _) = meta_split(&ids, seed);
        let (train, held): (Vec<&MetaPair>, Vec<&MetaPair>) = set_pairs
            .iter()
            .partition(|p| train_ids.binary_search(&p.binary_id).is_ok());
        let model = fit_meta(&train, &meta_train_config(seed))?;
        let held: Vec<MetaPair> = held.into_iter().cloned().collect();
        let ex = extremes_experiment(&model, &held, opts.extremes_n)?;
        Ok(ExtremesBlock {
            set: opts.extremes_set.clone(),
            n: ex.n,
            top: DetectorRow::new("top", ex.top),
            bottom: DetectorRow::new("bottom", ex.bottom),
            top_ids: ex.top_ids,
            bottom_ids: ex.bottom_ids,
        })
    };
    match extremes() {
        Ok(e) => block.extremes = Some(e),
        Err(e) => block.extremes_skipped = Some(e.to_string()),
    }
    Ok(block)
}

fn csv_row(out: &mut String, section: &str, set: &str, row: &DetectorRow) {
    let cm = &row.cm;
    let _ = writeln!(
        out,
        "{section},{set},{},{},{},{},{},{},{},{},{}",
        row.name, row.acc, row.f1, row.tpr, row.fpr, cm.tn, cm.fp, cm.fn_, cm.tp
    );
}

/// `tables.csv`: one row per detector (or rule) per corpus.
pub fn tables_csv(report: &Report) -> String {
    let mut out = String::from("section,set,name,acc,f1,tpr,fpr,tn,fp,fn,tp\n");
    for r in &report.baseline {
        csv_row(&mut out, "baseline", "", r);
    }
    for r in &report.baseline_ensembles {
        csv_row(&mut out, "baseline_ensemble", "", &r.row);
    }
    for s in &report.sets {
        for r in &s.original {
            csv_row(&mut out, "original", &s.name, r);
        }
        for r in &s.transformed {
            csv_row(&mut out, "transformed", &s.name, r);
        }
        for r in &s.ensembles_original {
            csv_row(&mut out, "ensemble_original", &s.name, &r.row);
        }
        for r in &s.ensembles_transformed {
            csv_row(&mut out, "ensemble_transformed", &s.name, &r.row);
        }
    }
    if let Some(meta) = &report.meta_detection {
        csv_row(&mut out, "meta_held_out", "", &meta.held_out);
        for r in &meta.by_set {
            csv_row(&mut out, "meta_held_out", &r.name, r);
        }
        if let Some(ex) = &meta.extremes {
            csv_row(&mut out, "meta_extremes", &ex.set, &ex.top);
            csv_row(&mut out, "meta_extremes", &ex.set, &ex.bottom);
        }
    }
    out
}

pub fn cdf_csv(values: &[f64]) -> String {
    let mut out = String::from("nld,fraction\n");
    for (v, f) in cdf(values) {
        let _ = writeln!(out, "{v},{f}");
    }
    out
}

/// Writes `report.json`, `report.schema.json`, `tables.csv`, one
/// `cdf_<set>.csv` per attack set, and `run.json`.
pub fn write_report(layout: &Layout, report: &Report, opts: &EvalOptions, threads: usize) -> Result<()> {
    let dir = layout.report();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("report.json"), report)?;
    let put = |name: &str, text: &str| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    put("report.schema.json", REPORT_SCHEMA)?;
    put("tables.csv", &tables_csv(report))?;
    for s in &report.sets {
        put(&format!("cdf_{}.csv", s.name), &cdf_csv(&s.nld))?;
    }
    write_run(&dir, "eval", opts.seed, threads, layout, opts)
}

fn md_rows(out: &mut String, rows: &[&DetectorRow]) {
    out.push_str("| | Acc | F1 | TPR | FPR | CM (TN FP / FN TP) |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let cm = &r.cm;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} {} / {} {} |",
            r.name, r.acc, r.f1, r.tpr, r.fpr, cm.tn, cm.fp, cm.fn_, cm.tp
        );
    }
    out.push('\n');
}

/// Human-readable rendering of a report.
pub fn render_markdown(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# Evaluation (seed {})\n\n{} benign, {} malware held-out binaries.\n\n## Originals\n",
        report.seed, report.evaluation_set.benign, report.evaluation_set.malware
    );
    md_rows(&mut out, &report.baseline.iter().collect::<Vec<_>>());
    if !report.baseline_ensembles.is_empty() {
        md_rows(
            &mut out,
            &report.baseline_ensembles.iter().map(|r| &r.row).collect::<Vec<_>>(),
        );
    }
    for s in &report.sets {
        let _ = writeln!(
            out,
            "## Target {} ({})\n\nprocessed {}/{}, evaded {} ({:.2}%), mean NLD {:.4}\n\nOriginals:\n",
            s.target,
            s.name,
            s.processed,
            s.attempted,
            s.evaded,
            100.0 * s.evasion_rate,
            s.mean_nld
        );
        md_rows(&mut out, &s.original.iter().collect::<Vec<_>>());
        out.push_str("Transformed:\n\n");
        md_rows(&mut out, &s.transformed.iter().collect::<Vec<_>>());
        if !s.ensembles_transformed.is_empty() {
            out.push_str("Ensembles on transformed:\n\n");
            md_rows(
                &mut out,
                &s.ensembles_transformed.iter().map(|r| &r.row).collect::<Vec<_>>(),
            );
        }
    }
    if let Some(meta) = &report.meta_detection {
        out.push_str("## Detecting transformation\n\n");
        let mut rows = vec![&meta.held_out];
        rows.extend(&meta.by_set);
        md_rows(&mut out, &rows);
        if let Some(ex) = &meta.extremes {
            let _ = writeln!(out, "Extremes on `{}` (n = {}):\n", ex.set, ex.n);
            md_rows(&mut out, &[&ex.top, &ex.bottom]);
        }
    }
    out
}
