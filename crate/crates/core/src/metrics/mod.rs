//! Confusion matrices, evasion rates, edit-distance perturbation accounting,
//! CDF data and the two-condition threat-model check.

mod nld;

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use nld::{levenshtein, levenshtein_within, nld};

/// Default perturbation bound for the threat-model check.
pub const DEFAULT_THETA0: f64 = 0.1;

/// A rate that may be undefined because its denominator is zero.
/// Serializes as a number or the string `"undefined"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rate {
    Value(f64),
    Undefined,
}

impl Rate {
    fn ratio(num: u64, den: u64) -> Rate {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Value(v) => Some(v),
            Rate::Undefined => None,
        }
    }

    /// Rounded to four decimals, the precision used in reports.
    pub fn rounded(self) -> Rate {
        match self {
            Rate::Value(v) => Rate::Value(round4(v)),
            Rate::Undefined => Rate::Undefined,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Value(v) => write!(f, "{v:.4}"),
            Rate::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rate::Value(v) => s.serialize_f64(*v),
            Rate::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Rate::Value(v)),
            Raw::Text(t) if t == "undefined" => Ok(Rate::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid rate `{t}`"))),
        }
    }
}

pub fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> Rate {
        Rate::ratio(self.tp + self.tn, self.total())
    }

    pub fn tpr(&self) -> Rate {
        Rate::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fnr(&self) -> Rate {
        Rate::ratio(self.fn_, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Rate {
        Rate::ratio(self.fp, self.fp + self.tn)
    }

    pub fn f1(&self) -> Rate {
        Rate::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn record(&mut self, predicted: u8, label: u8) {
        match (label, predicted) {
            (0, 0) => self.tn += 1,
            (0, _) => self.fp += 1,
            (_, 0) => self.fn_ += 1,
            _ => self.tp += 1,
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;
    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tp: self.tp + o.tp,
        }
    }
}

/// Counts predictions against labels.
pub fn score(predicted: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predicted.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if let Some(bad) = predicted.iter().chain(labels).find(|&&v| v > 1) {
        return Err(Error::InvalidArgument(format!("label {bad} is not 0 or 1")));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in predicted.iter().zip(labels) {
        cm.record(p, l);
    }
    Ok(cm)
}

/// Detector behaviour before and after an evasive transformation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvasionReport {
    pub detector: String,
    pub original: ConfusionMatrix,
    pub transformed: ConfusionMatrix,
    /// Per-sample NLD between original and transformed binaries.
    pub nld: Vec<f64>,
}

impl EvasionReport {
    pub fn fpr(&self) -> Rate {
        self.original.fpr()
    }
    pub fn tpr(&self) -> Rate {
        self.original.tpr()
    }
    pub fn fpr_evasive(&self) -> Rate {
        self.transformed.fpr()
    }
    pub fn tpr_evasive(&self) -> Rate {
        self.transformed.tpr()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThreatCheck {
    /// Every sample stays within `theta0` of its original.
    pub perturbation_bounded: bool,
    /// `(sample index, nld)` for samples beyond `theta0`.
    pub offending: Vec<(usize, f64)>,
    /// FPR rose and TPR fell under the transformation.
    pub rates_degraded: bool,
}

impl ThreatCheck {
    pub fn passed(&self) -> bool {
        self.perturbation_bounded && self.rates_degraded
    }
}

pub fn threat_check(report: &EvasionReport, theta0: f64) -> ThreatCheck {
    let offending: Vec<(usize, f64)> = report
        .nld
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, d)| d > theta0)
        .collect();
    let rates_degraded = match (
        report.fpr().value(),
        report.fpr_evasive().value(),
        report.tpr().value(),
        report.tpr_evasive().value(),
    ) {
        (Some(fpr), Some(fpr_e), Some(tpr), Some(tpr_e)) => fpr_e > fpr && tpr_e < tpr,
        _ => false,
    };
    ThreatCheck {
        perturbation_bounded: offending.is_empty(),
        offending,
        rates_degraded,
    }
}

/// Right-continuous empirical CDF: one `(value, fraction <= value)` point per
/// distinct value, ascending.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_detector() {
        let cm = score(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(
            cm,
            ConfusionMatrix {
                tn: 1,
                fp: 0,
                fn_: 0,
                tp: 1
            }
        );
        assert_eq!(cm.accuracy(), Rate::Value(1.0));
    }

    #[test]
    fn empty_positive_class_is_undefined() {
        let cm = score(&[1, 1, 1], &[0, 0, 0]).unwrap();
        assert_eq!(cm.fpr(), Rate::Value(1.0));
        assert_eq!(cm.tpr(), Rate::Undefined);
        assert_eq!(serde_json::to_string(&cm.tpr()).unwrap(), "\"undefined\"");
    }

    #[test]
    fn length_mismatch() {
        assert!(score(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn cdf_collapses_ties() {
        assert_eq!(cdf(&[0.5]), vec![(0.5, 1.0)]);
        let c = cdf(&[0.3, 0.1, 0.1]);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].0, 0.1);
        assert!((c[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c[1], (0.3, 1.0));
        assert!(cdf(&[]).is_empty());
    }

    #[test]
    fn identity_transformation_fails_rate_condition() {
        let cm = score(&[0, 1, 1, 0], &[0, 1, 0, 1]).unwrap();
        let report = EvasionReport {
            detector: "x".into(),
            original: cm,
            transformed: cm,
            nld: vec![0.0; 4],
        };
        let check = threat_check(&report, DEFAULT_THETA0);
        assert!(check.perturbation_bounded);
        assert!(!check.rates_degraded);
        assert!(!check.passed());
    }
}
