//! m-of-3 voting over the three detectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detect::{DetectorId, Verdict};
use crate::error::{Error, Result};

/// Malware when at least `m` detectors say so.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct EnsembleRule(u8);

impl EnsembleRule {
    pub const MINORITY: EnsembleRule = EnsembleRule(1);
    pub const MAJORITY: EnsembleRule = EnsembleRule(2);
    pub const CONSENSUS: EnsembleRule = EnsembleRule(3);
    pub const ALL: [EnsembleRule; 3] = [Self::MINORITY, Self::MAJORITY, Self::CONSENSUS];

    pub fn new(m: u8) -> Result<Self> {
        match m {
            1..=3 => Ok(EnsembleRule(m)),
            _ => Err(Error::InvalidArgument(format!(
                "ensemble rule needs m in 1..=3, got {m}"
            ))),
        }
    }

    pub fn m(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            1 => "minority",
            2 => "majority",
            _ => "consensus",
        }
    }

    /// The label for `votes` malware votes out of three.
    pub fn decide(self, votes: usize) -> u8 {
        u8::from(votes >= self.0 as usize)
    }
}

impl TryFrom<u8> for EnsembleRule {
    type Error = Error;
    fn try_from(m: u8) -> Result<Self> {
        EnsembleRule::new(m)
    }
}

impl From<EnsembleRule> for u8 {
    fn from(r: EnsembleRule) -> u8 {
        r.0
    }
}

impl fmt::Display for EnsembleRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minority" => Ok(Self::MINORITY),
            "majority" => Ok(Self::MAJORITY),
            "consensus" => Ok(Self::CONSENSUS),
            _ => s
                .parse::<u8>()
                .map_err(|_| Error::InvalidArgument(format!("unknown ensemble rule `{s}`")))
                .and_then(EnsembleRule::new),
        }
    }
}

/// Combines one verdict per detector. The result's `detector` field is the
/// first member's id, since a verdict must name one; its confidence is the
/// mean of the members' confidences in the emitted label.
pub fn ensemble_verdict(verdicts: &[Verdict], rule: EnsembleRule) -> Result<Verdict> {
    if verdicts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "ensemble needs 3 verdicts, got {}",
            verdicts.len()
        )));
    }
    for id in DetectorId::ALL {
        if verdicts.iter().filter(|v| v.detector == id).count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "ensemble needs exactly one {id} verdict"
            )));
        }
    }
    let votes = verdicts.iter().filter(|v| v.label == 1).count();
    let label = rule.decide(votes);
    let confidence = verdicts.iter().map(|v| v.confidence_in(label)).sum::<f64>() / 3.0;
    Ok(Verdict {
        label,
        confidence,
        detector: verdicts[0].detector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdicts(labels: [u8; 3]) -> Vec<Verdict> {
        DetectorId::ALL
            .into_iter()
            .zip(labels)
            .map(|(detector, label)| Verdict {
                label,
                confidence: 0.8,
                detector,
            })
            .collect()
    }

    #[test]
    fn single_vote() {
        let v = verdicts([1, 0, 0]);
        assert_eq!(ensemble_verdict(&v, EnsembleRule::MINORITY).unwrap().label, 1);
        assert_eq!(ensemble_verdict(&v, EnsembleRule::MAJORITY).unwrap().label, 0);
        assert_eq!(ensemble_verdict(&v, EnsembleRule::CONSENSUS).unwrap().label, 0);
    }

    #[test]
    fn unanimous() {
        for rule in EnsembleRule::ALL {
            assert_eq!(ensemble_verdict(&verdicts([1, 1, 1]), rule).unwrap().label, 1);
        }
    }

    #[test]
    fn all_patterns_match_threshold_count() {
        for bits in 0..8u8 {
            let labels = [bits & 1, (bits >> 1) & 1, (bits >> 2) & 1];
            let ones = labels.iter().filter(|&&l| l == 1).count();
            for m in 1..=3u8 {
                let got = ensemble_verdict(&verdicts(labels), EnsembleRule::new(m).unwrap()).unwrap();
                assert_eq!(got.label == 1, ones >= m as usize, "labels {labels:?} m {m}");
            }
        }
    }

    #[test]
    fn permutation_invariant() {
        let mut v = verdicts([1, 0, 1]);
        let a = ensemble_verdict(&v, EnsembleRule::MAJORITY).unwrap();
        v.reverse();
        let b = ensemble_verdict(&v, EnsembleRule::MAJORITY).unwrap();
        assert_eq!(a.label, b.label);
        assert!((a.confidence - b.confidence).abs() < 1e-12);
    }

    #[test]
    fn confidence_is_mean_in_emitted_label() {
        // two votes of 0.8 for malware, one of 0.8 for benign (0.2 in malware)
        let got = ensemble_verdict(&verdicts([1, 1, 0]), EnsembleRule::MAJORITY).unwrap();
        assert!((got.confidence - 0.6).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detector_rejected() {
        let mut v = verdicts([1, 0, 0]);
        v[2].detector = DetectorId::Rawbyte;
        assert!(matches!(
            ensemble_verdict(&v, EnsembleRule::MAJORITY),
            Err(Error::InvalidArgument(_))
        ));
        assert!(ensemble_verdict(&v[..2], EnsembleRule::MAJORITY).is_err());
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("2".parse::<EnsembleRule>().unwrap(), EnsembleRule::MAJORITY);
        assert_eq!("consensus".parse::<EnsembleRule>().unwrap(), EnsembleRule::CONSENSUS);
        assert!("4".parse::<EnsembleRule>().is_err());
        assert!(EnsembleRule::new(0).is_err());
    }
}
