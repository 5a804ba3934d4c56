//! Format-agnostic features over header-stripped bytes: byte histogram,
//! byte-entropy histogram, printable-string statistics and section sizes.
//!
//! Layout of the 622 dimensions:
//!
//! | range     | block                                   |
//! |-----------|-----------------------------------------|
//! | 0..256    | byte histogram, sums to 1               |
//! | 256..512  | 16×16 byte-entropy histogram, sums to 1 |
//! | 512..614  | string statistics                       |
//! | 614..622  | section sizes and entropies             |
//!
//! Counts and sizes are `ln(1 + x)` scaled and entropies divided by their
//! maximum, so no block dwarfs the histograms under an L2 metric.

mod cache;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyprog::SectionMap;

pub use cache::{read_fvec, write_fvec, FvecSidecar, EXTRACTION_VERSION};

pub const DIM: usize = 622;
/// Counts and sizes enter as `ln(1 + x) / LOG_SCALE`, which keeps them near
/// the unit range of the histogram blocks so no block dominates an L2 distance.
pub const LOG_SCALE: f64 = 16.0;
pub const BYTE_HISTOGRAM: std::ops::Range<usize> = 0..256;
pub const BYTE_ENTROPY: std::ops::Range<usize> = 256..512;
pub const STRINGS: std::ops::Range<usize> = 512..614;
pub const SECTIONS: std::ops::Range<usize> = 614..622;

pub const ENTROPY_WINDOW: usize = 256;
pub const ENTROPY_STRIDE: usize = 64;
pub const MIN_STRING_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.len() != DIM {
            return Err(Error::InvalidArgument(format!(
                "feature vector has {} dims, expected {DIM}",
                values.len()
            )));
        }
        Ok(FeatureVector { values })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn byte_histogram(&self) -> &[f64] {
        &self.values[BYTE_HISTOGRAM]
    }

    pub fn byte_entropy_histogram(&self) -> &[f64] {
        &self.values[BYTE_ENTROPY]
    }

    pub fn string_stats(&self) -> &[f64] {
        &self.values[STRINGS]
    }

    pub fn section_info(&self) -> &[f64] {
        &self.values[SECTIONS]
    }
}

/// Byte frequencies normalized by length; all zero for empty input.
pub fn embedding_for_gradient(bytes: &[u8]) -> Vec<f64> {
    let mut hist = vec![0.0; 256];
    if bytes.is_empty() {
        return hist;
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    for (h, c) in hist.iter_mut().zip(counts) {
        *h = c as f64 / n;
    }
    hist
}

/// Shannon entropy in bits of a count histogram.
pub fn entropy_bits(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

/// Joint distribution of (window entropy bin, high nibble), over 256-byte
/// windows with stride 64. Window entropy is computed over the 16 high
/// nibbles, doubled to an 8-bit scale and quantized to 16 bins. Inputs
/// shorter than one window form a single window.
pub fn byte_entropy_histogram(bytes: &[u8]) -> Vec<f64> {
    let mut out = vec![0.0; 256];
    if bytes.is_empty() {
        return out;
    }
    let mut add_window = |window: &[u8]| {
        let mut nibbles = [0u64; 16];
        for &b in window {
            nibbles[(b >> 4) as usize] += 1;
        }
        let bin = ((entropy_bits(&nibbles) * 2.0 * 2.0) as usize).min(15);
        for (i, &c) in nibbles.iter().enumerate() {
            out[bin * 16 + i] += c as f64;
        }
    };
    if bytes.len() < ENTROPY_WINDOW {
        add_window(bytes);
    } else {
        for start in (0..=bytes.len() - ENTROPY_WINDOW).step_by(ENTROPY_STRIDE) {
            add_window(&bytes[start..start + ENTROPY_WINDOW]);
        }
    }
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

fn is_printable(b: u8) -> bool {
    (0x20..=0x7e).contains(&b)
}

/// Maximal runs of at least [`MIN_STRING_LEN`] printable bytes.
pub fn printable_strings(bytes: &[u8]) -> Vec<&[u8]> {
    bytes
        .split(|&b| !is_printable(b))
        .filter(|run| run.len() >= MIN_STRING_LEN)
        .collect()
}

fn count_substr(haystack: &[u8], needle: &[u8]) -> usize {
    haystack
        .windows(needle.len())
        .filter(|w| w.eq_ignore_ascii_case(needle))
        .count()
}

/// Count, average length, printable-character distribution over 96 buckets,
/// its entropy, and counts of path, URL and `MZ` markers.
pub fn string_stats(data: &[u8]) -> Vec<f64> {
    let strings = printable_strings(data);
    let mut out = vec![0.0; STRINGS.len()];
    if strings.is_empty() {
        return out;
    }
    let mut dist = [0u64; 96];
    let mut chars = 0usize;
    let (mut paths, mut urls, mut mz) = (0, 0, 0);
    for s in &strings {
        chars += s.len();
        for &c in *s {
            dist[(c - 0x20) as usize] += 1;
        }
        paths += count_substr(s, b"c:\\") + count_substr(s, b"/usr/") + count_substr(s, b"/etc/");
        urls += count_substr(s, b"http://") + count_substr(s, b"https://");
        mz += count_substr(s, b"MZ");
    }
    let n = strings.len() as f64;
    out[0] = n.ln_1p() / LOG_SCALE;
    out[1] = (chars as f64 / n).ln_1p() / LOG_SCALE;
    for (slot, &c) in out[2..98].iter_mut().zip(&dist) {
        *slot = c as f64 / chars as f64;
    }
    out[98] = entropy_bits(&dist) / 96f64.log2();
    out[99] = (paths as f64).ln_1p() / LOG_SCALE;
    out[100] = (urls as f64).ln_1p() / LOG_SCALE;
    out[101] = (mz as f64).ln_1p() / LOG_SCALE;
    out
}

fn byte_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    entropy_bits(&counts) / 8.0
}

/// Size and entropy of code, data and displaced sections, total size, and
/// the displaced fraction.
pub fn section_info(bytes: &[u8], sections: &SectionMap) -> Vec<f64> {
    let slice = |(s, e): (usize, usize)| &bytes[s..e];
    let (code, data, disp) = (slice(sections.code), slice(sections.data), slice(sections.displaced));
    let size = |b: &[u8]| (b.len() as f64).ln_1p() / LOG_SCALE;
    let total = bytes.len();
    vec![
        size(code),
        byte_entropy(code),
        size(data),
        byte_entropy(data),
        size(disp),
        byte_entropy(disp),
        (total as f64).ln_1p() / LOG_SCALE,
        if total == 0 {
            0.0
        } else {
            disp.len() as f64 / total as f64
        },
    ]
}

fn check_sections(len: usize, s: &SectionMap) -> Result<()> {
    let ranges = [s.code, s.data, s.displaced];
    let ordered = ranges.iter().all(|&(a, b)| a <= b)
        && s.code.0 == 0
        && s.code.1 <= s.data.0
        && s.data.1 <= s.displaced.0
        && s.displaced.1 == len;
    if !ordered {
        return Err(Error::Malformed(format!(
            "section map {s:?} inconsistent with {len} bytes"
        )));
    }
    Ok(())
}

/// Extracts the full feature vector from header-stripped bytes.
pub fn extract(bytes: &[u8], sections: &SectionMap) -> Result<FeatureVector> {
    check_sections(bytes.len(), sections)?;
    let mut values = Vec::with_capacity(DIM);
    values.extend(embedding_for_gradient(bytes));
    values.extend(byte_entropy_histogram(bytes));
    values.extend(string_stats(&bytes[sections.data.0..sections.data.1]));
    values.extend(section_info(bytes, sections));
    debug_assert_eq!(values.len(), DIM);
    Ok(FeatureVector { values })
}

/// Extracts features from a full serialized binary (header included).
pub fn extract_binary(binary: &[u8]) -> Result<FeatureVector> {
    let (stripped, sections) = crate::toyprog::stripped_with_sections(binary)?;
    extract(stripped, &sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(len: usize) -> SectionMap {
        SectionMap {
            code: (0, len),
            data: (len, len),
            displaced: (len, len),
        }
    }

    #[test]
    fn empty_input_is_all_zero() {
        let v = extract(&[], &flat(0)).unwrap();
        assert_eq!(v.as_slice().len(), DIM);
        assert!(v.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_symbol_window() {
        let bytes = vec![0x41u8; 256];
        let v = extract(&bytes, &flat(256)).unwrap();
        let h = v.byte_histogram();
        assert_eq!(h[0x41], 1.0);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
        let e = v.byte_entropy_histogram();
        assert_eq!(e[0x4], 1.0);
        assert_eq!(e.iter().filter(|&&x| x != 0.0).count(), 1);
    }

    #[test]
    fn inconsistent_sections_rejected() {
        let bad = SectionMap {
            code: (0, 8),
            data: (8, 20),
            displaced: (20, 20),
        };
        assert!(matches!(extract(&[0; 16], &bad), Err(Error::Malformed(_))));
    }

    #[test]
    fn strings_are_found_in_data_only() {
        let mut bytes = b"hello world\0".to_vec();
        let code_len = bytes.len();
        bytes.extend_from_slice(b"\x01http://x.example/a\0MZab\0c:\\tmp\\x\0");
        let len = bytes.len();
        let s = SectionMap {
            code: (0, code_len),
            data: (code_len, len),
            displaced: (len, len),
        };
        let v = extract(&bytes, &s).unwrap();
        let st = v.string_stats();
        assert!(
            (st[0] - 2f64.ln_1p() / LOG_SCALE).abs() < 1e-12,
            "http string and path string"
        );
        assert!((st[100] - 1f64.ln_1p() / LOG_SCALE).abs() < 1e-12);
        assert!((st[99] - 1f64.ln_1p() / LOG_SCALE).abs() < 1e-12);
        assert_eq!(st[101], 0.0, "`MZab` is too short to be a string");
        assert!((st[2..98].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
