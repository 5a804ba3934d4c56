//! Context-triggered piecewise hashing.
//!
//! A 7-byte rolling hash decides chunk boundaries: a chunk ends wherever the
//! rolling value is `b - 1 (mod b)`. Each chunk contributes one Base64
//! character (the 6 low bits of its FNV-1a hash). A digest holds signatures at
//! block sizes `b` and `2b` and prints as `b:sig1:sig2`.

mod db;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::metrics::levenshtein;

pub use db::{DbEntry, Nearest, SignatureDb};

pub const ALPHABET: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
pub const WINDOW: usize = 7;
pub const MIN_BLOCK_SIZE: u32 = 3;
/// Target number of chunks, and the maximum signature length.
pub const SPAMSUM_LENGTH: usize = 64;

const FNV_OFFSET: u32 = 0x811c_9dc5;
const FNV_PRIME: u32 = 0x0100_0193;
/// `31^7 mod 2^32`, the weight of the byte leaving the window.
const OUTGOING_WEIGHT: u32 = 31u32.wrapping_pow(WINDOW as u32);

/// Polynomial rolling hash over the last 7 bytes, zero-initialized:
/// `h = sum(w[i] * 31^(6 - i)) mod 2^32` with `w[0]` the oldest byte.
#[derive(Clone, Debug, Default)]
pub struct RollingWindow {
    window: [u8; WINDOW],
    pos: usize,
    hash: u32,
}

impl RollingWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, byte: u8) -> u32 {
        let outgoing = self.window[self.pos];
        self.window[self.pos] = byte;
        self.pos = (self.pos + 1) % WINDOW;
        self.hash = self
            .hash
            .wrapping_mul(31)
            .wrapping_sub(u32::from(outgoing).wrapping_mul(OUTGOING_WEIGHT))
            .wrapping_add(u32::from(byte));
        self.hash
    }

    pub fn value(&self) -> u32 {
        self.hash
    }
}

/// Positions (index of the last byte) at which a chunk boundary triggers.
pub fn trigger_points(bytes: &[u8], block_size: u32) -> Vec<usize> {
    let mut roll = RollingWindow::new();
    bytes
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| (roll.update(b) % block_size == block_size - 1).then_some(i))
        .collect()
}

/// Smallest `3 * 2^k` with `64 * b >= n`.
pub fn initial_block_size(n: usize) -> u32 {
    let mut b = MIN_BLOCK_SIZE;
    while (b as usize) * SPAMSUM_LENGTH < n {
        b *= 2;
    }
    b
}

/// Probability that `7b` uniformly random rolling values contain no trigger.
pub fn trigger_survival_probability(block_size: u32) -> f64 {
    let b = f64::from(block_size);
    (1.0 - 1.0 / b).powf(7.0 * b)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FuzzyDigest {
    pub block_size: u32,
    pub sig1: String,
    pub sig2: String,
}

struct Signer {
    block_size: u32,
    sig: Vec<u8>,
    hash: u32,
    pending: bool,
}

impl Signer {
    fn new(block_size: u32) -> Self {
        Signer {
            block_size,
            sig: Vec::with_capacity(SPAMSUM_LENGTH),
            hash: FNV_OFFSET,
            pending: false,
        }
    }

    fn push(&mut self, byte: u8, roll: u32) {
        self.hash = (self.hash ^ u32::from(byte)).wrapping_mul(FNV_PRIME);
        self.pending = true;
        // the last character is reserved for the tail of the input
        if roll % self.block_size == self.block_size - 1 && self.sig.len() < SPAMSUM_LENGTH - 1 {
            self.emit();
        }
    }

    fn emit(&mut self) {
        self.sig.push(ALPHABET[(self.hash & 0x3f) as usize]);
        self.hash = FNV_OFFSET;
        self.pending = false;
    }

    fn finish(mut self) -> String {
        if self.pending {
            self.emit();
        }
        String::from_utf8(self.sig).expect("alphabet is ASCII")
    }
}

fn digest_at(bytes: &[u8], block_size: u32) -> FuzzyDigest {
    let mut roll = RollingWindow::new();
    let mut s1 = Signer::new(block_size);
    let mut s2 = Signer::new(block_size * 2);
    for &byte in bytes {
        let h = roll.update(byte);
        s1.push(byte, h);
        s2.push(byte, h);
    }
    FuzzyDigest {
        block_size,
        sig1: s1.finish(),
        sig2: s2.finish(),
    }
}

impl FuzzyDigest {
    /// Digest of header-stripped bytes. Starts at [`initial_block_size`] and
    /// halves while the first signature has fewer than 32 characters.
    pub fn of(bytes: &[u8]) -> FuzzyDigest {
        let mut b = initial_block_size(bytes.len());
        loop {
            let d = digest_at(bytes, b);
            if d.sig1.len() >= SPAMSUM_LENGTH / 2 || b <= MIN_BLOCK_SIZE {
                return d;
            }
            b /= 2;
        }
    }

    /// Signature pairs from the two digests that share a block size.
    fn comparable<'a>(&'a self, other: &'a FuzzyDigest) -> Vec<(&'a str, &'a str)> {
        let (b1, b2) = (u64::from(self.block_size), u64::from(other.block_size));
        if b1 == b2 {
            vec![(&self.sig1, &other.sig1), (&self.sig2, &other.sig2)]
        } else if b1 * 2 == b2 {
            vec![(&self.sig2, &other.sig1)]
        } else if b2 * 2 == b1 {
            vec![(&self.sig1, &other.sig2)]
        } else {
            Vec::new()
        }
    }

    /// Score in `[0, 1]`, rounded to 4 decimals.
    pub fn similarity(&self, other: &FuzzyDigest) -> f64 {
        if self == other {
            return 1.0;
        }
        self.comparable(other)
            .into_iter()
            .filter(|(a, b)| shares_window(a.as_bytes(), b.as_bytes()))
            .map(|(a, b)| signature_score(a.as_bytes(), b.as_bytes()))
            .fold(0.0, f64::max)
    }

    /// `1 - similarity`.
    pub fn distance(&self, other: &FuzzyDigest) -> f64 {
        round4(1.0 - self.similarity(other))
    }
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// `1 - NLD` of two signatures, without the 7-gram gate.
pub fn signature_score(a: &[u8], b: &[u8]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 1.0;
    }
    round4(1.0 - levenshtein(a, b) as f64 / longest as f64)
}

/// Whether the signatures have a common substring of length 7.
pub fn shares_window(a: &[u8], b: &[u8]) -> bool {
    if a.len() < WINDOW || b.len() < WINDOW {
        return false;
    }
    let grams: std::collections::HashSet<&[u8]> = a.windows(WINDOW).collect();
    b.windows(WINDOW).any(|w| grams.contains(w))
}

impl fmt::Display for FuzzyDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.block_size, self.sig1, self.sig2)
    }
}

impl FromStr for FuzzyDigest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("`{s}` is not a digest of the form b:sig1:sig2"));
        let mut parts = s.splitn(3, ':');
        let (Some(b), Some(sig1), Some(sig2)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let block_size: u32 = b.parse().map_err(|_| bad())?;
        let valid = |sig: &str| sig.len() <= SPAMSUM_LENGTH && sig.bytes().all(|c| ALPHABET.contains(&c));
        if block_size < MIN_BLOCK_SIZE || !valid(sig1) || !valid(sig2) {
            return Err(bad());
        }
        Ok(FuzzyDigest {
            block_size,
            sig1: sig1.to_owned(),
            sig2: sig2.to_owned(),
        })
    }
}

impl Serialize for FuzzyDigest {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FuzzyDigest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_value_is_the_window_polynomial() {
        let bytes: Vec<u8> = (0..40u8).map(|i| i.wrapping_mul(37).wrapping_add(5)).collect();
        let mut roll = RollingWindow::new();
        for (i, &b) in bytes.iter().enumerate() {
            roll.update(b);
            let mut window = [0u8; WINDOW];
            for k in 0..WINDOW {
                if i + 1 + k >= WINDOW {
                    window[k] = bytes[i + 1 + k - WINDOW];
                }
            }
            let direct = window
                .iter()
                .fold(0u32, |h, &w| h.wrapping_mul(31).wrapping_add(u32::from(w)));
            assert_eq!(roll.value(), direct);
        }
    }

    #[test]
    fn block_size_ladder() {
        assert_eq!(initial_block_size(500), 12);
        assert_eq!(initial_block_size(1), 3);
        assert_eq!(initial_block_size(0), 3);
        assert_eq!(initial_block_size(192), 3);
        assert_eq!(initial_block_size(193), 6);
    }

    #[test]
    fn empty_input_digest() {
        let d = FuzzyDigest::of(&[]);
        assert_eq!(d.to_string(), "3::");
    }

    #[test]
    fn text_round_trip() {
        let bytes: Vec<u8> = (0..3000u32).map(|i| (i * 7919 % 251) as u8).collect();
        let d = FuzzyDigest::of(&bytes);
        assert_eq!(d.to_string().parse::<FuzzyDigest>().unwrap(), d);
        assert!("x:AB:C".parse::<FuzzyDigest>().is_err());
        assert!("12:AB-:C".parse::<FuzzyDigest>().is_err());
    }

    #[test]
    fn incomparable_block_sizes_score_zero() {
        let a = FuzzyDigest {
            block_size: 3,
            sig1: "ABCDEFGH".into(),
            sig2: "ABCDEFGH".into(),
        };
        let b = FuzzyDigest {
            block_size: 12,
            sig1: "ABCDEFGH".into(),
            sig2: "ABCDEFGH".into(),
        };
        assert_eq!(a.similarity(&b), 0.0);
    }
}
