//! Signature database: labelled digests with nearest-signature lookup.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{round4, signature_score, FuzzyDigest, ALPHABET, WINDOW};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbEntry {
    pub id: u32,
    pub label: u8,
    pub digest: FuzzyDigest,
    pub source_path: String,
}

/// A digest with its 7-grams packed into sorted integers for fast rejection.
#[derive(Clone, Debug)]
struct Prepared {
    grams1: Vec<u64>,
    grams2: Vec<u64>,
}

fn pack(sig: &str) -> Vec<u64> {
    let codes: Vec<u64> = sig
        .bytes()
        .map(|c| ALPHABET.iter().position(|&a| a == c).unwrap_or(0) as u64)
        .collect();
    let mut grams: Vec<u64> = codes
        .windows(WINDOW)
        .map(|w| w.iter().fold(0u64, |acc, &c| (acc << 6) | c))
        .collect();
    grams.sort_unstable();
    grams.dedup();
    grams
}

fn intersects(a: &[u64], b: &[u64]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

impl Prepared {
    fn new(d: &FuzzyDigest) -> Self {
        Prepared {
            grams1: pack(&d.sig1),
            grams2: pack(&d.sig2),
        }
    }
}

/// Same value as [`FuzzyDigest::similarity`], using precomputed 7-grams.
fn prepared_similarity(a: &FuzzyDigest, pa: &Prepared, b: &FuzzyDigest, pb: &Prepared) -> f64 {
    if a == b {
        return 1.0;
    }
    let (b1, b2) = (u64::from(a.block_size), u64::from(b.block_size));
    let pairs: Vec<(&str, &[u64], &str, &[u64])> = if b1 == b2 {
        vec![
            (&a.sig1, &pa.grams1, &b.sig1, &pb.grams1),
            (&a.sig2, &pa.grams2, &b.sig2, &pb.grams2),
        ]
    } else if b1 * 2 == b2 {
        vec![(&a.sig2, &pa.grams2, &b.sig1, &pb.grams1)]
    } else if b2 * 2 == b1 {
        vec![(&a.sig1, &pa.grams1, &b.sig2, &pb.grams2)]
    } else {
        return 0.0;
    };
    pairs
        .into_iter()
        .filter(|(_, ga, _, gb)| intersects(ga, gb))
        .map(|(sa, _, sb, _)| signature_score(sa.as_bytes(), sb.as_bytes()))
        .fold(0.0, f64::max)
}

/// Closest signature to a query digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nearest {
    /// `1 - similarity`, in `[0, 1]`.
    pub distance: f64,
    /// Smallest id among the entries at that distance.
    pub id: u32,
    pub label: u8,
    /// Number of entries at exactly that distance.
    pub ties: usize,
}

#[derive(Clone, Debug, Default)]
pub struct SignatureDb {
    entries: Vec<DbEntry>,
    prepared: Vec<Prepared>,
}

impl SignatureDb {
    pub fn new(entries: Vec<DbEntry>) -> Self {
        let prepared = entries.iter().map(|e| Prepared::new(&e.digest)).collect();
        SignatureDb { entries, prepared }
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: DbEntry) {
        self.prepared.push(Prepared::new(&entry.digest));
        self.entries.push(entry);
    }

    /// `min over the database of 1 - similarity`, ties broken by smallest id.
    pub fn nearest(&self, digest: &FuzzyDigest) -> Result<Nearest> {
        if self.entries.is_empty() {
            return Err(Error::State("signature database is empty".into()));
        }
        let query = Prepared::new(digest);
        let mut best: Option<Nearest> = None;
        for (entry, prep) in self.entries.iter().zip(&self.prepared) {
            let distance = round4(1.0 - prepared_similarity(digest, &query, &entry.digest, prep));
            match &mut best {
                Some(b) if distance > b.distance => {}
                Some(b) if distance == b.distance => {
                    b.ties += 1;
                    if entry.id < b.id {
                        b.id = entry.id;
                        b.label = entry.label;
                    }
                }
                _ => {
                    best = Some(Nearest {
                        distance,
                        id: entry.id,
                        label: entry.label,
                        ties: 1,
                    })
                }
            }
        }
        Ok(best.expect("database is non-empty"))
    }

    /// JSON lines, one entry per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for entry in &self.entries {
            serde_json::to_writer(&mut w, entry)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(file), path)
    }

    pub(crate) fn read(reader: impl BufRead, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
                path: path.to_owned(),
                reason: format!("line {}: {e}", n + 1),
            })?;
            entries.push(entry);
        }
        Ok(SignatureDb::new(entries))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u32, label: u8, digest: &str) -> DbEntry {
        DbEntry {
            id,
            label,
            digest: digest.parse().unwrap(),
            source_path: format!("{id}.tbin"),
        }
    }

    #[test]
    fn empty_database_is_an_error() {
        let d: FuzzyDigest = "3:ABCDEFGH:ABCD".parse().unwrap();
        assert!(SignatureDb::default().nearest(&d).is_err());
    }

    #[test]
    fn ties_resolve_to_smallest_id() {
        let db = SignatureDb::new(vec![entry(9, 1, "3:ABCDEFGH:X"), entry(4, 0, "3:ABCDEFGH:X")]);
        let n = db.nearest(&"3:ABCDEFGH:X".parse().unwrap()).unwrap();
        assert_eq!((n.distance, n.id, n.label, n.ties), (0.0, 4, 0, 2));
    }

    #[test]
    fn prepared_similarity_matches_direct() {
        let a: FuzzyDigest = "6:ABCDEFGHIJKLMN:ABCDEFG".parse().unwrap();
        let b: FuzzyDigest = "12:ABCDEFGxyz:Q".parse().unwrap();
        let c: FuzzyDigest = "6:ABCDEFGHIJKLMM:ZZZ".parse().unwrap();
        for (x, y) in [(&a, &b), (&b, &a), (&a, &c), (&c, &b)] {
            let direct = x.similarity(y);
            let fast = prepared_similarity(x, &Prepared::new(x), y, &Prepared::new(y));
            assert_eq!(direct, fast, "{x} vs {y}");
        }
    }
}
