//! Functionality-preserving transformations.
//!
//! Two families: in-place rewrites (IPR) that never change the serialized
//! length, and displacement (Disp) that moves code into the displaced section
//! under a size cap. Every transformation is described by a
//! [`TransformRecord`] that replays byte-exactly on its pre-image.

mod disp;
mod ipr;
pub mod nops;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toyprog::{Instruction, ToyProgram};

pub use disp::{bytes_per_function, check_range, disp, disp_within, growth, size_limit, SIZE_GROWTH_CAP};
pub use ipr::{equivalents, independent, ipr_reorder, ipr_substitute};
pub use nops::{random_layout, NopKind, SemanticNop};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransformKind {
    IprSubstitute,
    IprReorder,
    Disp,
}

impl TransformKind {
    pub fn is_ipr(self) -> bool {
        matches!(self, TransformKind::IprSubstitute | TransformKind::IprReorder)
    }
}

/// A location where a transformation of some kind applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub function: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransformParams {
    Substitute {
        choice: usize,
    },
    Reorder,
    Disp {
        displaced_bytes: usize,
        nops: Vec<SemanticNop>,
    },
}

/// Replayable description of one applied transformation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub kind: TransformKind,
    pub function: usize,
    /// First instruction index affected.
    pub start: usize,
    /// Number of instructions affected.
    pub len: usize,
    pub params: TransformParams,
}

impl TransformRecord {
    pub fn substitute(site: Site, choice: usize) -> Self {
        TransformRecord {
            kind: TransformKind::IprSubstitute,
            function: site.function,
            start: site.index,
            len: 1,
            params: TransformParams::Substitute { choice },
        }
    }

    pub fn reorder(site: Site) -> Self {
        TransformRecord {
            kind: TransformKind::IprReorder,
            function: site.function,
            start: site.index,
            len: 2,
            params: TransformParams::Reorder,
        }
    }

    pub fn displace(function: usize, start: usize, len: usize, nops: Vec<SemanticNop>) -> Self {
        TransformRecord {
            kind: TransformKind::Disp,
            function,
            start,
            len,
            params: TransformParams::Disp {
                displaced_bytes: len * crate::toyprog::INSTR_WIDTH,
                nops,
            },
        }
    }

    /// Applies the record. Displacement is bounded by `max_size` rather than
    /// the per-step 1% cap so an attack can account against the original size.
    pub fn apply_within(&self, program: &ToyProgram, max_size: usize) -> Result<ToyProgram> {
        match (&self.params, self.kind) {
            (TransformParams::Substitute { choice }, TransformKind::IprSubstitute) => {
                ipr_substitute(program, self.function, self.start, *choice)
            }
            (TransformParams::Reorder, TransformKind::IprReorder) => ipr_reorder(program, self.function, self.start),
            (TransformParams::Disp { nops, .. }, TransformKind::Disp) => {
                disp_within(program, self.function, self.start, self.len, nops, max_size)
            }
            _ => Err(Error::InvalidArgument(format!(
                "record kind {:?} does not match its parameters",
                self.kind
            ))),
        }
    }

    pub fn apply(&self, program: &ToyProgram) -> Result<ToyProgram> {
        self.apply_within(program, size_limit(program.serialized_len()))
    }

    /// Sites of the semantic nops a displacement left in place.
    pub fn nop_sites(&self) -> Vec<Site> {
        let TransformParams::Disp { nops, .. } = &self.params else {
            return Vec::new();
        };
        let mut index = self.start + 1;
        nops.iter()
            .map(|n| {
                let site = Site {
                    function: self.function,
                    index,
                };
                index += n.kind.len();
                site
            })
            .collect()
    }
}

/// Replays records in order from `original`.
pub fn replay(original: &ToyProgram, records: &[TransformRecord], max_size: usize) -> Result<ToyProgram> {
    records
        .iter()
        .try_fold(original.clone(), |p, rec| rec.apply_within(&p, max_size))
}

/// Every address some JMP or JZ may land on.
pub fn jump_targets(program: &ToyProgram) -> BTreeSet<u32> {
    program
        .functions
        .iter()
        .flat_map(|f| f.body.iter())
        .chain(program.displaced.iter())
        .filter_map(Instruction::jump_target)
        .collect()
}

/// Applicable sites in (function, index) order. For `Disp`, sites are the
/// starts of displaceable two-instruction ranges.
pub fn enumerate_sites(program: &ToyProgram, kind: TransformKind) -> Vec<Site> {
    match kind {
        TransformKind::Disp => disp_sites(program, 2),
        TransformKind::IprSubstitute => program
            .functions
            .iter()
            .enumerate()
            .flat_map(|(function, f)| {
                f.body
                    .iter()
                    .enumerate()
                    .filter(|(_, i)| !equivalents(i).is_empty())
                    .map(move |(index, _)| Site { function, index })
            })
            .collect(),
        TransformKind::IprReorder => {
            let targets = jump_targets(program);
            let mut sites = Vec::new();
            let mut addr = 0u32;
            for (function, f) in program.functions.iter().enumerate() {
                for index in 0..f.body.len().saturating_sub(1) {
                    if independent(&f.body[index], &f.body[index + 1]) && !targets.contains(&(addr + index as u32 + 1))
                    {
                        sites.push(Site { function, index });
                    }
                }
                addr += f.body.len() as u32;
            }
            sites
        }
    }
}

/// Starts of every displaceable range of exactly `len` instructions.
pub fn disp_sites(program: &ToyProgram, len: usize) -> Vec<Site> {
    if len < 2 {
        return Vec::new();
    }
    let targets = jump_targets(program);
    let mut sites = Vec::new();
    let mut addr = 0u32;
    for (function, f) in program.functions.iter().enumerate() {
        // the final instruction of each body is never displaced
        for start in 0..f.body.len().saturating_sub(len) {
            let first = addr + start as u32;
            if targets.range(first + 1..first + len as u32).next().is_none() {
                sites.push(Site { function, index: start });
            }
        }
        addr += f.body.len() as u32;
    }
    sites
}

/// Reads the semantic nop starting at `site`, if there is one.
pub fn nop_at(program: &ToyProgram, site: Site) -> Option<SemanticNop> {
    let body = &program.functions.get(site.function)?.body;
    SemanticNop::recognize(body.get(site.index..)?)
}

/// Rewrites the settable byte of the semantic nop at `site`.
pub fn set_nop_byte(program: &ToyProgram, site: Site, byte: u8) -> Result<ToyProgram> {
    let nop = nop_at(program, site)
        .ok_or_else(|| Error::Misuse(format!("fn{}[{}] is not a semantic nop", site.function, site.index)))?;
    let mut out = program.clone();
    let body = &mut out.functions[site.function].body;
    let fresh = SemanticNop { kind: nop.kind, byte }.instructions();
    body.splice(site.index..site.index + fresh.len(), fresh);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyprog::{r, Function, Opcode};

    #[test]
    fn all_ret_program_has_no_substitution_sites() {
        let p = ToyProgram {
            functions: vec![Function::new(vec![Instruction::ret(); 4]); 3],
            ..Default::default()
        };
        assert!(enumerate_sites(&p, TransformKind::IprSubstitute).is_empty());
    }

    #[test]
    fn single_add_has_one_substitution_site() {
        let p = ToyProgram {
            functions: vec![Function::new(vec![
                Instruction::ri(Opcode::Mov, r(1), 5),
                Instruction::ri(Opcode::Add, r(1), 3),
                Instruction::ret(),
            ])],
            ..Default::default()
        };
        assert_eq!(
            enumerate_sites(&p, TransformKind::IprSubstitute),
            vec![Site { function: 0, index: 1 }]
        );
    }

    #[test]
    fn record_replays_and_exposes_nop_sites() {
        let body: Vec<Instruction> = (0..600)
            .map(|i| Instruction::ri(Opcode::Add, r(1), i))
            .chain([Instruction::ret()])
            .collect();
        let p = ToyProgram {
            functions: vec![Function::new(body)],
            ..Default::default()
        };
        let nops = vec![
            SemanticNop {
                kind: NopKind::XorPair,
                byte: 1,
            },
            SemanticNop {
                kind: NopKind::Imm,
                byte: 2,
            },
        ];
        let rec = TransformRecord::displace(0, 10, 4, nops.clone());
        let q = rec.apply(&p).unwrap();
        assert_eq!(rec.apply(&p).unwrap(), q);
        let sites = rec.nop_sites();
        assert_eq!(
            sites,
            vec![Site { function: 0, index: 11 }, Site { function: 0, index: 13 }]
        );
        for (site, nop) in sites.iter().zip(&nops) {
            assert_eq!(nop_at(&q, *site), Some(*nop));
        }
        let q2 = set_nop_byte(&q, sites[0], 0xEE).unwrap();
        assert_eq!(nop_at(&q2, sites[0]).unwrap().byte, 0xEE);
        assert!(matches!(
            set_nop_byte(&q, Site { function: 0, index: 2 }, 1),
            Err(Error::Misuse(_))
        ));
    }
}
