//! Semantic nops: short instruction sequences with no effect on registers,
//! memory or output. Each one carries a single settable byte that the attack
//! may choose freely.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::toyprog::{Instruction, Opcode, Operand, SCRATCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NopKind {
    /// `nop #b`
    Imm,
    /// `xor r7, #b; xor r7, #b`
    XorPair,
    /// `add r7, #b; sub r7, #b`
    AddSub,
    /// `xor r7, #b; mov r7, r7; xor r7, #b`
    ScratchMov,
}

impl NopKind {
    pub const ALL: [NopKind; 4] = [NopKind::Imm, NopKind::XorPair, NopKind::AddSub, NopKind::ScratchMov];

    /// Length in instructions.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        match self {
            NopKind::Imm => 1,
            NopKind::XorPair | NopKind::AddSub => 2,
            NopKind::ScratchMov => 3,
        }
    }

    pub fn instructions(self, byte: u8) -> Vec<Instruction> {
        let b = u32::from(byte);
        match self {
            NopKind::Imm => vec![Instruction::new(Opcode::Nop, Some(Operand::Imm(b)), None)],
            NopKind::XorPair => vec![
                Instruction::ri(Opcode::Xor, SCRATCH, b),
                Instruction::ri(Opcode::Xor, SCRATCH, b),
            ],
            NopKind::AddSub => vec![
                Instruction::ri(Opcode::Add, SCRATCH, b),
                Instruction::ri(Opcode::Sub, SCRATCH, b),
            ],
            NopKind::ScratchMov => vec![
                Instruction::ri(Opcode::Xor, SCRATCH, b),
                Instruction::rr(Opcode::Mov, SCRATCH, SCRATCH),
                Instruction::ri(Opcode::Xor, SCRATCH, b),
            ],
        }
    }

    /// Offsets (relative to the first instruction's first byte) of every copy
    /// of the settable byte in the encoding.
    pub fn byte_offsets(self) -> Vec<usize> {
        match self {
            NopKind::Imm => vec![4],
            NopKind::XorPair | NopKind::AddSub => vec![4, 12],
            NopKind::ScratchMov => vec![4, 20],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemanticNop {
    pub kind: NopKind,
    pub byte: u8,
}

impl SemanticNop {
    pub fn instructions(&self) -> Vec<Instruction> {
        self.kind.instructions(self.byte)
    }

    /// Recognizes a semantic nop at the start of `code`.
    pub fn recognize(code: &[Instruction]) -> Option<SemanticNop> {
        // longest first so a ScratchMov is not mistaken for something shorter
        for kind in [NopKind::ScratchMov, NopKind::XorPair, NopKind::AddSub, NopKind::Imm] {
            let n = kind.len();
            if code.len() < n {
                continue;
            }
            let Some(byte) = code[0].imm().and_then(|v| u8::try_from(v).ok()) else {
                continue;
            };
            if kind.instructions(byte)[..] == code[..n] {
                return Some(SemanticNop { kind, byte });
            }
        }
        None
    }
}

/// Splits `slots` instruction slots into semantic nops of length 1–3.
pub fn random_layout<R: Rng>(slots: usize, rng: &mut R) -> Vec<NopKind> {
    let mut kinds = Vec::new();
    let mut left = slots;
    while left > 0 {
        let fitting: Vec<NopKind> = NopKind::ALL.iter().copied().filter(|k| k.len() <= left).collect();
        let kind = fitting[rng.gen_range(0..fitting.len())];
        left -= kind.len();
        kinds.push(kind);
    }
    kinds
}
