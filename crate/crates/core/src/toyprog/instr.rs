use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of every encoded instruction.
pub const INSTR_WIDTH: usize = 8;
/// Number of general purpose registers.
pub const NUM_REGS: usize = 8;
/// Register reserved for semantic nops; generated programs never touch it.
pub const SCRATCH: Reg = Reg(7);

/// Set on the opcode byte of the first instruction of every function.
pub(crate) const FUNCTION_START: u8 = 0x80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Opcode {
    Add = 0x01,
    Sub = 0x02,
    Xor = 0x03,
    Mov = 0x04,
    Load = 0x05,
    Store = 0x06,
    Jmp = 0x07,
    Jz = 0x08,
    Call = 0x09,
    Ret = 0x0A,
    Nop = 0x0B,
    Sys = 0x0C,
}

impl Opcode {
    pub const ALL: [Opcode; 12] = [
        Opcode::Add,
        Opcode::Sub,
        Opcode::Xor,
        Opcode::Mov,
        Opcode::Load,
        Opcode::Store,
        Opcode::Jmp,
        Opcode::Jz,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Nop,
        Opcode::Sys,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        Opcode::ALL.iter().copied().find(|op| *op as u8 == b)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Add => "add",
            Opcode::Sub => "sub",
            Opcode::Xor => "xor",
            Opcode::Mov => "mov",
            Opcode::Load => "load",
            Opcode::Store => "store",
            Opcode::Jmp => "jmp",
            Opcode::Jz => "jz",
            Opcode::Call => "call",
            Opcode::Ret => "ret",
            Opcode::Nop => "nop",
            Opcode::Sys => "sys",
        }
    }

    /// Transfers control somewhere other than the next instruction.
    pub fn is_control(self) -> bool {
        matches!(self, Opcode::Jmp | Opcode::Jz | Opcode::Call | Opcode::Ret)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub fn new(index: u8) -> Result<Reg> {
        if (index as usize) < NUM_REGS {
            Ok(Reg(index))
        } else {
            Err(Error::Encoding(format!("register r{index} out of range")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Shorthand for `Reg::new(i).unwrap()` on literal register numbers.
///
/// Panics if `i >= 8`.
pub fn r(i: u8) -> Reg {
    Reg::new(i).expect("register literal out of range")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(u32),
}

impl Operand {
    fn kind(self) -> u8 {
        match self {
            Operand::Reg(_) => 1,
            Operand::Imm(_) => 2,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(reg) => write!(f, "{reg}"),
            Operand::Imm(v) => write!(f, "#{v:#x}"),
        }
    }
}

/// One fixed-width instruction: opcode plus up to two operands.
///
/// Encoding (8 bytes): opcode, operand descriptor (`kind(a) | kind(b) << 2`
/// with 0 = absent, 1 = register, 2 = immediate), register byte of `a`,
/// register byte of `b`, little-endian 32-bit immediate. Bytes not used by
/// the operands are zero; decoding rejects anything else so the encoding
/// stays canonical.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Opcode,
    pub a: Option<Operand>,
    pub b: Option<Operand>,
}

impl Instruction {
    pub const fn new(op: Opcode, a: Option<Operand>, b: Option<Operand>) -> Self {
        Instruction { op, a, b }
    }

    pub fn rr(op: Opcode, dst: Reg, src: Reg) -> Self {
        Self::new(op, Some(Operand::Reg(dst)), Some(Operand::Reg(src)))
    }

    pub fn ri(op: Opcode, dst: Reg, imm: u32) -> Self {
        Self::new(op, Some(Operand::Reg(dst)), Some(Operand::Imm(imm)))
    }

    pub fn jmp(target: u32) -> Self {
        Self::new(Opcode::Jmp, Some(Operand::Imm(target)), None)
    }

    pub fn jz(cond: Reg, target: u32) -> Self {
        Self::new(Opcode::Jz, Some(Operand::Reg(cond)), Some(Operand::Imm(target)))
    }

    pub fn call(function: u32) -> Self {
        Self::new(Opcode::Call, Some(Operand::Imm(function)), None)
    }

    pub fn ret() -> Self {
        Self::new(Opcode::Ret, None, None)
    }

    pub fn nop() -> Self {
        Self::new(Opcode::Nop, None, None)
    }

    pub fn sys(src: Reg) -> Self {
        Self::new(Opcode::Sys, Some(Operand::Reg(src)), None)
    }

    /// `LOAD dst, [addr]`
    pub fn load(dst: Reg, addr: Operand) -> Self {
        Self::new(Opcode::Load, Some(Operand::Reg(dst)), Some(addr))
    }

    /// `STORE [addr], src`
    pub fn store(addr: Operand, src: Reg) -> Self {
        Self::new(Opcode::Store, Some(addr), Some(Operand::Reg(src)))
    }

    /// The immediate operand, if any.
    pub fn imm(&self) -> Option<u32> {
        [self.a, self.b].into_iter().flatten().find_map(|o| match o {
            Operand::Imm(v) => Some(v),
            Operand::Reg(_) => None,
        })
    }

    /// Code address this instruction may jump to (JMP/JZ only).
    pub fn jump_target(&self) -> Option<u32> {
        match self.op {
            Opcode::Jmp | Opcode::Jz => self.imm(),
            _ => None,
        }
    }

    /// Checks the operand shape against the opcode.
    pub fn validate(&self) -> Result<()> {
        use Operand::{Imm, Reg as R};
        let ok = match (self.op, self.a, self.b) {
            (Opcode::Add | Opcode::Sub | Opcode::Xor | Opcode::Mov | Opcode::Load, Some(R(_)), Some(_)) => true,
            (Opcode::Store, Some(_), Some(R(_))) => true,
            (Opcode::Jmp | Opcode::Call, Some(Imm(_)), None) => true,
            (Opcode::Jz, Some(R(_)), Some(Imm(_))) => true,
            (Opcode::Ret, None, None) => true,
            (Opcode::Sys, Some(_), None) => true,
            (Opcode::Nop, a, b) => a.is_some() || b.is_none(),
            _ => false,
        };
        if !ok {
            return Err(Error::Encoding(format!("invalid operands for {self}")));
        }
        if matches!((self.a, self.b), (Some(Imm(_)), Some(Imm(_)))) {
            return Err(Error::Encoding(format!("two immediates in {self}")));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; INSTR_WIDTH] {
        let mut out = [0u8; INSTR_WIDTH];
        out[0] = self.op as u8;
        out[1] = self.a.map_or(0, Operand::kind) | (self.b.map_or(0, Operand::kind) << 2);
        for (slot, operand) in [(2usize, self.a), (3, self.b)] {
            match operand {
                Some(Operand::Reg(reg)) => out[slot] = reg.0,
                Some(Operand::Imm(v)) => out[4..8].copy_from_slice(&v.to_le_bytes()),
                None => {}
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Instruction> {
        let bytes: &[u8; INSTR_WIDTH] = bytes
            .try_into()
            .map_err(|_| Error::Malformed(format!("instruction needs 8 bytes, got {}", bytes.len())))?;
        let op =
            Opcode::from_byte(bytes[0]).ok_or_else(|| Error::Malformed(format!("unknown opcode {:#04x}", bytes[0])))?;
        let desc = bytes[1];
        if desc & 0xF0 != 0 {
            return Err(Error::Malformed(format!("bad operand descriptor {desc:#04x}")));
        }
        let imm = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        let mut imm_used = false;
        let mut operand = |kind: u8, reg_byte: u8| -> Result<Option<Operand>> {
            match kind {
                0 if reg_byte == 0 => Ok(None),
                1 => Ok(Some(Operand::Reg(
                    Reg::new(reg_byte).map_err(|e| Error::Malformed(e.to_string()))?,
                ))),
                2 if reg_byte == 0 && !imm_used => {
                    imm_used = true;
                    Ok(Some(Operand::Imm(imm)))
                }
                _ => Err(Error::Malformed(format!(
                    "non-canonical operand descriptor {desc:#04x}"
                ))),
            }
        };
        let a = operand(desc & 0x3, bytes[2])?;
        let b = operand((desc >> 2) & 0x3, bytes[3])?;
        if !imm_used && imm != 0 {
            return Err(Error::Malformed(
                "immediate bytes set without an immediate operand".into(),
            ));
        }
        let instr = Instruction { op, a, b };
        instr.validate().map_err(|e| Error::Malformed(e.to_string()))?;
        Ok(instr)
    }

    /// Registers this instruction reads.
    pub fn reads(&self) -> Vec<Reg> {
        let reg = |o: Option<Operand>| match o {
            Some(Operand::Reg(r)) => Some(r),
            _ => None,
        };
        match self.op {
            // MOV overwrites its destination without reading it.
            Opcode::Mov | Opcode::Load => reg(self.b).into_iter().collect(),
            Opcode::Add | Opcode::Sub | Opcode::Xor | Opcode::Store => {
                [reg(self.a), reg(self.b)].into_iter().flatten().collect()
            }
            Opcode::Jz | Opcode::Sys => reg(self.a).into_iter().collect(),
            Opcode::Jmp | Opcode::Call | Opcode::Ret | Opcode::Nop => Vec::new(),
        }
    }

    /// Registers this instruction writes.
    pub fn writes(&self) -> Vec<Reg> {
        match (self.op, self.a) {
            (Opcode::Add | Opcode::Sub | Opcode::Xor | Opcode::Mov | Opcode::Load, Some(Operand::Reg(r))) => vec![r],
            _ => Vec::new(),
        }
    }

    pub fn touches_memory(&self) -> bool {
        matches!(self.op, Opcode::Load | Opcode::Store)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.op.mnemonic())?;
        match (self.a, self.b) {
            (Some(a), Some(b)) => write!(f, " {a}, {b}"),
            (Some(a), None) => write!(f, " {a}"),
            (None, Some(b)) => write!(f, " _, {b}"),
            (None, None) => Ok(()),
        }
    }
}
