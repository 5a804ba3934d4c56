//! The toy binary format: programs, their canonical byte serialization, and
//! the interpreter used as the functionality oracle.
//!
//! Layout of a serialized program:
//!
//! ```text
//! +---------------------+ 0
//! | header (32 bytes)   |
//! +---------------------+ 32
//! | function code       |  8 bytes per instruction, functions back to back
//! +---------------------+ data_offset
//! | data section        |  zero-padded to a multiple of 8
//! +---------------------+ displaced_offset
//! | displaced code      |  8 bytes per instruction
//! +---------------------+
//! ```
//!
//! Code addresses are instruction indices into the concatenation of all
//! function bodies followed by the displaced section. The opcode byte of the
//! first instruction of each function carries a marker bit, which is how
//! function boundaries survive serialization.

mod instr;
pub mod interp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use instr::{r, Instruction, Opcode, Operand, Reg, INSTR_WIDTH, NUM_REGS, SCRATCH};
pub use interp::{
    execute, execute_with, CodeImage, ExecConfig, Execution, Fault, MachineState, Status, DEFAULT_STEP_BUDGET,
    INPUT_BASE, INPUT_MAX, MAX_CALL_DEPTH, MEMORY_SIZE,
};

pub const HEADER_LEN: usize = 32;
pub const MAGIC: [u8; 4] = *b"TBIN";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Function {
    pub body: Vec<Instruction>,
}

impl Function {
    pub fn new(body: Vec<Instruction>) -> Self {
        Function { body }
    }
}

/// A toy program. Functions are identified by their position; function 0 is
/// the entry point.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ToyProgram {
    pub functions: Vec<Function>,
    pub data: Vec<u8>,
    pub displaced: Vec<Instruction>,
}

/// Parsed fixed-size header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub function_count: u16,
    pub code_instrs: u32,
    pub data_offset: u32,
    pub data_len: u32,
    pub displaced_offset: u32,
    pub displaced_instrs: u32,
}

/// Byte ranges of the three sections within a header-stripped binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionMap {
    pub code: (usize, usize),
    pub data: (usize, usize),
    pub displaced: (usize, usize),
}

impl SectionMap {
    pub fn total_len(&self) -> usize {
        self.displaced.1.max(self.data.1).max(self.code.1)
    }
}

fn pad8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Malformed(format!(
                "binary of {} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Malformed("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Malformed(format!("unsupported version {:#04x}", bytes[4])));
        }
        if bytes[5] != 0 || bytes[28..32].iter().any(|&b| b != 0) {
            return Err(Error::Malformed("reserved header bytes must be zero".into()));
        }
        let header = Header {
            version: bytes[4],
            function_count: u16::from_le_bytes([bytes[6], bytes[7]]),
            code_instrs: read_u32(bytes, 8),
            data_offset: read_u32(bytes, 12),
            data_len: read_u32(bytes, 16),
            displaced_offset: read_u32(bytes, 20),
            displaced_instrs: read_u32(bytes, 24),
        };
        let code_end = HEADER_LEN as u64 + header.code_instrs as u64 * INSTR_WIDTH as u64;
        let data_end = code_end + pad8(header.data_len as usize) as u64;
        if header.data_offset as u64 != code_end || header.displaced_offset as u64 != data_end {
            return Err(Error::Malformed("inconsistent section offsets".into()));
        }
        let total = data_end + header.displaced_instrs as u64 * INSTR_WIDTH as u64;
        if total != bytes.len() as u64 {
            return Err(Error::Malformed(format!(
                "header describes {total} bytes but binary has {}",
                bytes.len()
            )));
        }
        Ok(header)
    }

    /// Section ranges relative to the end of the header.
    pub fn sections(&self) -> SectionMap {
        let code_end = self.code_instrs as usize * INSTR_WIDTH;
        let data_start = self.data_offset as usize - HEADER_LEN;
        let disp_start = self.displaced_offset as usize - HEADER_LEN;
        SectionMap {
            code: (0, code_end),
            data: (data_start, data_start + self.data_len as usize),
            displaced: (disp_start, disp_start + self.displaced_instrs as usize * INSTR_WIDTH),
        }
    }
}

/// Removes the 32-byte header; every detector and the fuzzy hash consume this form.
pub fn strip_header(binary: &[u8]) -> Result<&[u8]> {
    if binary.len() < HEADER_LEN {
        return Err(Error::Malformed(format!(
            "binary of {} bytes is shorter than the {HEADER_LEN}-byte header",
            binary.len()
        )));
    }
    Ok(&binary[HEADER_LEN..])
}

/// Header-stripped bytes plus section boundaries of a serialized program.
pub fn stripped_with_sections(binary: &[u8]) -> Result<(&[u8], SectionMap)> {
    let header = Header::parse(binary)?;
    Ok((&binary[HEADER_LEN..], header.sections()))
}

impl ToyProgram {
    /// Number of instructions across all function bodies.
    pub fn code_instrs(&self) -> usize {
        self.functions.iter().map(|f| f.body.len()).sum()
    }

    /// Total addressable code: function bodies followed by the displaced section.
    pub fn code_len(&self) -> usize {
        self.code_instrs() + self.displaced.len()
    }

    /// Code address of the first instruction of each function.
    pub fn function_starts(&self) -> Vec<u32> {
        let mut starts = Vec::with_capacity(self.functions.len());
        let mut at = 0u32;
        for f in &self.functions {
            starts.push(at);
            at += f.body.len() as u32;
        }
        starts
    }

    /// Code address of `functions[function].body[index]`.
    pub fn address_of(&self, function: usize, index: usize) -> u32 {
        (self.functions[..function].iter().map(|f| f.body.len()).sum::<usize>() + index) as u32
    }

    /// Flattened code image, indexable by code address.
    pub fn code_image(&self) -> Vec<Instruction> {
        let mut image = Vec::with_capacity(self.code_len());
        for f in &self.functions {
            image.extend_from_slice(&f.body);
        }
        image.extend_from_slice(&self.displaced);
        image
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_LEN + INSTR_WIDTH * self.code_instrs() + pad8(self.data.len()) + INSTR_WIDTH * self.displaced.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.functions.len() > u16::MAX as usize {
            return Err(Error::Encoding("too many functions".into()));
        }
        let code_len = self.code_len() as u64;
        for (fi, f) in self.functions.iter().enumerate() {
            if f.body.is_empty() {
                return Err(Error::Encoding(format!("function {fi} has an empty body")));
            }
        }
        if let Some(last) = self.functions.last().and_then(|f| f.body.last()) {
            if !matches!(last.op, Opcode::Ret | Opcode::Jmp) {
                return Err(Error::Encoding("last function must end in ret or jmp".into()));
            }
        }
        if let Some(last) = self.displaced.last() {
            if !matches!(last.op, Opcode::Ret | Opcode::Jmp) {
                return Err(Error::Encoding("displaced section must end in ret or jmp".into()));
            }
        }
        let all = self
            .functions
            .iter()
            .flat_map(|f| f.body.iter())
            .chain(self.displaced.iter());
        for instr in all {
            instr.validate()?;
            if let Some(target) = instr.jump_target() {
                if target as u64 >= code_len {
                    return Err(Error::Encoding(format!(
                        "jump target {target} outside code of {code_len} instructions in `{instr}`"
                    )));
                }
            }
            if instr.op == Opcode::Call {
                let callee = instr.imm().unwrap_or(u32::MAX);
                if callee as usize >= self.functions.len() {
                    return Err(Error::Encoding(format!("call to missing function {callee}")));
                }
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let code_instrs = self.code_instrs();
        let data_offset = HEADER_LEN + code_instrs * INSTR_WIDTH;
        let displaced_offset = data_offset + pad8(self.data.len());
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(0);
        out.extend_from_slice(&(self.functions.len() as u16).to_le_bytes());
        for field in [
            code_instrs as u32,
            data_offset as u32,
            self.data.len() as u32,
            displaced_offset as u32,
            self.displaced.len() as u32,
            0,
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        debug_assert_eq!(out.len(), HEADER_LEN);
        for f in &self.functions {
            for (i, instr) in f.body.iter().enumerate() {
                let mut enc = instr.encode();
                if i == 0 {
                    enc[0] |= instr::FUNCTION_START;
                }
                out.extend_from_slice(&enc);
            }
        }
        out.extend_from_slice(&self.data);
        out.resize(displaced_offset, 0);
        for instr in &self.displaced {
            out.extend_from_slice(&instr.encode());
        }
        Ok(out)
    }

    pub fn deserialize(bytes: &[u8]) -> Result<ToyProgram> {
        let header = Header::parse(bytes)?;
        let code = &bytes[HEADER_LEN..header.data_offset as usize];
        let mut functions: Vec<Function> = Vec::with_capacity(header.function_count as usize);
        for chunk in code.chunks_exact(INSTR_WIDTH) {
            let mut enc = [0u8; INSTR_WIDTH];
            enc.copy_from_slice(chunk);
            let starts_function = enc[0] & instr::FUNCTION_START != 0;
            enc[0] &= !instr::FUNCTION_START;
            let instr = Instruction::decode(&enc)?;
            match functions.last_mut() {
                Some(f) if !starts_function => f.body.push(instr),
                None if !starts_function => {
                    return Err(Error::Malformed("code does not start with a function marker".into()))
                }
                _ => functions.push(Function::new(vec![instr])),
            }
        }
        if functions.len() != header.function_count as usize {
            return Err(Error::Malformed(format!(
                "header declares {} functions, code has {}",
                header.function_count,
                functions.len()
            )));
        }
        let data_start = header.data_offset as usize;
        let data_end = data_start + header.data_len as usize;
        let data = bytes[data_start..data_end].to_vec();
        if bytes[data_end..header.displaced_offset as usize]
            .iter()
            .any(|&b| b != 0)
        {
            return Err(Error::Malformed("non-zero data padding".into()));
        }
        let displaced = bytes[header.displaced_offset as usize..]
            .chunks_exact(INSTR_WIDTH)
            .map(|c| {
                if c[0] & instr::FUNCTION_START != 0 {
                    return Err(Error::Malformed("function marker in displaced section".into()));
                }
                Instruction::decode(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let program = ToyProgram {
            functions,
            data,
            displaced,
        };
        program.validate().map_err(|e| Error::Malformed(e.to_string()))?;
        Ok(program)
    }

    /// Human-readable listing.
    pub fn disassemble(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let mut addr = 0usize;
        for (fi, f) in self.functions.iter().enumerate() {
            let _ = writeln!(out, "fn{fi}:");
            for instr in &f.body {
                let _ = writeln!(out, "  {addr:5}  {instr}");
                addr += 1;
            }
        }
        if !self.displaced.is_empty() {
            let _ = writeln!(out, "displaced:");
            for instr in &self.displaced {
                let _ = writeln!(out, "  {addr:5}  {instr}");
                addr += 1;
            }
        }
        let _ = writeln!(out, "data: {} bytes", self.data.len());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_ret() -> ToyProgram {
        ToyProgram {
            functions: vec![Function::new(vec![Instruction::ret()])],
            ..Default::default()
        }
    }

    #[test]
    fn empty_program_is_header_only() {
        let bytes = ToyProgram::default().serialize().unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[..4], b"TBIN");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(ToyProgram::deserialize(&bytes).unwrap(), ToyProgram::default());
    }

    #[test]
    fn single_ret_is_forty_bytes() {
        let bytes = one_ret().serialize().unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(ToyProgram::deserialize(&bytes).unwrap(), one_ret());
    }

    #[test]
    fn strip_header_cases() {
        let header_only = ToyProgram::default().serialize().unwrap();
        assert!(strip_header(&header_only).unwrap().is_empty());
        let forty = one_ret().serialize().unwrap();
        assert_eq!(strip_header(&forty).unwrap(), &forty[32..]);
        assert_eq!(strip_header(&forty).unwrap().len(), 8);
        assert!(matches!(strip_header(&[0u8; 31]), Err(Error::Malformed(_))));
    }

    #[test]
    fn unresolvable_jump_is_an_encoding_error() {
        let p = ToyProgram {
            functions: vec![Function::new(vec![Instruction::jmp(5), Instruction::ret()])],
            ..Default::default()
        };
        assert!(matches!(p.serialize(), Err(Error::Encoding(_))));
    }

    #[test]
    fn data_is_padded_and_sections_mapped() {
        let p = ToyProgram {
            functions: vec![Function::new(vec![Instruction::nop(), Instruction::ret()])],
            data: b"hello".to_vec(),
            displaced: vec![Instruction::jmp(1)],
        };
        let bytes = p.serialize().unwrap();
        assert_eq!(bytes.len(), 32 + 16 + 8 + 8);
        let (stripped, map) = stripped_with_sections(&bytes).unwrap();
        assert_eq!(map.code, (0, 16));
        assert_eq!(map.data, (16, 21));
        assert_eq!(map.displaced, (24, 32));
        assert_eq!(&stripped[16..21], b"hello");
        assert_eq!(ToyProgram::deserialize(&bytes).unwrap(), p);
    }

    #[test]
    fn deserialize_rejects_corruption() {
        let mut bytes = one_ret().serialize().unwrap();
        bytes[0] = b'X';
        assert!(ToyProgram::deserialize(&bytes).is_err());
        let mut bytes = one_ret().serialize().unwrap();
        bytes.push(0);
        assert!(ToyProgram::deserialize(&bytes).is_err());
        let mut bytes = one_ret().serialize().unwrap();
        bytes[32] &= 0x7F; // drop the function marker
        assert!(ToyProgram::deserialize(&bytes).is_err());
    }
}
