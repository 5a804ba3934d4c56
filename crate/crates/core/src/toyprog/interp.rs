//! Reference interpreter. Two programs are considered functionally equivalent
//! when they produce the same status and output log on the same inputs.

use serde::{Deserialize, Serialize};

use super::{Instruction, Opcode, Operand, ToyProgram, NUM_REGS};
use crate::error::{Error, Result};

pub const MEMORY_SIZE: usize = 64 * 1024;
pub const INPUT_BASE: u32 = 0x1000;
pub const INPUT_MAX: usize = 4 * 1024;
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
pub const MAX_CALL_DEPTH: usize = 256;

#[derive(Clone, Copy, Debug)]
pub struct ExecConfig {
    pub step_budget: u64,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            step_budget: DEFAULT_STEP_BUDGET,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum Fault {
    MemoryAccess {
        addr: u32,
    },
    /// Sequential execution ran past the end of the function code or the displaced section.
    FellOffCode {
        pc: u32,
    },
    PcOutOfRange {
        pc: u32,
    },
    CallDepth,
    NoEntry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Halted,
    Timeout,
    Fault(Fault),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub status: Status,
    pub output: Vec<u32>,
    pub steps: u64,
}

impl Execution {
    /// Observable behaviour: status and output log. Step counts are excluded
    /// because displacement adds jumps.
    pub fn same_behaviour(&self, other: &Execution) -> bool {
        self.status == other.status && self.output == other.output
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub registers: [u32; NUM_REGS],
    pub memory: Vec<u8>,
    pub output_log: Vec<u32>,
    pub step_count: u64,
}

impl MachineState {
    /// Fresh state with `input` copied to [`INPUT_BASE`] and its length in r0.
    pub fn new(input: &[u8]) -> Result<MachineState> {
        if input.len() > INPUT_MAX {
            return Err(Error::InputTooLarge {
                len: input.len(),
                max: INPUT_MAX,
            });
        }
        let mut memory = vec![0u8; MEMORY_SIZE];
        memory[INPUT_BASE as usize..INPUT_BASE as usize + input.len()].copy_from_slice(input);
        let mut registers = [0u32; NUM_REGS];
        registers[0] = input.len() as u32;
        Ok(MachineState {
            registers,
            memory,
            output_log: Vec::new(),
            step_count: 0,
        })
    }

    fn value(&self, operand: Option<Operand>) -> u32 {
        match operand {
            Some(Operand::Reg(r)) => self.registers[r.index()],
            Some(Operand::Imm(v)) => v,
            None => 0,
        }
    }

    fn load(&self, addr: u32) -> std::result::Result<u32, Fault> {
        let at = addr as usize;
        if at + 4 > MEMORY_SIZE {
            return Err(Fault::MemoryAccess { addr });
        }
        Ok(u32::from_le_bytes([
            self.memory[at],
            self.memory[at + 1],
            self.memory[at + 2],
            self.memory[at + 3],
        ]))
    }

    fn store(&mut self, addr: u32, value: u32) -> std::result::Result<(), Fault> {
        let at = addr as usize;
        if at + 4 > MEMORY_SIZE {
            return Err(Fault::MemoryAccess { addr });
        }
        self.memory[at..at + 4].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    /// Executes one non-control instruction. Control instructions are a no-op here.
    pub fn apply(&mut self, instr: &Instruction) -> std::result::Result<(), Fault> {
        let dst = match instr.a {
            Some(Operand::Reg(r)) => Some(r.index()),
            _ => None,
        };
        let src = self.value(instr.b);
        match (instr.op, dst) {
            (Opcode::Add, Some(d)) => self.registers[d] = self.registers[d].wrapping_add(src),
            (Opcode::Sub, Some(d)) => self.registers[d] = self.registers[d].wrapping_sub(src),
            (Opcode::Xor, Some(d)) => self.registers[d] ^= src,
            (Opcode::Mov, Some(d)) => self.registers[d] = src,
            (Opcode::Load, Some(d)) => self.registers[d] = self.load(src)?,
            (Opcode::Store, _) => {
                let addr = self.value(instr.a);
                self.store(addr, src)?;
            }
            (Opcode::Sys, _) => {
                let v = self.value(instr.a);
                self.output_log.push(v);
            }
            _ => {}
        }
        Ok(())
    }
}

pub fn execute(program: &ToyProgram, input: &[u8]) -> Result<Execution> {
    execute_with(program, input, ExecConfig::default())
}

pub fn execute_with(program: &ToyProgram, input: &[u8], config: ExecConfig) -> Result<Execution> {
    CodeImage::new(program).execute(input, config)
}

/// A program flattened for repeated execution.
#[derive(Clone, Debug)]
pub struct CodeImage {
    instrs: Vec<Instruction>,
    function_starts: Vec<u32>,
    function_code_end: u32,
}

impl CodeImage {
    pub fn new(program: &ToyProgram) -> CodeImage {
        CodeImage {
            instrs: program.code_image(),
            function_starts: program.function_starts(),
            function_code_end: program.code_instrs() as u32,
        }
    }

    pub fn execute(&self, input: &[u8], config: ExecConfig) -> Result<Execution> {
        let mut state = MachineState::new(input)?;
        let status = self.run(&mut state, config.step_budget);
        Ok(Execution {
            status,
            output: state.output_log,
            steps: state.step_count,
        })
    }

    fn run(&self, state: &mut MachineState, budget: u64) -> Status {
        if self.function_starts.is_empty() {
            return Status::Fault(Fault::NoEntry);
        }
        let code_len = self.instrs.len() as u32;
        let mut pc: u32 = 0;
        let mut call_stack: Vec<u32> = Vec::new();
        loop {
            if state.step_count >= budget {
                return Status::Timeout;
            }
            let Some(instr) = self.instrs.get(pc as usize) else {
                return Status::Fault(Fault::PcOutOfRange { pc });
            };
            state.step_count += 1;
            let next = pc + 1;
            pc = match instr.op {
                Opcode::Jmp => instr.imm().unwrap_or(0),
                Opcode::Jz if state.value(instr.a) == 0 => instr.imm().unwrap_or(0),
                Opcode::Call => {
                    if call_stack.len() >= MAX_CALL_DEPTH {
                        return Status::Fault(Fault::CallDepth);
                    }
                    let callee = instr.imm().unwrap_or(0);
                    let Some(&start) = self.function_starts.get(callee as usize) else {
                        return Status::Fault(Fault::PcOutOfRange { pc: callee });
                    };
                    call_stack.push(next);
                    start
                }
                Opcode::Ret => match call_stack.pop() {
                    Some(ret) => ret,
                    None => return Status::Halted,
                },
                _ => {
                    if let Err(fault) = state.apply(instr) {
                        return Status::Fault(fault);
                    }
                    // sequential flow may not cross into the displaced section or past the end
                    if next == self.function_code_end || next == code_len {
                        return Status::Fault(Fault::FellOffCode { pc: next });
                    }
                    next
                }
            };
        }
    }
}
