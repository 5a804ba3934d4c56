//! In-place, length-preserving rewrites: equivalent-instruction substitution
//! and reordering of adjacent independent instructions.

use crate::error::{Error, Result};
use crate::toyprog::{Instruction, Opcode, Operand, ToyProgram};

/// Functionally equivalent replacements for `instr`, in a fixed order. The
/// index into this list is the substitution "choice".
pub fn equivalents(instr: &Instruction) -> Vec<Instruction> {
    use Operand::{Imm, Reg};
    match (instr.op, instr.a, instr.b) {
        (Opcode::Add, Some(Reg(d)), Some(Imm(c))) => vec![Instruction::ri(Opcode::Sub, d, c.wrapping_neg())],
        (Opcode::Sub, Some(Reg(d)), Some(Imm(c))) => vec![Instruction::ri(Opcode::Add, d, c.wrapping_neg())],
        // zeroing idioms
        (Opcode::Xor, Some(Reg(d)), Some(Reg(s))) if d == s => {
            vec![Instruction::rr(Opcode::Sub, d, d), Instruction::ri(Opcode::Mov, d, 0)]
        }
        (Opcode::Sub, Some(Reg(d)), Some(Reg(s))) if d == s => {
            vec![Instruction::rr(Opcode::Xor, d, d), Instruction::ri(Opcode::Mov, d, 0)]
        }
        (Opcode::Mov, Some(Reg(d)), Some(Imm(0))) => {
            vec![Instruction::rr(Opcode::Xor, d, d), Instruction::rr(Opcode::Sub, d, d)]
        }
        // identity operations and their nop forms
        (Opcode::Xor, Some(Reg(d)), Some(Imm(0))) => vec![
            Instruction::new(Opcode::Nop, Some(Reg(d)), None),
            Instruction::rr(Opcode::Mov, d, d),
        ],
        (Opcode::Mov, Some(Reg(d)), Some(Reg(s))) if d == s => vec![
            Instruction::new(Opcode::Nop, Some(Reg(d)), None),
            Instruction::ri(Opcode::Xor, d, 0),
        ],
        (Opcode::Nop, Some(Reg(d)), None) => {
            vec![Instruction::ri(Opcode::Xor, d, 0), Instruction::rr(Opcode::Mov, d, d)]
        }
        _ => Vec::new(),
    }
}

pub fn ipr_substitute(program: &ToyProgram, function: usize, index: usize, choice: usize) -> Result<ToyProgram> {
    let instr = program
        .functions
        .get(function)
        .and_then(|f| f.body.get(index))
        .ok_or_else(|| Error::NotApplicable(format!("no instruction at fn{function}[{index}]")))?;
    let replacement = *equivalents(instr)
        .get(choice)
        .ok_or_else(|| Error::NotApplicable(format!("no equivalent #{choice} for `{instr}`")))?;
    let mut out = program.clone();
    out.functions[function].body[index] = replacement;
    Ok(out)
}

/// Two adjacent instructions may swap when neither touches memory, control
/// flow or output, and their register read/write sets do not conflict.
pub fn independent(first: &Instruction, second: &Instruction) -> bool {
    let inert = |i: &Instruction| !i.touches_memory() && !i.op.is_control() && i.op != Opcode::Sys;
    if !inert(first) || !inert(second) {
        return false;
    }
    let (r1, w1, r2, w2) = (first.reads(), first.writes(), second.reads(), second.writes());
    let clash = |xs: &[_], ys: &[_]| xs.iter().any(|x| ys.contains(x));
    !(clash(&w1, &r2) || clash(&w1, &w2) || clash(&r1, &w2))
}

/// Swaps `body[index]` and `body[index + 1]`.
pub fn ipr_reorder(program: &ToyProgram, function: usize, index: usize) -> Result<ToyProgram> {
    let body = program
        .functions
        .get(function)
        .map(|f| &f.body)
        .ok_or_else(|| Error::NotApplicable(format!("no function {function}")))?;
    if index + 1 >= body.len() {
        return Err(Error::NotApplicable(format!(
            "no instruction pair at fn{function}[{index}]"
        )));
    }
    if !independent(&body[index], &body[index + 1]) {
        return Err(Error::NotApplicable(format!(
            "dependency between `{}` and `{}`",
            body[index],
            body[index + 1]
        )));
    }
    // A jump landing on the second instruction would skip the first one after the swap.
    let second = program.address_of(function, index + 1);
    if super::jump_targets(program).contains(&second) {
        return Err(Error::NotApplicable(format!("address {second} is a jump target")));
    }
    let mut out = program.clone();
    out.functions[function].body.swap(index, index + 1);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyprog::{r, Function};

    fn single(body: Vec<Instruction>) -> ToyProgram {
        ToyProgram {
            functions: vec![Function::new(body)],
            ..Default::default()
        }
    }

    #[test]
    fn add_becomes_sub_of_negation() {
        let p = single(vec![Instruction::ri(Opcode::Add, r(1), 0x10), Instruction::ret()]);
        let q = ipr_substitute(&p, 0, 0, 0).unwrap();
        assert_eq!(q.functions[0].body[0], Instruction::ri(Opcode::Sub, r(1), 0xFFFF_FFF0));
        assert_eq!(q.serialize().unwrap().len(), p.serialize().unwrap().len());
    }

    #[test]
    fn ret_has_no_equivalent() {
        let p = single(vec![Instruction::ret()]);
        assert!(matches!(ipr_substitute(&p, 0, 0, 0), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn every_equivalent_matches_on_random_states() {
        use crate::toyprog::MachineState;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let samples = [
            Instruction::ri(Opcode::Add, r(2), 0x10),
            Instruction::ri(Opcode::Sub, r(3), 0xFFFF_0000),
            Instruction::rr(Opcode::Xor, r(4), r(4)),
            Instruction::rr(Opcode::Sub, r(4), r(4)),
            Instruction::ri(Opcode::Mov, r(5), 0),
            Instruction::ri(Opcode::Xor, r(1), 0),
            Instruction::rr(Opcode::Mov, r(6), r(6)),
            Instruction::new(Opcode::Nop, Some(Operand::Reg(r(2))), None),
        ];
        for instr in samples {
            let alts = equivalents(&instr);
            assert!(!alts.is_empty(), "{instr}");
            for alt in alts {
                for _ in 0..200 {
                    let mut s1 = MachineState::new(&[]).unwrap();
                    s1.registers = rng.gen();
                    let mut s2 = s1.clone();
                    s1.apply(&instr).unwrap();
                    s2.apply(&alt).unwrap();
                    assert_eq!(s1, s2, "{instr} vs {alt}");
                }
            }
        }
    }

    #[test]
    fn reorder_disjoint_movs() {
        let p = single(vec![
            Instruction::ri(Opcode::Mov, r(1), 1),
            Instruction::ri(Opcode::Mov, r(2), 2),
            Instruction::ret(),
        ]);
        let q = ipr_reorder(&p, 0, 0).unwrap();
        assert_eq!(q.functions[0].body[0], Instruction::ri(Opcode::Mov, r(2), 2));
        assert_eq!(q.functions[0].body[1], Instruction::ri(Opcode::Mov, r(1), 1));
    }

    #[test]
    fn reorder_rejects_dependency() {
        let p = single(vec![
            Instruction::ri(Opcode::Mov, r(1), 1),
            Instruction::ri(Opcode::Add, r(1), 1),
            Instruction::ret(),
        ]);
        assert!(matches!(ipr_reorder(&p, 0, 0), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn reorder_rejects_jump_target_on_second() {
        let p = single(vec![
            Instruction::ri(Opcode::Mov, r(1), 1),
            Instruction::ri(Opcode::Mov, r(2), 2),
            Instruction::jz(r(3), 1),
            Instruction::ret(),
        ]);
        assert!(matches!(ipr_reorder(&p, 0, 0), Err(Error::NotApplicable(_))));
    }
}
