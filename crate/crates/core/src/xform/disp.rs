//! Code displacement: a run of instructions moves to the displaced section,
//! the original location becomes a jump followed by semantic nops, and the
//! displaced copy jumps back.

use super::nops::SemanticNop;
use crate::error::{Error, Result};
use crate::toyprog::{Instruction, ToyProgram, INSTR_WIDTH};

/// Hard cap on size growth relative to the pre-transformation program.
pub const SIZE_GROWTH_CAP: f64 = 0.01;

/// `ceil(1.01 * size)`, computed exactly in integers.
pub fn size_limit(original_len: usize) -> usize {
    original_len + original_len.div_ceil(100)
}

/// Serialized growth of displacing `len` instructions.
pub fn growth(len: usize) -> usize {
    (len + 1) * INSTR_WIDTH
}

/// Bytes to displace per function when spreading `budget` (a fraction of the
/// binary size) evenly across functions.
pub fn bytes_per_function(budget: f64, binary_len: usize, functions: usize) -> f64 {
    if functions == 0 {
        return 0.0;
    }
    budget * binary_len as f64 / functions as f64
}

/// Whether `[start, start + len)` of `function` can be displaced: at least two
/// instructions, inside the body but short of its final instruction (which
/// stays put so every body keeps its terminator), and no jump lands strictly
/// inside it.
pub fn check_range(program: &ToyProgram, function: usize, start: usize, len: usize) -> Result<()> {
    let body = &program
        .functions
        .get(function)
        .ok_or_else(|| Error::NotApplicable(format!("no function {function}")))?
        .body;
    if len < 2 {
        return Err(Error::NotApplicable(
            "displacement needs at least two instructions".into(),
        ));
    }
    if start + len >= body.len() {
        return Err(Error::NotApplicable(format!(
            "range {start}+{len} reaches the end of fn{function} ({} instructions)",
            body.len()
        )));
    }
    let first = program.address_of(function, start);
    let targets = super::jump_targets(program);
    if let Some(t) = targets.iter().find(|&&t| t > first && t < first + len as u32) {
        return Err(Error::NotApplicable(format!("range crosses jump target {t}")));
    }
    Ok(())
}

/// Displaces a range, enforcing the 1% size cap relative to `program`.
pub fn disp(
    program: &ToyProgram,
    function: usize,
    start: usize,
    len: usize,
    nops: &[SemanticNop],
) -> Result<ToyProgram> {
    disp_within(
        program,
        function,
        start,
        len,
        nops,
        size_limit(program.serialized_len()),
    )
}

/// Displaces a range with an explicit ceiling on the resulting serialized size.
pub fn disp_within(
    program: &ToyProgram,
    function: usize,
    start: usize,
    len: usize,
    nops: &[SemanticNop],
    max_size: usize,
) -> Result<ToyProgram> {
    check_range(program, function, start, len)?;
    let slots: usize = nops.iter().map(|n| n.kind.len()).sum();
    if slots != len - 1 {
        return Err(Error::InvalidArgument(format!(
            "semantic nops fill {slots} slots, range needs {}",
            len - 1
        )));
    }
    let size = program.serialized_len() + growth(len);
    if size > max_size {
        return Err(Error::Budget { size, limit: max_size });
    }

    let landing = program.code_len() as u32;
    let resume = program.address_of(function, start) + len as u32;
    let mut out = program.clone();
    let body = &mut out.functions[function].body;
    let moved: Vec<Instruction> = body[start..start + len].to_vec();

    let mut stub = Vec::with_capacity(len);
    stub.push(Instruction::jmp(landing));
    for nop in nops {
        stub.extend(nop.instructions());
    }
    body.splice(start..start + len, stub);

    out.displaced.extend(moved);
    out.displaced.push(Instruction::jmp(resume));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyprog::{execute, r, Function, Opcode};
    use crate::xform::nops::NopKind;

    fn counted(n: usize) -> ToyProgram {
        let mut body: Vec<Instruction> = (0..n - 2)
            .map(|i| Instruction::ri(Opcode::Add, r((i % 6) as u8), i as u32 + 1))
            .collect();
        body.push(Instruction::sys(r(0)));
        body.push(Instruction::ret());
        ToyProgram {
            functions: vec![Function::new(body)],
            ..Default::default()
        }
    }

    fn nop(byte: u8) -> SemanticNop {
        SemanticNop {
            kind: NopKind::Imm,
            byte,
        }
    }

    #[test]
    fn two_instruction_displacement_growth_against_the_cap() {
        let p = counted(100);
        let before = p.serialized_len();
        assert_eq!(before, 32 + 800);
        // growth is exactly the two moved instructions plus the back-jump
        let q = disp_within(&p, 0, 10, 2, &[nop(0)], usize::MAX).unwrap();
        let after = q.serialize().unwrap().len();
        assert_eq!(after - before, 24);
        assert_eq!(execute(&p, &[]).unwrap().output, execute(&q, &[]).unwrap().output);
        // 24 bytes is more than 1% of 832 (limit 841), so the capped form refuses it
        assert_eq!(size_limit(before), 841);
        assert!(matches!(
            disp(&p, 0, 10, 2, &[nop(0)]),
            Err(Error::Budget { size: 856, limit: 841 })
        ));
        // at 400 instructions the same displacement fits under the cap
        let big = counted(400);
        let limit = size_limit(big.serialized_len());
        let moved = disp(&big, 0, 10, 2, &[nop(0)]).unwrap();
        assert!(moved.serialized_len() <= limit);
    }

    #[test]
    fn nop_byte_changes_bytes_not_behaviour() {
        let p = counted(100);
        let a = disp_within(&p, 0, 20, 2, &[nop(0x00)], usize::MAX).unwrap();
        let b = disp_within(&p, 0, 20, 2, &[nop(0xFF)], usize::MAX).unwrap();
        assert_ne!(a.serialize().unwrap(), b.serialize().unwrap());
        assert_eq!(execute(&a, &[9]).unwrap(), execute(&b, &[9]).unwrap());
    }

    #[test]
    fn budget_exceeded() {
        let p = counted(10);
        assert!(matches!(disp(&p, 0, 0, 2, &[nop(1)]), Err(Error::Budget { .. })));
    }

    #[test]
    fn range_crossing_jump_target_is_rejected() {
        let mut p = counted(100);
        p.functions[0].body[50] = Instruction::jz(r(1), 31);
        assert!(matches!(
            disp_within(&p, 0, 30, 3, &[nop(0), nop(0)], usize::MAX),
            Err(Error::NotApplicable(_))
        ));
        // a target on the first instruction of the range is fine
        assert!(disp_within(&p, 0, 31, 3, &[nop(0), nop(0)], usize::MAX).is_ok());
    }

    #[test]
    fn final_instruction_stays_in_place() {
        let p = counted(100);
        assert!(matches!(
            disp_within(&p, 0, 97, 3, &[nop(0), nop(0)], usize::MAX),
            Err(Error::NotApplicable(_))
        ));
        let q = disp_within(&p, 0, 96, 3, &[nop(0), nop(0)], usize::MAX).unwrap();
        q.validate().unwrap();
    }

    #[test]
    fn nop_slots_must_fill_the_range() {
        let p = counted(100);
        assert!(matches!(
            disp_within(&p, 0, 5, 4, &[nop(0)], usize::MAX),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn per_function_allocation() {
        // 5% of a 10_000-byte binary over 8 functions
        assert!((bytes_per_function(0.05, 10_000, 8) - 62.5).abs() < 1e-12);
    }
}
