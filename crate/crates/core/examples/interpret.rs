//! Builds a tiny program by hand, serializes it, and runs it on two inputs.

use evasim::toyprog::{execute, r, Function, Instruction, Opcode, Operand, ToyProgram, INPUT_BASE};

fn main() -> evasim::Result<()> {
    // r0 holds the input length on entry; print it, then the first input word plus one
    let body = vec![
        Instruction::sys(r(0)),
        Instruction::load(r(1), Operand::Imm(INPUT_BASE)),
        Instruction::ri(Opcode::Add, r(1), 1),
        Instruction::sys(r(1)),
        Instruction::ret(),
    ];
    let program = ToyProgram {
        functions: vec![Function::new(body)],
        data: b"hello from the data section".to_vec(),
        displaced: Vec::new(),
    };
    let bytes = program.serialize()?;
    println!("{} bytes serialized\n{}", bytes.len(), program.disassemble());

    let back = ToyProgram::deserialize(&bytes)?;
    for input in [&b"abcd"[..], &[0xff, 0, 0, 0, 9]] {
        let run = execute(&back, input)?;
        println!(
            "input {input:?}: {:?}, output {:?}, {} steps",
            run.status, run.output, run.steps
        );
    }
    Ok(())
}
