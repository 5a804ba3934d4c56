//! Applies each transformation family to a generated program and checks the
//! result against the 16-input behaviour oracle.

use evasim::attack::Oracle;
use evasim::corpus::{generate_program, Class, GenConfig};
use evasim::metrics::nld;
use evasim::xform::{
    disp_sites, enumerate_sites, growth, size_limit, NopKind, SemanticNop, TransformKind, TransformRecord,
};

fn main() -> evasim::Result<()> {
    let program = generate_program(Class::Malware, 42, &GenConfig::default());
    let original = program.serialize()?;
    let oracle = Oracle::new(&program, 1)?;
    println!(
        "program: {} functions, {} bytes, cap {} bytes",
        program.functions.len(),
        original.len(),
        size_limit(original.len())
    );

    let mut records = Vec::new();
    if let Some(&site) = enumerate_sites(&program, TransformKind::IprSubstitute).first() {
        records.push(TransformRecord::substitute(site, 0));
    }
    if let Some(&site) = enumerate_sites(&program, TransformKind::IprReorder).first() {
        records.push(TransformRecord::reorder(site));
    }
    // the largest displacement that still fits under the 1% cap
    let len = (2..)
        .take_while(|&l| original.len() + growth(l) <= size_limit(original.len()))
        .last();
    if let Some(site) = len.and_then(|l| disp_sites(&program, l).first().map(|s| (*s, l))) {
        let (s, l) = site;
        let nops = vec![
            SemanticNop {
                kind: NopKind::Imm,
                byte: 0x90
            };
            l - 1
        ];
        records.push(TransformRecord::displace(s.function, s.index, l, nops));
    }

    for rec in records {
        let out = rec.apply(&program)?;
        let bytes = out.serialize()?;
        println!(
            "{:?} at fn{}[{}]: {} bytes, NLD {:.5}, oracle {}",
            rec.kind,
            rec.function,
            rec.start,
            bytes.len(),
            nld(&original, &bytes),
            if oracle.check(&out) { "agrees" } else { "DIFFERS" }
        );
    }
    Ok(())
}
