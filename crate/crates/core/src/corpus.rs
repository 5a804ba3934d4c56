//! Synthetic corpus generation and the on-disk corpus layout.
//!
//! A program is malware iff the generator embedded the payload motif: stores
//! into page `0xF000` followed by `SYS` of `0xDEADBEEF`. Labels are therefore
//! checkable by execution. Apart from the motif, the two classes draw their
//! instruction blocks and immediates from distributions whose distance is set
//! by `separation`, and their data strings from pools mixed according to
//! `string_separation`; both lie in `[0, 1]`.
//!
//! Layout: `corpus/{benign,malware}/<id>.tbin` plus `corpus/manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::toyprog::{execute, r, Function, Instruction, Opcode, Operand, Reg, Status, ToyProgram, INPUT_BASE};

pub const PAYLOAD_MAGIC: u32 = 0xDEAD_BEEF;
pub const PAYLOAD_PAGE: u32 = 0xF000;
const SCRATCH_PAGE: u32 = 0x2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_benign: usize,
    pub n_malware: usize,
    pub min_fns: usize,
    pub max_fns: usize,
    pub min_fn_instrs: usize,
    pub max_fn_instrs: usize,
    /// Distance between the classes' code profiles: 0 makes them identical
    /// apart from the payload motif, 1 is maximal.
    pub separation: f64,
    /// Probability weight of a class's own string pool: 0 mixes the pools
    /// evenly, 1 draws only from its own.
    pub string_separation: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_benign: 500,
            n_malware: 500,
            min_fns: 4,
            max_fns: 12,
            min_fn_instrs: 60,
            max_fn_instrs: 160,
            separation: 0.05,
            string_separation: 0.65,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_benign == 0 || self.n_malware == 0 {
            return Err(Error::Config("corpus needs at least one program per class".into()));
        }
        if self.min_fns == 0 || self.min_fns > self.max_fns || self.max_fns > u16::MAX as usize {
            return Err(Error::Config(format!(
                "bad function range {}..={}",
                self.min_fns, self.max_fns
            )));
        }
        if self.min_fn_instrs < 16 || self.min_fn_instrs > self.max_fn_instrs {
            return Err(Error::Config(format!(
                "bad function length range {}..={} (minimum 16)",
                self.min_fn_instrs, self.max_fn_instrs
            )));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("string separation", self.string_separation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Benign,
    Malware,
}

impl Class {
    pub fn label(self) -> u8 {
        match self {
            Class::Benign => 0,
            Class::Malware => 1,
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Class::Benign => "benign",
            Class::Malware => "malware",
        }
    }
}

/// Relative block weights and immediate statistics for one class.
#[derive(Clone, Copy, Debug)]
struct Profile {
    arith: f64,
    zero: f64,
    looped: f64,
    crypt: f64,
    memory: f64,
    output: f64,
    branch: f64,
    big_imm: f64,
    own_strings: f64,
}

const BENIGN_EXTREME: Profile = Profile {
    arith: 4.0,
    zero: 2.0,
    looped: 2.0,
    crypt: 0.0,
    memory: 0.5,
    output: 3.0,
    branch: 2.0,
    big_imm: 0.0,
    own_strings: 1.0,
};

const MALWARE_EXTREME: Profile = Profile {
    arith: 3.0,
    zero: 1.0,
    looped: 1.0,
    crypt: 3.0,
    memory: 3.0,
    output: 0.5,
    branch: 1.0,
    big_imm: 0.5,
    own_strings: 1.0,
};

impl Profile {
    fn for_class(class: Class, cfg: &GenConfig) -> Profile {
        let separation = cfg.separation;
        let mix = |b: f64, m: f64| {
            let mid = (b + m) / 2.0;
            let end = if class == Class::Benign { b } else { m };
            mid + separation * (end - mid)
        };
        let (b, m) = (BENIGN_EXTREME, MALWARE_EXTREME);
        Profile {
            arith: mix(b.arith, m.arith),
            zero: mix(b.zero, m.zero),
            looped: mix(b.looped, m.looped),
            crypt: mix(b.crypt, m.crypt),
            memory: mix(b.memory, m.memory),
            output: mix(b.output, m.output),
            branch: mix(b.branch, m.branch),
            big_imm: mix(b.big_imm, m.big_imm),
            own_strings: 0.5 + cfg.string_separation * 0.5,
        }
    }
}

#[derive(Clone, Copy)]
enum Block {
    Arith,
    Zero,
    Looped,
    Crypt,
    Memory,
    Output,
    Branch,
}

/// Registers the generator writes; r7 is never touched so it can serve as scratch.
const WORK_REGS: [u8; 6] = [0, 1, 2, 3, 4, 5];
const LOOP_REG: u8 = 6;

struct Gen<'a> {
    rng: &'a mut StreamRng,
    profile: Profile,
}

impl Gen<'_> {
    fn reg(&mut self) -> Reg {
        r(*WORK_REGS.choose(self.rng).expect("non-empty"))
    }

    fn imm(&mut self) -> u32 {
        if self.rng.gen_bool(self.profile.big_imm) {
            loop {
                let v: u32 = self.rng.gen();
                if v != PAYLOAD_MAGIC {
                    return v;
                }
            }
        } else {
            self.rng.gen_range(1..=255)
        }
    }

    fn arith(&mut self, out: &mut Vec<Instruction>, count: usize) {
        for _ in 0..count {
            let d = self.reg();
            let op = *[Opcode::Add, Opcode::Sub, Opcode::Xor, Opcode::Mov, Opcode::Add]
                .choose(self.rng)
                .expect("non-empty");
            let instr = if self.rng.gen_bool(0.65) {
                Instruction::ri(op, d, self.imm())
            } else {
                let s = self.reg();
                Instruction::rr(op, d, s)
            };
            out.push(instr);
        }
    }

    fn zero(&mut self, out: &mut Vec<Instruction>) {
        let d = self.reg();
        out.push(match self.rng.gen_range(0..3) {
            0 => Instruction::rr(Opcode::Xor, d, d),
            1 => Instruction::rr(Opcode::Sub, d, d),
            _ => Instruction::ri(Opcode::Mov, d, 0),
        });
        // an independent pair, which reordering can swap
        let a = self.reg();
        let mut b = self.reg();
        while b == a {
            b = self.reg();
        }
        out.push(Instruction::ri(Opcode::Mov, a, self.imm()));
        out.push(Instruction::ri(Opcode::Mov, b, self.imm()));
    }

    /// Loop bodies avoid the counter register; `base` is the local index of `out[0]`.
    fn looped(&mut self, out: &mut Vec<Instruction>, crypt: bool) {
        let count = self.rng.gen_range(2..=6);
        if crypt {
            let addr = SCRATCH_PAGE + 16 * self.rng.gen_range(0..64u32);
            out.push(Instruction::ri(Opcode::Mov, r(5), addr));
        }
        out.push(Instruction::ri(Opcode::Mov, r(LOOP_REG), count));
        let head = out.len() as u32;
        if crypt {
            let key = loop {
                let k: u32 = self.rng.gen();
                if k != PAYLOAD_MAGIC {
                    break k;
                }
            };
            out.push(Instruction::load(r(3), Operand::Reg(r(5))));
            out.push(Instruction::ri(Opcode::Xor, r(3), key));
            out.push(Instruction::store(Operand::Reg(r(5)), r(3)));
            out.push(Instruction::ri(Opcode::Add, r(5), 4));
        } else {
            let n = self.rng.gen_range(2..=4);
            for _ in 0..n {
                let d = r(self.rng.gen_range(0..=4));
                let instr = if self.rng.gen_bool(0.7) {
                    Instruction::ri(Opcode::Add, d, self.imm())
                } else {
                    Instruction::rr(Opcode::Xor, d, r(self.rng.gen_range(0..=4)))
                };
                out.push(instr);
            }
        }
        out.push(Instruction::ri(Opcode::Sub, r(LOOP_REG), 1));
        let exit = out.len() as u32 + 2;
        out.push(Instruction::jz(r(LOOP_REG), exit));
        out.push(Instruction::jmp(head));
    }

    fn memory(&mut self, out: &mut Vec<Instruction>) {
        let addr = SCRATCH_PAGE + 4 * self.rng.gen_range(0..512u32);
        let v = self.reg();
        out.push(Instruction::ri(Opcode::Mov, r(5), addr));
        out.push(Instruction::store(Operand::Reg(r(5)), v));
        let d = r(self.rng.gen_range(1..=4));
        out.push(Instruction::load(d, Operand::Reg(r(5))));
    }

    fn output(&mut self, out: &mut Vec<Instruction>) {
        if self.rng.gen_bool(0.5) {
            out.push(Instruction::sys(self.reg()));
        } else {
            out.push(Instruction::new(
                Opcode::Sys,
                Some(Operand::Imm(self.rng.gen_range(0..1024))),
                None,
            ));
        }
    }

    fn branch(&mut self, out: &mut Vec<Instruction>) {
        let at = INPUT_BASE + 4 * self.rng.gen_range(0..16u32);
        out.push(Instruction::ri(Opcode::Mov, r(4), at));
        out.push(Instruction::load(r(3), Operand::Reg(r(4))));
        let jz_at = out.len();
        out.push(Instruction::jz(r(3), 0));
        let n = self.rng.gen_range(1..=3);
        self.arith(out, n);
        if self.rng.gen_bool(0.5) {
            self.output(out);
        }
        let exit = out.len() as u32;
        out[jz_at] = Instruction::jz(r(3), exit);
    }

    fn block(&mut self) -> Block {
        let p = self.profile;
        let choices = [
            (Block::Arith, p.arith),
            (Block::Zero, p.zero),
            (Block::Looped, p.looped),
            (Block::Crypt, p.crypt),
            (Block::Memory, p.memory),
            (Block::Output, p.output),
            (Block::Branch, p.branch),
        ];
        choices.choose_weighted(self.rng, |c| c.1).expect("positive weights").0
    }

    /// A function body of roughly `target` instructions, without the final
    /// `RET`. Jump targets are local indices.
    fn body(&mut self, target: usize) -> Vec<Instruction> {
        let mut out = Vec::with_capacity(target + 16);
        while out.len() < target {
            match self.block() {
                Block::Arith => {
                    let n = self.rng.gen_range(3..=8);
                    self.arith(&mut out, n)
                }
                Block::Zero => self.zero(&mut out),
                Block::Looped => self.looped(&mut out, false),
                Block::Crypt => self.looped(&mut out, true),
                Block::Memory => self.memory(&mut out),
                Block::Output => self.output(&mut out),
                Block::Branch => self.branch(&mut out),
            }
        }
        out
    }
}

fn payload_motif() -> Vec<Instruction> {
    vec![
        Instruction::ri(Opcode::Mov, r(5), PAYLOAD_PAGE),
        Instruction::store(Operand::Reg(r(5)), r(1)),
        Instruction::ri(Opcode::Mov, r(5), PAYLOAD_PAGE + 4),
        Instruction::store(Operand::Reg(r(5)), r(2)),
        Instruction::ri(Opcode::Mov, r(4), PAYLOAD_MAGIC),
        Instruction::sys(r(4)),
    ]
}

const BENIGN_STRINGS: &[&str] = &[
    "usage: tool [options] <file>",
    "config.ini",
    "/usr/share/doc/tool/README",
    "Copyright (c) The Tool Authors",
    "error: cannot open input file",
    "warning: falling back to defaults",
    "version 1.4.2",
    "items processed",
    "/etc/tool.conf",
    "Press any key to continue",
    "Saving document",
    "Print preview",
    "Check for updates",
    "help and documentation",
];

const MALWARE_STRINGS: &[&str] = &[
    "http://update.example.net/gate.php",
    "c:\\windows\\system32\\svch0st.exe",
    "cmd.exe /c del /q",
    "SOFTWARE\\Microsoft\\Windows\\CurrentVersion\\Run",
    "https://paste.example.org/raw/",
    "keylog.dat",
    "MZ stub loader",
    "c:\\users\\public\\payload.bin",
    "Mozilla/4.0 (compatible; MSIE 6.0)",
    "VirtualAllocEx",
    "WriteProcessMemory",
    "CreateRemoteThread",
];

fn data_section(rng: &mut StreamRng, class: Class, profile: &Profile) -> Vec<u8> {
    let mut data = Vec::new();
    let count = rng.gen_range(3..=10);
    for _ in 0..count {
        let own = rng.gen_bool(profile.own_strings);
        let pool = match (class, own) {
            (Class::Benign, true) | (Class::Malware, false) => BENIGN_STRINGS,
            _ => MALWARE_STRINGS,
        };
        data.extend_from_slice(pool.choose(rng).expect("non-empty").as_bytes());
        if rng.gen_bool(0.5) {
            data.extend_from_slice(format!(" {}", rng.gen_range(0..1000)).as_bytes());
        }
        data.push(0);
        let filler = rng.gen_range(0..24);
        data.extend((0..filler).map(|_| rng.gen_range(0x80..=0xff)));
    }
    data
}

/// Generates one program of the given class from its own seed.
pub fn generate_program(class: Class, seed: u64, cfg: &GenConfig) -> ToyProgram {
    let mut rng = rng::stream(seed, &["program"]);
    let profile = Profile::for_class(class, cfg);
    let n_fns = rng.gen_range(cfg.min_fns..=cfg.max_fns);
    let lengths: Vec<usize> = (0..n_fns)
        .map(|_| rng.gen_range(cfg.min_fn_instrs..=cfg.max_fn_instrs))
        .collect();
    // every function except the entry is called exactly once, from a lower index
    let parents: Vec<usize> = (1..n_fns).map(|j| rng.gen_range(0..j)).collect();
    let payload_fn = rng.gen_range(0..n_fns);

    let mut functions = Vec::with_capacity(n_fns);
    let mut base = 0u32;
    for (f, &len) in lengths.iter().enumerate() {
        let mut gen = Gen { rng: &mut rng, profile };
        let mut body = gen.body(len.saturating_sub(1));
        // calls and the payload go at block boundaries so they run unconditionally
        let mut inserts: Vec<Vec<Instruction>> = parents
            .iter()
            .enumerate()
            .filter(|&(_, &p)| p == f)
            .map(|(j, _)| vec![Instruction::call(j as u32 + 1)])
            .collect();
        if class == Class::Malware && f == payload_fn {
            inserts.push(payload_motif());
        }
        for insert in inserts {
            body = insert_at_boundary(body, insert, &mut rng);
        }
        body.push(Instruction::ret());
        for instr in &mut body {
            if let (Opcode::Jmp | Opcode::Jz, Some(t)) = (instr.op, instr.jump_target()) {
                *instr = if instr.op == Opcode::Jmp {
                    Instruction::jmp(t + base)
                } else {
                    Instruction::jz(reg_of(instr.a), t + base)
                };
            }
        }
        base += body.len() as u32;
        functions.push(Function::new(body));
    }
    let profile = Profile::for_class(class, cfg);
    ToyProgram {
        functions,
        data: data_section(&mut rng, class, &profile),
        displaced: Vec::new(),
    }
}

fn reg_of(op: Option<Operand>) -> Reg {
    match op {
        Some(Operand::Reg(reg)) => reg,
        _ => unreachable!("jz condition is a register"),
    }
}

/// Inserts `insert` at a position no local jump crosses, shifting targets.
fn insert_at_boundary(body: Vec<Instruction>, insert: Vec<Instruction>, rng: &mut StreamRng) -> Vec<Instruction> {
    let spans: Vec<(usize, usize)> = body
        .iter()
        .enumerate()
        .filter_map(|(i, instr)| instr.jump_target().map(|t| (i.min(t as usize), i.max(t as usize))))
        .collect();
    let safe: Vec<usize> = (0..=body.len())
        .filter(|&pos| spans.iter().all(|&(lo, hi)| pos <= lo || pos > hi))
        .collect();
    let pos = *safe.choose(rng).expect("end of body is always safe");
    let shift = insert.len() as u32;
    let mut out = Vec::with_capacity(body.len() + insert.len());
    for (i, instr) in body.into_iter().enumerate() {
        if i == pos {
            out.extend(insert.iter().copied());
        }
        out.push(match (instr.op, instr.jump_target()) {
            (Opcode::Jmp, Some(t)) if t as usize >= pos => Instruction::jmp(t + shift),
            (Opcode::Jz, Some(t)) if t as usize >= pos => Instruction::jz(reg_of(instr.a), t + shift),
            _ => instr,
        });
    }
    if pos == out.len() {
        out.extend(insert);
    }
    out
}

/// Whether execution on empty input emits the payload magic.
pub fn emits_payload(program: &ToyProgram) -> Result<bool> {
    Ok(execute(program, &[])?.output.contains(&PAYLOAD_MAGIC))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class: Class,
    pub label: u8,
    pub seed: u64,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub entries: BTreeMap<u32, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub class: Class,
    pub seed: u64,
    pub program: ToyProgram,
}

impl Sample {
    pub fn label(&self) -> u8 {
        self.class.label()
    }
}

/// Generates a corpus; ids `0..n_benign` are benign, the rest malware.
/// Candidates that fail the label check are regenerated from the next
/// attempt's seed.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let classes =
        std::iter::repeat_n(Class::Benign, cfg.n_benign).chain(std::iter::repeat_n(Class::Malware, cfg.n_malware));
    let jobs: Vec<(u32, Class)> = classes.enumerate().map(|(i, c)| (i as u32, c)).collect();
    use rayon::prelude::*;
    jobs.par_iter()
        .map(|&(id, class)| {
            for attempt in 0..64u32 {
                let seed = rng::sub_seed(cfg.seed, &["corpus", &id.to_string(), &attempt.to_string()]);
                let program = generate_program(class, seed, cfg);
                let run = execute(&program, &[])?;
                let ok =
                    run.status == Status::Halted && run.output.contains(&PAYLOAD_MAGIC) == (class == Class::Malware);
                if ok {
                    return Ok(Sample {
                        id,
                        class,
                        seed,
                        program,
                    });
                }
            }
            Err(Error::Config(format!("could not generate a valid program for id {id}")))
        })
        .collect()
}

pub fn sample_path(root: &Path, class: Class, id: u32) -> PathBuf {
    root.join(class.dir()).join(format!("{id:05}.tbin"))
}

pub fn write_corpus(root: &Path, cfg: &GenConfig, samples: &[Sample]) -> Result<Manifest> {
    for class in [Class::Benign, Class::Malware] {
        let dir = root.join(class.dir());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = BTreeMap::new();
    for s in samples {
        let path = sample_path(root, s.class, s.id);
        std::fs::write(&path, s.program.serialize()?).map_err(|e| Error::io(&path, e))?;
        entries.insert(
            s.id,
            ManifestEntry {
                class: s.class,
                label: s.label(),
                seed: s.seed,
                path: format!("{}/{:05}.tbin", s.class.dir(), s.id),
            },
        );
    }
    let manifest = Manifest { config: *cfg, entries };
    let path = root.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
        path,
        reason: e.to_string(),
    })
}

pub fn read_corpus(root: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for (&id, entry) in &manifest.entries {
        let path = root.join(&entry.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        samples.push(Sample {
            id,
            class: entry.class,
            seed: entry.seed,
            program: ToyProgram::deserialize(&bytes)?,
        });
    }
    Ok((manifest, samples))
}

/// Stratified split: within each class, a seeded shuffle assigns the first
/// half (rounded down) to training. Returns `(train, test)` ids, ascending.
pub fn train_test_split(samples: &[Sample], seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [Class::Benign, Class::Malware] {
        let mut ids: Vec<u32> = samples.iter().filter(|s| s.class == class).map(|s| s.id).collect();
        ids.sort_unstable();
        let mut rng = rng::stream(seed, &["split", class.dir()]);
        ids.shuffle(&mut rng);
        let half = ids.len() / 2;
        train.extend_from_slice(&ids[..half]);
        test.extend_from_slice(&ids[half..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_benign: 6,
            n_malware: 6,
            ..GenConfig::default()
        }
    }

    #[test]
    fn labels_match_execution() {
        let samples = generate_corpus(&small()).unwrap();
        for s in &samples {
            s.program.validate().unwrap();
            assert_eq!(
                emits_payload(&s.program).unwrap(),
                s.class == Class::Malware,
                "id {}",
                s.id
            );
            assert!(s.program.functions.iter().flat_map(|f| &f.body).all(|i| {
                !i.reads().contains(&crate::toyprog::SCRATCH) && !i.writes().contains(&crate::toyprog::SCRATCH)
            }));
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(generate_corpus(&small()).unwrap(), generate_corpus(&small()).unwrap());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let samples = generate_corpus(&small()).unwrap();
        let (train, test) = train_test_split(&samples, 4);
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 6);
        assert!(train.iter().all(|id| !test.contains(id)));
        assert_eq!(train.iter().filter(|&&id| id < 6).count(), 3);
    }
}
