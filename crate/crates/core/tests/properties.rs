use proptest::prelude::*;

use evasim::corpus::{generate_program, Class, GenConfig};
use evasim::ctph::FuzzyDigest;
use evasim::detect::{DetectorId, Verdict};
use evasim::ensemble::{ensemble_verdict, EnsembleRule};
use evasim::metrics::{levenshtein, levenshtein_within, nld};
use evasim::toyprog::{execute, Instruction, ToyProgram};
use evasim::xform::{
    disp_sites, disp_within, enumerate_sites, equivalents, ipr_reorder, ipr_substitute, NopKind, SemanticNop,
    TransformKind,
};

fn small() -> GenConfig {
    GenConfig {
        min_fns: 2,
        max_fns: 4,
        min_fn_instrs: 20,
        max_fn_instrs: 40,
        ..GenConfig::default()
    }
}

fn program(malware: bool, seed: u64) -> ToyProgram {
    let class = if malware { Class::Malware } else { Class::Benign };
    generate_program(class, seed, &small())
}

fn same(a: &ToyProgram, b: &ToyProgram, input: &[u8]) -> bool {
    execute(a, input).unwrap().same_behaviour(&execute(b, input).unwrap())
}

fn dp(a: &[u8], b: &[u8]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn serialization_round_trips(malware: bool, seed: u64) {
        let p = program(malware, seed);
        let bytes = p.serialize().unwrap();
        prop_assert_eq!(bytes.len(), p.serialized_len());
        let q = ToyProgram::deserialize(&bytes).unwrap();
        prop_assert_eq!(&q, &p);
        prop_assert_eq!(q.serialize().unwrap(), bytes);
        for i in p.code_image() {
            prop_assert_eq!(Instruction::decode(&i.encode()).unwrap(), i);
        }
    }

    #[test]
    fn truncated_binaries_are_rejected(seed: u64, cut in 1usize..64) {
        let bytes = program(false, seed).serialize().unwrap();
        prop_assert!(ToyProgram::deserialize(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn substitution_preserves_behaviour(malware: bool, seed: u64, pick: prop::sample::Index, input in prop::collection::vec(any::<u8>(), 0..64)) {
        let p = program(malware, seed);
        let sites = enumerate_sites(&p, TransformKind::IprSubstitute);
        prop_assume!(!sites.is_empty());
        let s = sites[pick.index(sites.len())];
        let n = equivalents(&p.functions[s.function].body[s.index]).len();
        for choice in 0..n {
            let q = ipr_substitute(&p, s.function, s.index, choice).unwrap();
            prop_assert_eq!(q.serialized_len(), p.serialized_len());
            prop_assert!(same(&p, &q, &input));
        }
    }

    #[test]
    fn reordering_preserves_behaviour(malware: bool, seed: u64, pick: prop::sample::Index, input in prop::collection::vec(any::<u8>(), 0..64)) {
        let p = program(malware, seed);
        let sites = enumerate_sites(&p, TransformKind::IprReorder);
        prop_assume!(!sites.is_empty());
        let s = sites[pick.index(sites.len())];
        let q = ipr_reorder(&p, s.function, s.index).unwrap();
        prop_assert!(same(&p, &q, &input));
        prop_assert_eq!(ipr_reorder(&q, s.function, s.index).unwrap(), p);
    }

    #[test]
    fn displacement_preserves_behaviour(
        malware: bool,
        seed: u64,
        len in 2usize..6,
        pick: prop::sample::Index,
        byte: u8,
        input in prop::collection::vec(any::<u8>(), 0..64),
    ) {
        let p = program(malware, seed);
        let sites = disp_sites(&p, len);
        prop_assume!(!sites.is_empty());
        let s = sites[pick.index(sites.len())];
        let kinds = [NopKind::Imm, NopKind::XorPair, NopKind::AddSub, NopKind::ScratchMov];
        let mut nops = Vec::new();
        let mut left = len - 1;
        let mut k = byte as usize;
        while left > 0 {
            let kind = kinds[k % 4];
            k /= 2;
            if kind.len() <= left {
                nops.push(SemanticNop { kind, byte });
                left -= kind.len();
            } else {
                nops.push(SemanticNop { kind: NopKind::Imm, byte });
                left -= 1;
            }
        }
        let q = disp_within(&p, s.function, s.index, len, &nops, usize::MAX).unwrap();
        prop_assert_eq!(q.serialized_len(), p.serialized_len() + 8 * (len + 1));
        prop_assert!(q.validate().is_ok());
        prop_assert!(same(&p, &q, &input));
        let back = ToyProgram::deserialize(&q.serialize().unwrap()).unwrap();
        prop_assert_eq!(back, q);
    }

    #[test]
    fn levenshtein_matches_textbook(a in prop::collection::vec(0u8..4, 0..40), b in prop::collection::vec(0u8..4, 0..40)) {
        let d = dp(&a, &b);
        prop_assert_eq!(levenshtein(&a, &b), d);
        prop_assert_eq!(levenshtein(&b, &a), d);
        prop_assert_eq!(levenshtein_within(&a, &b, d), Some(d));
        if d > 0 {
            prop_assert_eq!(levenshtein_within(&a, &b, d - 1), None);
        }
        let n = nld(&a, &b);
        let m = a.len().max(b.len());
        prop_assert_eq!(n, if m == 0 { 0.0 } else { d as f64 / m as f64 });
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert_eq!(nld(&a, &a), 0.0);
    }

    #[test]
    fn digest_text_round_trips(bytes in prop::collection::vec(any::<u8>(), 0..3000)) {
        let d = FuzzyDigest::of(&bytes);
        let text = d.to_string();
        let back: FuzzyDigest = text.parse().unwrap();
        prop_assert_eq!(&back, &d);
        prop_assert_eq!(back.to_string(), text);
        prop_assert!(d.sig1.len() <= 64 && d.sig2.len() <= 64);
        prop_assert_eq!(d.block_size % 3, 0);
    }

    #[test]
    fn digest_distance_is_symmetric(a in prop::collection::vec(any::<u8>(), 0..2000), b in prop::collection::vec(any::<u8>(), 0..2000)) {
        let (x, y) = (FuzzyDigest::of(&a), FuzzyDigest::of(&b));
        let d = x.distance(&y);
        prop_assert_eq!(d, y.distance(&x));
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((x.similarity(&y) + d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_matches_vote_count(labels in prop::array::uniform3(0u8..2), conf in prop::array::uniform3(0.5f64..=1.0)) {
        let verdicts: Vec<Verdict> = DetectorId::ALL
            .into_iter()
            .zip(labels.iter().zip(conf))
            .map(|(detector, (&label, confidence))| Verdict { label, confidence, detector })
            .collect();
        let votes = labels.iter().filter(|&&l| l == 1).count();
        let mut previous = 1u8;
        for m in 1..=3u8 {
            let v = ensemble_verdict(&verdicts, EnsembleRule::new(m).unwrap()).unwrap();
            prop_assert_eq!(v.label, u8::from(votes >= m as usize));
            // a stricter rule never flags what a looser one passed
            prop_assert!(v.label <= previous);
            previous = v.label;
            let mean = verdicts.iter().map(|x| x.confidence_in(v.label)).sum::<f64>() / 3.0;
            prop_assert!((v.confidence - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn ensemble_rules_outside_one_to_three_are_rejected() {
    assert!(EnsembleRule::new(0).is_err());
    assert!(EnsembleRule::new(4).is_err());
    assert_eq!("majority".parse::<EnsembleRule>().unwrap(), EnsembleRule::MAJORITY);
}
