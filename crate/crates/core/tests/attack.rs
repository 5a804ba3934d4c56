mod common;

use std::cell::Cell;

use evasim::attack::{
    attack_blackbox, attack_ctph_chunks, attack_whitebox, chunk_windows, optimize_nop_byte, AttackConfig, Mode,
    NopObjective, Oracle, Outcome, Rejection, Target,
};
use evasim::ctph::FuzzyDigest;
use evasim::detect::{DetectorId, RawByteScorer};
use evasim::featx::embedding_for_gradient;
use evasim::toyprog::{strip_header, ToyProgram};
use evasim::xform::{disp, disp_sites, nop_at, replay, size_limit, NopKind, SemanticNop, Site};
use evasim::Error;

use common::fixture;

fn embed(p: &ToyProgram) -> Vec<f64> {
    embedding_for_gradient(strip_header(&p.serialize().unwrap()).unwrap())
}

/// A program with one displacement whose first stub nop is an `AddSub` at byte 9.
fn with_nop(program: &ToyProgram) -> (ToyProgram, Site) {
    let site = disp_sites(program, 3)[0];
    let nops = [SemanticNop {
        kind: NopKind::AddSub,
        byte: 9,
    }];
    let out = disp(program, site.function, site.index, 3, &nops).unwrap();
    (
        out,
        Site {
            function: site.function,
            index: site.index + 1,
        },
    )
}

#[test]
fn chunk_window_arithmetic() {
    assert_eq!(chunk_windows(192), (3, 64));
    assert_eq!(chunk_windows(193), (6, 33));
    assert_eq!(chunk_windows(1), (3, 1));
}

#[test]
fn whitebox_rejects_non_differentiable_targets() {
    for target in [DetectorId::Knn, DetectorId::Ctph] {
        let mut cfg = AttackConfig::default_for(target, 1);
        cfg.mode = Mode::Whitebox;
        cfg.family = evasim::attack::Family::Disp;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{target}");
    }
    let mut cfg = AttackConfig::default_for(DetectorId::Rawbyte, 1);
    cfg.mode = Mode::Chunks;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn zero_weights_exhaust_the_whitebox_attack() {
    let fx = fixture(3);
    let s = fx.test_malware()[0];
    let scorer = RawByteScorer::with_weights(vec![0.0; 256], 5.0).unwrap();
    let mut cfg = AttackConfig::default_for(DetectorId::Rawbyte, 1);
    cfg.max_iterations = 2;
    let t = attack_whitebox(&s.program, s.id, 1, &scorer, &cfg).unwrap();
    assert_eq!(t.summary.outcome, Outcome::Exhausted);
    assert_eq!(t.summary.accepted, 0);
    assert!(t.summary.proposed > 0);
    assert!(t.steps.iter().all(|s| s.rejection == Some(Rejection::NotImproving)));
}

#[test]
fn already_misclassified_is_evaded_without_steps() {
    let fx = fixture(3);
    let s = fx.test_malware()[0];
    let scorer = RawByteScorer::with_weights(vec![0.0; 256], -10.0).unwrap();
    let cfg = AttackConfig::default_for(DetectorId::Rawbyte, 1);
    let t = attack_whitebox(&s.program, s.id, 1, &scorer, &cfg).unwrap();
    assert_eq!(t.summary.outcome, Outcome::Evaded);
    assert!(t.steps.is_empty());
    assert_eq!(t.summary.final_size, t.summary.original_size);
    assert_eq!(t.summary.final_nld, 0.0);
}

#[test]
fn gradient_nop_byte_matches_full_recomputation() {
    let fx = fixture(4);
    let (p, site) = with_nop(&fx.largest().program);
    assert_eq!(nop_at(&p, site).unwrap().byte, 9);
    let g: Vec<f64> = (0..256).map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.01).collect();
    let choice = optimize_nop_byte(&p, site, NopObjective::Gradient(&g)).unwrap();
    assert_eq!(choice.evaluations, 256);

    // oracle: re-embed the whole program for every byte value
    let base = embed(&p);
    let gain = |v: u8| -> f64 {
        let x = embed(&evasim::xform::set_nop_byte(&p, site, v).unwrap());
        x.iter().zip(&base).zip(&g).map(|((a, b), gi)| (a - b) * gi).sum()
    };
    let gains: Vec<f64> = (0..=255u8).map(gain).collect();
    let best = gains.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = gains.iter().position(|&x| (x - best).abs() < 1e-15).unwrap();
    assert_eq!(choice.byte as usize, first);
    assert!((choice.value - best).abs() < 1e-12);
}

#[test]
fn flat_objectives_pick_byte_zero() {
    let fx = fixture(4);
    let (p, site) = with_nop(&fx.largest().program);
    let g = vec![0.25; 256];
    let choice = optimize_nop_byte(&p, site, NopObjective::Gradient(&g)).unwrap();
    assert_eq!((choice.byte, choice.value), (0, 0.0));

    let calls = Cell::new(0usize);
    let flat = |_: &ToyProgram| -> evasim::Result<f64> {
        calls.set(calls.get() + 1);
        Ok(0.5)
    };
    let choice = optimize_nop_byte(&p, site, NopObjective::Blackbox(&flat)).unwrap();
    assert_eq!(choice.byte, 0);
    assert_eq!(choice.evaluations, 256);
    assert_eq!(calls.get(), 256);
}

#[test]
fn blackbox_nop_byte_minimizes() {
    let fx = fixture(4);
    let (p, site) = with_nop(&fx.largest().program);
    let score = |q: &ToyProgram| -> evasim::Result<f64> { Ok((f64::from(nop_at(q, site).unwrap().byte) - 77.0).abs()) };
    let choice = optimize_nop_byte(&p, site, NopObjective::Blackbox(&score)).unwrap();
    assert_eq!((choice.byte, choice.value), (77, 0.0));
    let bad = Site {
        function: site.function,
        index: 0,
    };
    if nop_at(&p, bad).is_none() {
        assert!(optimize_nop_byte(&p, bad, NopObjective::Gradient(&[0.0; 256])).is_err());
    }
}

fn check_trace(original: &ToyProgram, t: &evasim::attack::AttackTrace) -> ToyProgram {
    let out = t.replay(original).unwrap();
    let bytes = out.serialize().unwrap();
    assert_eq!(bytes.len(), t.summary.final_size);
    assert!(bytes.len() <= size_limit(t.summary.original_size));
    assert_eq!(
        FuzzyDigest::of(strip_header(&bytes).unwrap()).to_string(),
        t.summary.final_digest
    );
    // fresh inputs, not the ones the attack used
    assert!(Oracle::new(original, 0xfeed).unwrap().check(&out));
    assert_eq!(t.summary.accepted, t.steps.iter().filter(|s| s.accepted).count());
    out
}

#[test]
fn whitebox_accepts_only_loss_increasing_steps() {
    let fx = fixture(5);
    let cfg = AttackConfig::default_for(DetectorId::Rawbyte, 2);
    let mut accepted = 0;
    let mut agree = 0;
    for s in fx.test_malware() {
        let t = attack_whitebox(&s.program, s.id, 1, &fx.rawbyte, &cfg).unwrap();
        check_trace(&s.program, &t);
        accepted += t.summary.accepted;
        for step in t.steps.iter().filter(|s| s.accepted) {
            assert!(step.first_order.unwrap() > 0.0);
            agree += usize::from(step.after > step.before);
        }
        assert_eq!(
            t.summary.outcome == Outcome::Evaded,
            fx.rawbyte
                .classify_embedding(&embed(&t.replay(&s.program).unwrap()))
                .label
                != 1
        );
    }
    assert!(accepted > 0);
    // first-order acceptance versus a direct loss re-evaluation
    assert!(agree as f64 >= 0.95 * accepted as f64, "{agree}/{accepted}");
}

#[test]
fn blackbox_traces_are_monotone_and_replayable() {
    let fx = fixture(6);
    let mut accepted = [0; 2];
    for (target, id) in [
        (Target::Knn(&fx.knn), DetectorId::Knn),
        (Target::Ctph(&fx.ctph), DetectorId::Ctph),
    ] {
        let cfg = AttackConfig::default_for(id, 7);
        for s in fx.test_malware().into_iter().take(3) {
            let t = attack_blackbox(&s.program, s.id, 1, target, &cfg).unwrap();
            let out = check_trace(&s.program, &t);
            accepted[(id == DetectorId::Ctph) as usize] += t.summary.accepted;
            let mut last = t.summary.initial_objective;
            for step in t.steps.iter().filter(|s| s.accepted) {
                assert!(step.after < step.before);
                assert!(step.before <= last + 1e-12);
                last = step.after;
            }
            assert!(t.summary.final_objective <= t.summary.initial_objective);
            let fin = target.objective(&out.serialize().unwrap(), 1).unwrap();
            assert!((fin - t.summary.final_objective).abs() < 1e-12);
            assert_eq!(
                t.summary.outcome == Outcome::Evaded,
                target.evaded(&out.serialize().unwrap(), 1).unwrap()
            );
        }
    }
    assert!(accepted.iter().all(|&a| a > 0), "{accepted:?}");
}

#[test]
fn rawbyte_blackbox_acceptance_is_a_loss_increase() {
    let fx = fixture(5);
    let mut cfg = AttackConfig::default_for(DetectorId::Rawbyte, 2);
    cfg.mode = Mode::Blackbox;
    cfg.max_iterations = 5;
    let mut steps = 0;
    for s in fx.test_malware().into_iter().take(3) {
        let t = attack_blackbox(&s.program, s.id, 1, Target::Rawbyte(&fx.rawbyte), &cfg).unwrap();
        let records = t.accepted_records();
        let limit = size_limit(s.program.serialized_len());
        let losses: Vec<f64> = (0..=records.len())
            .map(|k| {
                fx.rawbyte
                    .loss(&embed(&replay(&s.program, &records[..k], limit).unwrap()), 1)
            })
            .collect();
        steps += records.len();
        assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
        for step in &t.steps {
            if step.rejection == Some(Rejection::NotImproving) {
                assert!(step.after >= step.before);
            }
        }
    }
    assert!(steps > 0);
}

#[test]
fn attacks_are_deterministic() {
    let fx = fixture(8);
    let s = fx.test_malware()[0];
    let cfg = AttackConfig::default_for(DetectorId::Knn, 11);
    let a = attack_blackbox(&s.program, s.id, 1, Target::Knn(&fx.knn), &cfg).unwrap();
    let b = attack_blackbox(&s.program, s.id, 1, Target::Knn(&fx.knn), &cfg).unwrap();
    assert_eq!(a, b);
    let mut cfg = AttackConfig::default_for(DetectorId::Ctph, 11);
    cfg.mode = Mode::Chunks;
    let a = attack_ctph_chunks(&s.program, s.id, 1, &fx.ctph, &cfg).unwrap();
    let b = attack_ctph_chunks(&s.program, s.id, 1, &fx.ctph, &cfg).unwrap();
    assert_eq!(a, b);
    let c = attack_ctph_chunks(&s.program, s.id, 1, &fx.ctph, &AttackConfig { seed: 12, ..cfg }).unwrap();
    check_trace(&s.program, &c);
}

#[test]
fn chunk_attack_reports_window_coverage() {
    let fx = fixture(9);
    let mut cfg = AttackConfig::default_for(DetectorId::Ctph, 1);
    cfg.mode = Mode::Chunks;
    for s in fx.test_malware() {
        let t = attack_ctph_chunks(&s.program, s.id, 1, &fx.ctph, &cfg).unwrap();
        check_trace(&s.program, &t);
        let stats = t.summary.chunks.clone().unwrap();
        let n = s.program.serialized_len() - evasim::toyprog::HEADER_LEN;
        assert_eq!((stats.block_size, stats.windows), chunk_windows(n));
        assert!(stats.covered + stats.uncovered_code_windows <= stats.windows);
        assert!(t.summary.accepted >= stats.covered);
    }
}

#[test]
fn blackbox_rejects_mismatched_target() {
    let fx = fixture(3);
    let s = fx.test_malware()[0];
    let cfg = AttackConfig::default_for(DetectorId::Knn, 1);
    let err = attack_blackbox(&s.program, s.id, 1, Target::Ctph(&fx.ctph), &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = attack_whitebox(&s.program, s.id, 1, &fx.rawbyte, &cfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}
