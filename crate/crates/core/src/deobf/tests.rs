use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::TermCounts;
use crate::mir::{concrete_run, enumerate_predicates, parse_asm, reachable_blocks};
use crate::obfuscator::{apply_recipe, generate_program, inject_opaque, EnvDomain, GenConfig, InjectionLog, Label, OpaqueKind, Recipe};

const PARITY: &str = "\
fn main(2 args)
entry:
    add r2, r0, 1
    mul r2, r2, r0
    and r2, r2, 1
    cmp r2, 0
    jcc eq live dead
dead:
    movimm r3, 61440
    store [r3+0], r0
    movimm r0, 99
    ret r0
live:
    add r0, r0, r1
    ret r0
";

const EQ_FIVE: &str = "\
fn main(1 args)
entry:
    cmp r0, 5
    jcc eq yes no
yes:
    ret r0
no:
    ret r0
";

const SEVEN_SQUARE: &str = "\
fn main(2 args)
entry:
    mul r2, r0, r0
    mul r2, r2, 7
    sub r2, r2, 1
    mul r3, r1, r1
    cmp r2, r3
    jcc eq hit miss
hit:
    movimm r0, 1
    ret r0
miss:
    movimm r0, 0
    ret r0
";

const THREE_BLOCKS: &str = "\
fn main(2 args)
entry:
    add r2, r0, r1
    cmp r2, 10
    jcc ult small big
small:
    mul r2, r2, r0
    jmp done
big:
    xor r2, r2, r1
    jmp done
done:
    ret r2
";

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn only_predicate(p: &crate::mir::Program) -> crate::mir::PredicateId {
    let ids = enumerate_predicates(p.entry_function());
    assert_eq!(ids.len(), 1);
    ids[0].clone()
}

/// A generated program with exactly `normals` conditional jumps, obfuscated
/// with four injected predicates.
fn corpus_program(normals: usize) -> (crate::mir::Program, crate::mir::Program, InjectionLog) {
    let recipe: Recipe = "AddOpaque(Arithmetic,2),AddOpaque(MBA,2)".parse().unwrap();
    for seed in 0..200 {
        let p = generate_program(&mut rng(seed), &GenConfig::default());
        if p.predicate_count() != normals {
            continue;
        }
        if let Ok((q, log)) = apply_recipe(&p, &recipe, &EnvDomain::standard(), &mut rng(seed + 1000)) {
            return (p, q, log);
        }
    }
    panic!("no generated program with {normals} predicates");
}

fn truth_verdicts(log: &InjectionLog) -> Verdicts {
    log.opaque().map(|(id, e)| (id.clone(), e.label == Label::OpTrue)).collect()
}

#[test]
fn parity_is_always_true() {
    let p = parse_asm(PARITY).unwrap();
    let v = oracle(&p, &only_predicate(&p), &EnvDomain::standard(), &OracleConfig::default()).unwrap();
    assert_eq!(v.verdict, Verdict::AlwaysTrue);
    assert_eq!(v.runs, 256 * 256 + 10_000);
    assert_eq!(v.hits, [v.runs as u64, 0]);
    assert!(v.fallthrough.is_none());
}

#[test]
fn equality_is_two_way_with_witnesses() {
    let p = parse_asm(EQ_FIVE).unwrap();
    let v = oracle(&p, &only_predicate(&p), &EnvDomain::standard(), &OracleConfig::default()).unwrap();
    assert_eq!(v.verdict, Verdict::TwoWay);
    assert_eq!(v.taken.unwrap().inputs, vec![5]);
    assert_eq!(v.fallthrough.unwrap().inputs, vec![0]);
}

#[test]
fn seven_square_is_always_false() {
    // No byte pair satisfies 7x^2 - 1 == y^2 in 64-bit arithmetic.
    for x in 0u64..256 {
        for y in 0u64..256 {
            assert_ne!((7 * x * x).wrapping_sub(1), y * y);
        }
    }
    let p = parse_asm(SEVEN_SQUARE).unwrap();
    let v = oracle(&p, &only_predicate(&p), &EnvDomain::standard(), &OracleConfig::default()).unwrap();
    assert_eq!(v.verdict, Verdict::AlwaysFalse);
    assert!(v.taken.is_none());
}

#[test]
fn oracle_errors() {
    let p = parse_asm(THREE_BLOCKS).unwrap();
    let missing = crate::mir::PredicateId { function: "main".into(), block: "nowhere".into(), ordinal: 0 };
    let env = EnvDomain::standard();
    let cfg = OracleConfig { random_trials: 10, ..OracleConfig::default() };
    assert_eq!(oracle(&p, &missing, &env, &cfg), Err(OracleError::UnknownPredicate(missing)));

    let unreached = parse_asm(
        "fn main(1 args)\nentry:\n    jmp out\nnever:\n    cmp r0, 1\n    jcc eq out out\nout:\n    ret r0\n",
    )
    .unwrap();
    let id = only_predicate(&unreached);
    assert!(matches!(oracle(&unreached, &id, &env, &cfg), Err(OracleError::Unobserved(_))));

    let spin = parse_asm("fn main(1 args)\nentry:\n    cmp r0, r0\n    jcc eq spin out\nspin:\n    jmp spin\nout:\n    ret r0\n").unwrap();
    let id = only_predicate(&spin);
    let cfg = OracleConfig { random_trials: 0, step_budget: 100, seed: 0 };
    assert!(matches!(oracle(&spin, &id, &env, &cfg), Err(OracleError::BudgetExhausted { .. })));
}

#[test]
fn sweep_shapes() {
    assert_eq!(sweep_inputs(0), vec![Vec::<u64>::new()]);
    assert_eq!(sweep_inputs(1).len(), 256);
    let two = sweep_inputs(2);
    assert_eq!(two.len(), 65_536);
    assert_eq!(two[257], vec![1, 1]);
    let three = sweep_inputs(3);
    assert_eq!(three.len(), 768);
    assert!(three.iter().all(|v| v.iter().filter(|&&x| x != 0).count() <= 1));
}

#[test]
fn strip_removes_bogus_block() {
    let p = parse_asm(THREE_BLOCKS).unwrap();
    let inj = inject_opaque(&p, "main", OpaqueKind::Arithmetic, Label::OpTrue, &EnvDomain::standard(), &mut rng(4)).unwrap();
    let f = inj.program.entry_function();
    let crate::mir::Terminator::CondJump { fallthrough: bogus, .. } = &f.block(&inj.predicate.block).unwrap().term else {
        panic!("injection site is not a conditional jump");
    };
    let q = strip(&inj.program, &BTreeMap::from([(inj.predicate.clone(), true)]));
    q.validate().unwrap();
    assert!(q.entry_function().block(bogus).is_none());
    assert_eq!(q.predicate_count(), 1);
    let inputs = equivalence_inputs(1, 2, 64);
    assert!(verify_equivalence(&p, &q, &inputs, &EnvDomain::standard().base()).is_ok());
    assert_eq!(reachable_blocks(q.entry_function()).len(), q.entry_function().blocks.len());
}

#[test]
fn strip_empty_is_identity() {
    let (_, q, _) = corpus_program(3);
    assert_eq!(strip(&q, &Verdicts::new()), q);
}

#[test]
fn strip_all_injected_restores_count_and_behavior() {
    for normals in 2..=5 {
        let (p, q, log) = corpus_program(normals);
        assert_eq!(log.opaque().count(), 4);
        let s = strip(&q, &truth_verdicts(&log));
        s.validate().unwrap();
        assert_eq!(s.predicate_count(), p.predicate_count());
        let env = EnvDomain::standard();
        let inputs = equivalence_inputs(normals as u64, 2, 64);
        for e in [env.base(), env.sample(&mut rng(9))] {
            assert!(verify_equivalence(&q, &s, &inputs, &e).is_ok());
            assert!(verify_equivalence(&p, &s, &inputs, &e).is_ok());
        }
    }
}

#[test]
fn strip_is_idempotent() {
    for normals in [2, 4] {
        let (_, q, log) = corpus_program(normals);
        let v = truth_verdicts(&log);
        let once = strip(&q, &v);
        assert_eq!(strip(&once, &v), once);
    }
}

#[test]
fn swapped_edges_fail_with_witness() {
    let p = parse_asm(PARITY).unwrap();
    let inputs = equivalence_inputs(3, 2, 64);
    let env = EnvDomain::standard().base();
    assert!(verify_equivalence(&p, &p, &inputs, &env).is_ok());
    let good = strip(&p, &BTreeMap::from([(only_predicate(&p), true)]));
    assert!(verify_equivalence(&p, &good, &inputs, &env).is_ok());
    let bad = strip(&p, &BTreeMap::from([(only_predicate(&p), false)]));
    let m = verify_equivalence(&p, &bad, &inputs, &env).unwrap_err();
    assert_ne!(
        concrete_run(&p, &m.inputs, &env, 1000).unwrap(),
        concrete_run(&bad, &m.inputs, &env, 1000).unwrap()
    );
    assert_eq!(m.inputs, inputs[0]);
}

#[test]
fn arity_mismatch_fails() {
    let p = parse_asm(PARITY).unwrap();
    let q = parse_asm(EQ_FIVE).unwrap();
    let inputs = equivalence_inputs(0, 2, 4);
    assert!(verify_equivalence(&p, &q, &inputs, &EnvDomain::standard().base()).is_err());
}

#[test]
fn injected_predicates_match_oracle() {
    for normals in 2..=4 {
        let (_, q, log) = corpus_program(normals);
        let verdicts = oracle_all(&q, &EnvDomain::standard(), &OracleConfig { random_trials: 2_000, ..OracleConfig::default() });
        for (id, e) in log.opaque() {
            let want = if e.label == Label::OpTrue { Verdict::AlwaysTrue } else { Verdict::AlwaysFalse };
            assert_eq!(verdicts[id].as_ref().unwrap().verdict, want, "{id}");
        }
    }
}

struct Perfect(InjectionLog);

impl Detector for Perfect {
    fn classify(&self, id: &crate::mir::PredicateId, _: &[TermCounts]) -> Label {
        self.0.label_of(id).unwrap()
    }
}

struct FlagAll;

impl Detector for FlagAll {
    fn classify(&self, _: &crate::mir::PredicateId, _: &[TermCounts]) -> Label {
        Label::OpTrue
    }
}

#[test]
fn perfect_models_remove_everything() {
    let (_, q, log) = corpus_program(3);
    let det = Perfect(log.clone());
    let (out, r) = run_pipeline(&q, &Mode::Model(&det), Some(&log), &PipelineConfig::default());
    assert_eq!((r.removal_rate(), r.fp, r.fn_, r.errors), (100.0, 0, 0, 0));
    assert_eq!(r.total_opaque, 4);
    assert!(r.equivalent);
    assert_eq!(out.predicate_count(), 3);
    assert_eq!(r.rows.len(), 7);
}

#[test]
fn flag_everything_gives_false_positives() {
    let (_, q, log) = corpus_program(3);
    let cfg = PipelineConfig { guard_inputs: 0, revert: false, ..PipelineConfig::default() };
    let (_, r) = run_pipeline(&q, &Mode::Model(&FlagAll), Some(&log), &cfg);
    assert_eq!(r.fp, 3);
    assert_eq!(r.removed_opaque + r.fn_, 4);
}

#[test]
fn guard_and_revert_keep_programs_equivalent() {
    for normals in 2..=5 {
        let (_, q, log) = corpus_program(normals);
        let (out, r) = run_pipeline(&q, &Mode::Model(&FlagAll), Some(&log), &PipelineConfig::default());
        assert!(r.equivalent);
        let inputs = equivalence_inputs(77, 2, 64);
        assert!(verify_equivalence(&q, &out, &inputs, &EnvDomain::standard().base()).is_ok());
        assert!(r.rows.iter().all(|row| row.action != Action::Removed || row.predicted == Label::OpTrue));
    }
}

#[test]
fn oracle_mode_is_exact() {
    let (_, q, log) = corpus_program(3);
    let mode = Mode::Oracle(OracleConfig { random_trials: 2_000, ..OracleConfig::default() });
    let (out, r) = run_pipeline(&q, &mode, Some(&log), &PipelineConfig::default());
    assert_eq!((r.removal_rate(), r.fp, r.fn_, r.errors), (100.0, 0, 0, 0));
    assert!(r.equivalent);
    assert_eq!(out.predicate_count(), 3);
    assert!(r.rows_csv().starts_with("predicate,truth,predicted,action\n"));
    let line = summary_csv("opdeob", "AddOpaque(Arithmetic,2)", &[r.clone(), r]);
    assert_eq!(line, "opdeob,AddOpaque(Arithmetic,2),100.00,0,0,0");
}
