use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::templates::{by_id, pool, verify_template, TEMPLATES};
use super::*;
use crate::mir::{concrete_run, parse_asm, Observation, Terminator, Tracer};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn run(p: &Program, x: &[u64], env: &Env) -> Observation {
    match concrete_run(p, x, env, CHECK_BUDGET).unwrap() {
        Outcome::Returned(o) => o,
        other => panic!("run did not return: {other:?}"),
    }
}

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

const FOUR_BLOCKS: &str = "\
fn main(2 args)
a:
    and r1, r1, 15
    movimm r2, 0
    jmp head
head:
    cmp r2, r1
    jcc uge out body
body:
    add r2, r2, 1
    add r0, r0, r2
    jmp head
out:
    ret r0
";

#[test]
fn every_kind_has_four_templates_per_polarity() {
    for kind in OpaqueKind::ALL {
        for pol in [Label::OpTrue, Label::OpFalse] {
            assert!(pool(kind, pol).len() >= 4, "{kind} {pol}");
        }
    }
    let ids: HashSet<&str> = TEMPLATES.iter().map(|t| t.id).collect();
    assert_eq!(ids.len(), TEMPLATES.len());
}

#[test]
fn every_template_is_invariant() {
    let env = EnvDomain::standard();
    for t in TEMPLATES {
        for seed in 0..3 {
            assert_eq!(verify_template(t, seed, &env, 10_000), Ok(()), "{}", t.id);
        }
    }
}

/// Independent formula oracles for the three documented constructions.
#[test]
fn documented_constructions_hold_by_formula() {
    let mut r = rng(7);
    let mut pairs: Vec<(u64, u64)> = (0..256u64).flat_map(|x| (0..256u64).map(move |y| (x, y))).collect();
    pairs.extend((0..10_000).map(|_| (r.gen(), r.gen())));
    for &(x, y) in &pairs {
        assert_eq!(x.wrapping_mul(x.wrapping_add(1)) % 2, 0);
        assert_ne!(x.wrapping_mul(x).wrapping_mul(7).wrapping_sub(1), y.wrapping_mul(y));
        assert_eq!(x.wrapping_add(y), (x ^ y).wrapping_add((x & y).wrapping_mul(2)));
    }
    let env = EnvDomain::standard();
    for id in ["ar-parity-even", "ar-seven-square", "mba-add"] {
        let t = by_id(id).unwrap();
        assert_eq!(verify_template(t, 11, &env, 10_000), Ok(()));
    }
    assert_eq!(by_id("ar-seven-square").unwrap().polarity, Label::OpFalse);
}

#[test]
fn broken_template_is_caught() {
    fn always_zero_cmp(b: &mut builder::Builder, x: Reg, _: Reg, _: &EnvDomain) -> crate::mir::Cond {
        b.cmp_imm(x, 3);
        crate::mir::Cond::Ne
    }
    let t = templates::Template { id: "bad", kind: OpaqueKind::Arithmetic, polarity: Label::OpTrue, build: always_zero_cmp };
    let c = verify_template(&t, 0, &EnvDomain::standard(), 0).unwrap_err();
    assert_eq!(c.x, 3);
}

use crate::mir::Reg;

struct Branches(Vec<(usize, bool)>);
impl Tracer for Branches {
    fn branch(&mut self, _f: usize, block: usize, taken: bool) {
        self.0.push((block, taken));
    }
}

#[test]
fn injected_predicates_take_declared_edge() {
    let env = EnvDomain::standard();
    for seed in 0..30u64 {
        let mut r = rng(seed);
        let p = generate_program(&mut r, &GenConfig::default());
        let kind = OpaqueKind::ALL[seed as usize % 6];
        let pol = if seed % 2 == 0 { Label::OpTrue } else { Label::OpFalse };
        let inj = inject_opaque(&p, "main", kind, pol, &env, &mut r).unwrap();
        let q = &inj.program;
        q.validate().unwrap();
        assert_eq!(q.predicate_count(), p.predicate_count() + 1);
        let f = q.entry_function();
        let bi = f.block_index(&inj.predicate.block).unwrap();
        assert_eq!(crate::mir::enumerate_predicates(f)[inj.predicate.ordinal], inj.predicate);
        let mut exe = Executable::new(q);
        let mut reached = false;
        for _ in 0..200 {
            let x = random_inputs(&mut r, 2);
            let mut t = Branches(Vec::new());
            exe.run_traced(&x, &env.sample(&mut r), CHECK_BUDGET, &mut t).unwrap();
            for (b, taken) in t.0 {
                if b == bi {
                    reached = true;
                    assert_eq!(taken, pol == Label::OpTrue, "seed {seed} template {}", inj.template);
                }
            }
        }
        assert!(reached, "seed {seed}");
        assert_eq!(first_divergence(&p, q, &env, &mut r, 64), None, "seed {seed}");
    }
}

#[test]
fn dead_edge_enters_fresh_bogus_block() {
    let p = parse_asm(THREE_BLOCKS).unwrap();
    let env = EnvDomain::standard();
    let inj = inject_opaque(&p, "main", OpaqueKind::Arithmetic, Label::OpFalse, &env, &mut rng(3)).unwrap();
    let f = inj.program.entry_function();
    let Terminator::CondJump { taken, fallthrough, .. } = &f.block(&inj.predicate.block).unwrap().term else {
        panic!("no predicate at the injection site");
    };
    assert_eq!(fallthrough, &inj.split.1);
    assert!(p.entry_function().block(taken).is_none());
    let bogus = f.block(taken).unwrap();
    assert_eq!(bogus.term, Terminator::Jump(inj.split.1.clone()));
    for i in &bogus.insts {
        if let crate::mir::Inst::MovImm { imm, .. } = i {
            assert!(*imm >= crate::mir::BOGUS_BASE && *imm < crate::mir::OUTPUT_BASE);
        }
    }
}

#[test]
fn recipe_with_two_arithmetic_predicates() {
    let p = parse_asm(THREE_BLOCKS).unwrap();
    let recipe: Recipe = "AddOpaque(Arithmetic,2)".parse().unwrap();
    let (q, log) = apply_recipe(&p, &recipe, &EnvDomain::standard(), &mut rng(1)).unwrap();
    assert_eq!(q.predicate_count(), 3);
    assert_eq!(log.entries.len(), 3);
    assert_eq!(log.opaque().count(), 2);
    assert_eq!(log.entries.values().filter(|e| e.label == Label::Normal).count(), 1);
    let ids: HashSet<_> = crate::mir::enumerate_predicates(q.entry_function()).into_iter().collect();
    assert_eq!(ids, log.entries.keys().cloned().collect());
    // The original comparison keeps its NORMAL label wherever it moved.
    let normal = log.entries.iter().find(|(_, e)| e.label == Label::Normal).unwrap().0;
    let b = q.entry_function().block(&normal.block).unwrap();
    assert!(matches!(b.insts.last(), Some(crate::mir::Inst::Cmp { rhs: crate::mir::Src::Imm(10), .. })));
}

#[test]
fn flatten_only_recipe_is_clean() {
    let p = parse_asm(FOUR_BLOCKS).unwrap();
    let (q, log) = apply_recipe(&p, &"Flatten".parse().unwrap(), &EnvDomain::standard(), &mut rng(2)).unwrap();
    assert!(q.predicate_count() > p.predicate_count());
    assert_eq!(log.opaque().count(), 0);
    assert!(log.entries.values().all(|e| *e == LogEntry::NORMAL));
}

#[test]
fn flatten_routes_through_one_dispatcher() {
    let p = parse_asm(FOUR_BLOCKS).unwrap();
    let q = flatten(&p, "main", &mut rng(5)).unwrap();
    q.validate().unwrap();
    let f = q.entry_function();
    // Every jump to an original block now comes from the dispatcher chain.
    let originals: HashSet<&str> = p.entry_function().blocks.iter().map(|b| b.label.as_str()).collect();
    for b in &f.blocks {
        if let Terminator::Jump(t) = &b.term {
            assert!(!originals.contains(t.as_str()), "{} jumps straight to {t}", b.label);
        }
    }
    let env = EnvDomain::standard().base();
    let mut r = rng(6);
    for _ in 0..32 {
        let x = [r.gen_range(0..1000), r.gen_range(0..20)];
        assert_eq!(run(&p, &x, &env), run(&q, &x, &env));
    }
}

#[test]
fn mba_encode_flatten_recipe_preserves_behavior() {
    let env = EnvDomain::standard();
    let recipe: Recipe = "AddOpaque(MBA,1),EncodeArithmetic,Flatten".parse().unwrap();
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let p = generate_program(&mut r, &GenConfig::default());
        let (q, log) = apply_recipe(&p, &recipe, &env, &mut r).unwrap();
        assert_eq!(log.opaque().count(), 1);
        let mut check = rng(seed);
        for _ in 0..32 {
            let x = random_inputs(&mut check, 2);
            let e = env.sample(&mut check);
            assert_eq!(run(&p, &x, &e), run(&q, &x, &e));
        }
    }
}

#[test]
fn encode_arithmetic_add_is_exact() {
    let p = parse_asm("fn main(2 args)\ne:\n    add r0, r0, r1\n    ret r0\n").unwrap();
    let q = encode_arithmetic(&p, "main", &mut rng(0)).unwrap();
    let insts = &q.entry_function().blocks[0].insts;
    assert!(insts.len() >= 4);
    assert!(insts.iter().any(|i| matches!(i, crate::mir::Inst::Bin { op: crate::mir::BinOp::Xor, .. })));
    let env = EnvDomain::standard().base();
    let mut exe = Executable::new(&q);
    for x in 0..256u64 {
        for y in 0..256u64 {
            let Outcome::Returned(o) = exe.run(&[x, y], &env, 100).unwrap() else { panic!() };
            assert_eq!(o.value, x + y);
        }
    }
}

#[test]
fn encode_arithmetic_sub_and_xor_are_exact() {
    for (op, f) in [("sub", u64::wrapping_sub as fn(u64, u64) -> u64), ("xor", |a: u64, b: u64| a ^ b)] {
        let p = parse_asm(&format!("fn main(2 args)\ne:\n    {op} r2, r0, r1\n    ret r2\n")).unwrap();
        let q = encode_arithmetic(&p, "main", &mut rng(1)).unwrap();
        assert!(q.entry_function().blocks[0].insts.len() >= 3);
        let env = EnvDomain::standard().base();
        let mut r = rng(2);
        for _ in 0..2000 {
            let (x, y) = (r.gen(), r.gen());
            assert_eq!(run(&q, &[x, y], &env).value, f(x, y));
        }
    }
}

#[test]
fn encode_literals_zero() {
    let p = parse_asm("fn main(0 args)\ne:\n    movimm r0, 0\n    ret r0\n").unwrap();
    for seed in 0..8 {
        let q = encode_literals(&p, "main", &mut rng(seed)).unwrap();
        let insts = &q.entry_function().blocks[0].insts;
        assert_eq!(insts.len(), 2);
        assert!(!matches!(insts[0], crate::mir::Inst::MovImm { imm: 0, .. }));
        assert_eq!(run(&q, &[], &EnvDomain::standard().base()).value, 0);
    }
}

#[test]
fn encode_data_keeps_cell_encoded() {
    let env = EnvDomain::standard();
    for codec in DataCodec::ALL {
        for seed in 0..10 {
            let mut r = rng(seed);
            let p = generate_program(&mut r, &GenConfig::default());
            let q = match encode_data(&p, "main", codec, &mut r) {
                Ok(q) => q,
                Err(ObfError::NoDataVariable(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            assert_ne!(q, p);
            let d = first_divergence(&p, &q, &env, &mut r, 64);
            assert_eq!(d, None, "{codec:?} seed {seed}");
        }
    }
}

#[test]
fn encode_data_needs_a_stable_base() {
    let p = parse_asm("fn main(1 args)\ne:\n    load r1, [r0+8]\n    ret r1\n").unwrap();
    assert!(matches!(encode_data(&p, "main", DataCodec::Xor, &mut rng(0)), Err(ObfError::NoDataVariable(_))));
}

#[test]
fn recipe_text_round_trips() {
    let r: Recipe = "AddOpaque(MBA,2), EncodeArithmetic,EncodeLiterals,EncodeData,Flatten".parse().unwrap();
    assert_eq!(r.to_string(), "AddOpaque(MBA,2),EncodeArithmetic,EncodeLiterals,EncodeData,Flatten");
    assert_eq!(r.to_string().parse::<Recipe>().unwrap(), r);
    assert_eq!(r.opaque_count(), 2);
    assert_eq!(r.without_opaque().to_string(), "EncodeArithmetic,EncodeLiterals,EncodeData,Flatten");
    let one: Recipe = "AddOpaque(environment)".parse().unwrap();
    assert_eq!(one.0, vec![Transform::AddOpaque { kind: OpaqueKind::Environment, count: 1 }]);
    for bad in ["", "AddOpaque(MBA,0)", "AddOpaque", "Virtualize", "AddOpaque(Foo,1)", "Flatten(", "Flatten)"] {
        assert!(bad.parse::<Recipe>().is_err(), "{bad}");
    }
}

#[test]
fn unknown_function_rejected() {
    let p = parse_asm(THREE_BLOCKS).unwrap();
    assert_eq!(flatten(&p, "nope", &mut rng(0)), Err(ObfError::UnknownFunction("nope".into())));
}

#[test]
fn generated_programs_are_valid_and_fault_free() {
    let env = EnvDomain::standard();
    let mut r = rng(9);
    for _ in 0..200 {
        let p = generate_program(&mut r, &GenConfig::default());
        p.validate().unwrap();
        let preds = p.entry_function().cond_jump_count();
        assert!((2..=5).contains(&preds), "{preds}");
        assert!(p.functions[1..].iter().all(|f| f.cond_jump_count() == 0));
        for _ in 0..8 {
            let x = random_inputs(&mut r, 2);
            let out = concrete_run(&p, &x, &env.sample(&mut r), CHECK_BUDGET).unwrap();
            assert!(matches!(out, Outcome::Returned(_)), "{out:?}");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_program(&mut rng(42), &GenConfig::default());
    let b = generate_program(&mut rng(42), &GenConfig::default());
    assert_eq!(crate::mir::emit_asm(&a), crate::mir::emit_asm(&b));
}

#[test]
fn env_domain_shape() {
    let d = EnvDomain::standard();
    assert_eq!(d.free_slots(), (4..16).collect::<Vec<u8>>());
    let e = d.sample(&mut rng(0));
    assert!(d.contains(&e));
    assert_eq!(e[EnvDomain::PAGE_SIZE as usize], 0x1000);
}

proptest! {
    #[test]
    fn odd_inverse(a in any::<u64>()) {
        let a = a | 1;
        prop_assert_eq!(a.wrapping_mul(encode::inverse_odd(a)), 1);
    }

    #[test]
    fn recipes_preserve_behavior(seed in 0u64..1000, steps in proptest::collection::vec(0usize..5, 1..4)) {
        let names = ["AddOpaque(Arithmetic,1)", "EncodeArithmetic", "EncodeLiterals", "AddOpaque(Alias,1)", "Flatten"];
        let text: Vec<&str> = steps.iter().map(|&s| names[s]).collect();
        let recipe: Recipe = text.join(",").parse().unwrap();
        let env = EnvDomain::standard();
        let mut r = rng(seed);
        let p = generate_program(&mut r, &GenConfig::default());
        let (q, log) = apply_recipe(&p, &recipe, &env, &mut r).unwrap();
        prop_assert_eq!(log.opaque().count(), recipe.opaque_count());
        prop_assert_eq!(log.entries.len(), q.predicate_count());
        prop_assert_eq!(first_divergence(&p, &q, &env, &mut rng(seed ^ 1), 32), None);
    }
}
