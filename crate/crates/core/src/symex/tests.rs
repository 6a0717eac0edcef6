use proptest::prelude::*;

use super::*;
use crate::mir::{parse_asm, Program};

fn pid(f: &str, b: &str) -> PredicateId {
    PredicateId { function: f.into(), block: b.into(), ordinal: 0 }
}

fn labels(ps: &PathSet) -> Vec<Vec<&str>> {
    ps.paths.iter().map(|p| p.0.iter().map(String::as_str).collect()).collect()
}

const DIAMOND: &str = "\
fn main(2 args)
entry:
    cmp r0, 10
    jcc ult left right
left:
    add r2, r0, 1
    jmp join
right:
    sub r2, r0, 1
    jmp join
join:
    cmp r2, r1
    jcc eq yes no
yes:
    ret r2
no:
    ret r1
";

const LOOP: &str = "\
fn main(1 args)
entry:
    movimm r1, 0
    jmp head
head:
    cmp r1, r0
    jcc uge out body
body:
    add r1, r1, 1
    jmp head
out:
    ret r1
";

#[test]
fn straight_line_has_one_path() {
    let p = parse_asm("fn main(1 args)\na:\n    add r1, r0, 3\n    jmp b\nb:\n    cmp r1, 5\n    jcc eq c d\nc:\n    ret r0\nd:\n    ret r1\n").unwrap();
    let ps = Analyzer::new(&p).enumerate_paths(&pid("main", "b"), PathBudget::default()).unwrap();
    assert_eq!(labels(&ps), vec![vec!["a", "b"]]);
    assert!(!ps.truncated);
}

#[test]
fn diamond_taken_edge_first() {
    let p = parse_asm(DIAMOND).unwrap();
    let ps = Analyzer::new(&p).enumerate_paths(&pid("main", "join"), PathBudget::default()).unwrap();
    assert_eq!(labels(&ps), vec![vec!["entry", "left", "join"], vec!["entry", "right", "join"]]);
}

/// Expected walks are spelled out by iteration count for the single-loop shape.
#[test]
fn loop_budget_bounds_iterations() {
    let p = parse_asm(LOOP).unwrap();
    let budget = PathBudget::new(2, 8).unwrap();
    let ps = Analyzer::new(&p).enumerate_paths(&pid("main", "head"), budget).unwrap();
    let mut want = Vec::new();
    for iters in 0..=2 {
        let mut w = vec!["entry", "head"];
        for _ in 0..iters {
            w.extend(["body", "head"]);
        }
        want.push(w);
    }
    assert_eq!(labels(&ps), want);
    assert!(!ps.truncated);

    let states = collect_states(&p, &pid("main", "head"), budget).unwrap();
    let r1_versions: Vec<usize> = states
        .iter()
        .map(|s| s.assignments.iter().filter(|a| matches!(&a.dest, Dest::Id { name, .. } if name.starts_with("r1_"))).count())
        .collect();
    assert_eq!(r1_versions, vec![1, 2, 3]);
    assert!(states.iter().all(is_ssa));
}

#[test]
fn path_budget_truncates() {
    let p = parse_asm(LOOP).unwrap();
    let ps = Analyzer::new(&p).enumerate_paths(&pid("main", "head"), PathBudget::new(5, 2).unwrap()).unwrap();
    assert_eq!(ps.paths.len(), 2);
    assert!(ps.truncated);
}

#[test]
fn zero_budget_rejected() {
    assert_eq!(PathBudget::new(0, 3), Err(SymexError::BadBudget));
    assert_eq!(PathBudget::new(1, 0), Err(SymexError::BadBudget));
}

#[test]
fn unreachable_target_is_empty() {
    let p = parse_asm("fn main(1 args)\na:\n    ret r0\ndead:\n    cmp r0, 1\n    jcc eq a a\n").unwrap();
    let ps = Analyzer::new(&p).enumerate_paths(&pid("main", "dead"), PathBudget::default()).unwrap();
    assert!(ps.paths.is_empty());
    assert!(!ps.truncated);
}

#[test]
fn unknown_target_errors() {
    let p = parse_asm(DIAMOND).unwrap();
    let a = Analyzer::new(&p);
    assert!(matches!(a.enumerate_paths(&pid("main", "left"), PathBudget::default()), Err(SymexError::UnknownPredicate(_))));
    assert!(matches!(a.enumerate_paths(&pid("nope", "x"), PathBudget::default()), Err(SymexError::UnknownFunction(_))));
}

#[test]
fn self_compare_folds_to_taken() {
    let p = parse_asm("fn main(1 args)\na:\n    cmp r0, r0\n    jcc eq t f\nt:\n    ret r0\nf:\n    ret r0\n").unwrap();
    let states = collect_states(&p, &pid("main", "a"), PathBudget::default()).unwrap();
    let addrs = p.block_addresses();
    assert_eq!(states.len(), 1);
    assert_eq!(states[0].folded_target(), Some(addrs[&("main".into(), "t".into())]));
    assert_eq!(states[0].assignments[0].value, Expr::int(1, 1));
}

#[test]
fn distinct_inputs_stay_symbolic() {
    let p = parse_asm("fn main(2 args)\na:\n    cmp r0, r1\n    jcc eq t f\nt:\n    ret r0\nf:\n    ret r1\n").unwrap();
    let s = &collect_states(&p, &pid("main", "a"), PathBudget::default()).unwrap()[0];
    assert!(matches!(s.predicate_dst, Expr::Cond { .. }));
    assert_eq!(s.assignments[0].value.render(), "ExprOp('FLAG_EQ_CMP', ExprId('r0', size=64), ExprId('r1', size=64))");
    assert_eq!(s.flag_defs, vec![0, 1, 2, 3]);
    let names: Vec<String> = s.assignments.iter().map(|a| a.dest.render()).collect();
    assert_eq!(names[0], "ExprId('zf_1', size=1)");
    assert_eq!(names[3], "ExprId('of_1', size=1)");
}

#[test]
fn parity_predicate_evaluates_to_taken() {
    let p = parse_asm(
        "fn main(1 args)\na:\n    add r1, r0, 1\n    mul r1, r1, r0\n    and r1, r1, 1\n    cmp r1, 0\n    jcc eq t f\nt:\n    ret r0\nf:\n    ret r1\n",
    )
    .unwrap();
    let s = &collect_states(&p, &pid("main", "a"), PathBudget::default()).unwrap()[0];
    let taken = p.block_addresses()[&("main".into(), "t".into())];
    assert_eq!(s.folded_target(), Some(taken));
    let mut rng = 0x9e3779b97f4a7c15u64;
    for _ in 0..16 {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let x = rng;
        let got = s.predicate_dst.eval(&|n| (n == "r0").then_some(x).or_else(|| lookup(s, n, x)), &|_| 0);
        assert_eq!(got, Some(taken));
        assert!(matches!(replay(&p, s, &[x], &[0; 16], 1000), Replay::Match { taken: true }));
    }
}

/// Evaluates SSA names of `s` in order with `r0 = x`.
fn lookup(s: &SymbolicState, name: &str, x: u64) -> Option<u64> {
    let mut vals = std::collections::HashMap::new();
    vals.insert("r0".to_string(), x);
    for a in &s.assignments {
        if let Dest::Id { name: n, .. } = &a.dest {
            let v = a.value.eval(&|k| vals.get(k).copied(), &|_| 0)?;
            vals.insert(n.clone(), v);
        }
    }
    vals.get(name).copied()
}

#[test]
fn memory_reads_follow_stores() {
    let p = parse_asm(
        "\
fn main(2 args)
a:
    movimm r4, 0x8000
    store [r4+0], r0
    add r5, r1, 0x8000
    store [r5+0], r1
    load r6, [r4+0]
    load r7, [r4+8]
    cmp r6, r7
    jcc eq t f
t:
    ret r6
f:
    ret r7
",
    )
    .unwrap();
    let s = &collect_states(&p, &pid("main", "a"), PathBudget::default()).unwrap()[0];
    for (x, y) in [(3u64, 0u64), (3, 8), (5, 16), (0, 0), (24, 24)] {
        assert!(matches!(replay(&p, s, &[x, y], &[0; 16], 1000), Replay::Match { .. }), "{x} {y}");
    }
}

#[test]
fn env_and_calls_are_free_symbols() {
    let p = parse_asm(
        "\
fn main(1 args)
a:
    getenv r1, 2
    call g b
b:
    cmp r0, r1
    jcc ult t f
t:
    ret r0
f:
    ret r1
fn g(1 args)
g0:
    add r0, r0, 9
    ret r0
",
    )
    .unwrap();
    let s = &collect_states(&p, &pid("main", "b"), PathBudget::default()).unwrap()[0];
    let rendered: Vec<String> = s.assignments.iter().map(|a| a.value.render()).collect();
    assert_eq!(rendered[0], "ExprId('ENV2', size=64)");
    assert_eq!(rendered[1], "ExprId('RET_g_1', size=64)");
    let mut env = [0u64; 16];
    env[2] = 11;
    assert!(matches!(replay(&p, s, &[1], &env, 1000), Replay::Match { taken: true }));
    assert!(matches!(replay(&p, s, &[5], &env, 1000), Replay::Match { taken: false }));
}

#[test]
fn bad_path_rejected() {
    let p = parse_asm(DIAMOND).unwrap();
    let a = Analyzer::new(&p);
    let bad = Path(vec!["entry".into(), "join".into()]);
    assert!(matches!(a.exec_path("main", &bad), Err(SymexError::BadPath(_))));
}

fn program_strategy() -> impl Strategy<Value = (Program, Vec<u64>)> {
    let op = prop::sample::select(vec!["add", "sub", "mul", "and", "or", "xor", "shl", "shr", "udiv", "urem"]);
    let inst = (op, 0u8..6, 0u8..6, prop_oneof![(0u8..6).prop_map(|r| format!("r{r}")), (0u64..300).prop_map(|v| v.to_string())]);
    let cc = prop::sample::select(vec!["eq", "ne", "ult", "slt", "uge", "sge"]);
    (
        prop::collection::vec(inst.clone(), 1..6),
        prop::collection::vec(inst, 1..6),
        cc.clone(),
        cc,
        prop::collection::vec(any::<u8>(), 2),
    )
        .prop_map(|(b0, b1, c0, c1, xs)| {
            let body = |v: &[(&str, u8, u8, String)]| {
                v.iter().map(|(o, d, a, s)| format!("    {o} r{d}, r{a}, {s}\n")).collect::<String>()
            };
            let src = format!(
                "fn main(2 args)\na:\n{}    store [r9+0x8000], r2\n    cmp r0, r1\n    jcc {c0} b c\nb:\n{}    load r3, [r9+0x8000]\n    jmp c\nc:\n    cmp r2, r3\n    jcc {c1} a d\nd:\n    ret r2\n",
                body(&b0),
                body(&b1)
            );
            (parse_asm(&src).unwrap(), xs.into_iter().map(u64::from).collect())
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn states_agree_with_concrete_runs((p, xs) in program_strategy()) {
        let states = collect_states(&p, &pid("main", "c"), PathBudget::default()).unwrap();
        prop_assert!(!states.is_empty());
        let mut followed = 0;
        for s in &states {
            prop_assert!(is_ssa(s));
            match replay(&p, s, &xs, &[0; 16], 10_000) {
                Replay::Mismatch { index, symbolic, concrete } => {
                    prop_assert!(false, "assignment {index}: {symbolic:?} vs {concrete}");
                }
                Replay::Match { .. } => followed += 1,
                Replay::OffPath => {}
            }
        }
        // The first arrival at `c` lies on an enumerated path unless the run faulted first.
        let faulted = matches!(crate::mir::concrete_run(&p, &xs, &[0; 16], 10_000), Ok(crate::mir::Outcome::Fault(_)));
        prop_assert!(faulted || followed >= 1);
    }
}
