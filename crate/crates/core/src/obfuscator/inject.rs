use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::templates::{self, SCRATCH_FREGS, SCRATCH_REGS};
use super::{function_index, EnvDomain, Label, ObfError, OpaqueKind, CHECK_BUDGET};
use crate::mir::{
    live_after_each, BasicBlock, BinOp, Executable, FReg, Function, Inst, Liveness, PredicateId, Program, Reg, Src,
    MemRef, Terminator, Tracer, BOGUS_BASE, LOC_FLAGS, NUM_FREGS, NUM_REGS, OPAQUE_BASE, OPAQUE_CELLS,
};

/// Random trials on top of the 8-bit sweep when checking a template instance.
pub const TEMPLATE_TRIALS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct Injection {
    pub program: Program,
    pub predicate: PredicateId,
    pub template: &'static str,
    /// The block that was split and the continuation that received its
    /// original instructions tail and terminator.
    pub split: (String, String),
}

struct Coverage {
    func: usize,
    seen: HashSet<usize>,
}

impl Tracer for Coverage {
    fn block(&mut self, func: usize, block: usize, depth: usize) {
        if func == self.func && depth == 0 {
            self.seen.insert(block);
        }
    }
}

/// Blocks of the entry function visited on a few byte-sweep vectors: joint
/// bytes for up to two inputs, otherwise one byte with the rest zero.
fn covered_blocks(p: &Program, fi: usize, env: &EnvDomain, rng: &mut ChaCha8Rng) -> HashSet<usize> {
    let mut cov = Coverage { func: fi, seen: HashSet::new() };
    if p.functions[fi].name != p.entry {
        return (0..p.functions[fi].blocks.len()).collect();
    }
    let arity = p.functions[fi].arity;
    let mut exe = Executable::new(p);
    for _ in 0..32 {
        let x: Vec<u64> = if arity <= 2 {
            (0..arity).map(|_| rng.gen_range(0..256)).collect()
        } else {
            let mut v = vec![0; arity];
            v[rng.gen_range(0..arity)] = rng.gen_range(0..256);
            v
        };
        let _ = exe.run_traced(&x, &env.sample(rng), CHECK_BUDGET, &mut cov);
    }
    cov.seen
}

fn free_regs(live: u32) -> Vec<Reg> {
    (0..NUM_REGS as u8).map(Reg).filter(|r| live & (1 << r.0) == 0).collect()
}

fn free_fregs(live: u32) -> Vec<FReg> {
    (0..NUM_FREGS as u8).map(FReg).filter(|r| live & (1 << (16 + r.0)) == 0).collect()
}

/// Inserts an invariant predicate of the given kind and polarity into
/// `func`. The block at a random site with dead flags and enough dead
/// registers is split; the predicate's live edge continues the original code
/// and its dead edge enters a fresh bogus block.
pub fn inject_opaque(
    p: &Program,
    func: &str,
    kind: OpaqueKind,
    polarity: Label,
    env: &EnvDomain,
    rng: &mut ChaCha8Rng,
) -> Result<Injection, ObfError> {
    assert!(polarity.is_opaque(), "injected predicates are OP_TRUE or OP_FALSE");
    let fi = function_index(p, func)?;
    let pool = templates::pool(kind, polarity);
    let template = *pool.choose(rng).ok_or(ObfError::TemplateExhausted { kind, polarity })?;

    let f = &p.functions[fi];
    let live = Liveness::compute(f, &|n| p.arity_of(n));
    let covered = covered_blocks(p, fi, env, rng);
    let need_f = if kind == OpaqueKind::BiOpaqueFloat { SCRATCH_FREGS } else { 0 };
    let mut sites = Vec::new();
    for bi in 0..f.blocks.len() {
        if !covered.contains(&bi) {
            continue;
        }
        let after = live_after_each(f, bi, &live);
        for i in 0..=f.blocks[bi].insts.len() {
            let l = if i == 0 { live.live_in[bi] } else { after[i - 1] };
            if l & LOC_FLAGS != 0 || free_regs(l).len() < SCRATCH_REGS + 2 || free_fregs(l).len() < need_f {
                continue;
            }
            sites.push((bi, i, l));
        }
    }
    let &(bi, at, l) = sites.choose(rng).ok_or_else(|| ObfError::NoSite(func.to_string()))?;

    // Inputs: two opaque-data cells.
    let mut regs = free_regs(l);
    regs.shuffle(rng);
    let (x, y) = (regs.pop().expect("site has free registers"), regs.pop().expect("site has free registers"));
    let i = rng.gen_range(0..OPAQUE_CELLS);
    let j = (i + rng.gen_range(1..OPAQUE_CELLS)) % OPAQUE_CELLS;
    let cell = |k: u64| MemRef { base: x, disp: 8 * k as i64 };
    let inputs = [
        Inst::MovImm { dst: x, imm: OPAQUE_BASE },
        Inst::Load { dst: y, addr: cell(j) },
        Inst::Load { dst: x, addr: cell(i) },
    ];
    let mut fregs = free_fregs(l);
    fregs.shuffle(rng);

    let seed: u64 = rng.gen();
    templates::verify_template(template, seed, env, TEMPLATE_TRIALS).map_err(|c| ObfError::TemplateUnsound {
        template: template.id,
        x: c.x,
        y: c.y,
    })?;
    let snippet = templates::instantiate(template, &mut ChaCha8Rng::seed_from_u64(seed), x, y, regs, fregs, env);

    let mut g: Function = f.clone();
    let old = g.blocks[bi].clone();
    let cont = g.fresh_label(&format!("{}_", old.label));
    g.blocks.insert(bi + 1, BasicBlock { label: cont.clone(), insts: old.insts[at..].to_vec(), term: old.term.clone() });
    let bogus = g.fresh_label("dead");
    let (taken, fallthrough) =
        if polarity == Label::OpTrue { (cont.clone(), bogus.clone()) } else { (bogus.clone(), cont.clone()) };
    let head = &mut g.blocks[bi];
    head.insts.truncate(at);
    head.insts.extend(inputs);
    head.insts.extend(snippet.insts);
    head.term = Terminator::CondJump { cond: snippet.cond, taken, fallthrough };
    g.blocks.push(bogus_block(bogus, cont.clone(), l, rng));

    let ordinal = g.blocks[..bi].iter().filter(|b| matches!(b.term, Terminator::CondJump { .. })).count();
    let predicate = PredicateId { function: g.name.clone(), block: old.label.clone(), ordinal };
    let mut program = p.clone();
    program.functions[fi] = g;
    Ok(Injection { program, predicate, template: template.id, split: (old.label, cont) })
}

/// Whether `f` already seeds the opaque-data cells.
pub fn has_opaque_init(f: &Function) -> bool {
    matches!(f.blocks.first().and_then(|b| b.insts.first()), Some(Inst::MovImm { imm: OPAQUE_BASE, .. }))
}

/// Prepends to the entry block of `func` code filling the opaque-data cells
/// with scrambled copies of the inputs. A no-op when already present.
pub fn init_opaque(p: &Program, func: &str, rng: &mut ChaCha8Rng) -> Result<Program, ObfError> {
    let fi = function_index(p, func)?;
    let f = &p.functions[fi];
    if has_opaque_init(f) {
        return Ok(p.clone());
    }
    let live = Liveness::compute(f, &|n| p.arity_of(n));
    let free = free_regs(live.live_in[0]);
    let [a, t] = [0, 1].map(|k| free.get(k).copied());
    let (Some(a), Some(t)) = (a, t) else { return Err(ObfError::NoSite(func.to_string())) };
    let mut insts = vec![Inst::MovImm { dst: a, imm: OPAQUE_BASE }];
    for k in 0..OPAQUE_CELLS {
        let src = if f.arity > 0 { Reg((k as usize % f.arity) as u8) } else { a };
        insts.push(Inst::Bin { op: BinOp::Mul, dst: t, lhs: src, rhs: Src::Imm(rng.gen::<u64>() | 1) });
        insts.push(Inst::Bin { op: BinOp::Xor, dst: t, lhs: t, rhs: Src::Imm(rng.gen_range(0..1 << 16)) });
        insts.push(Inst::Store { addr: MemRef { base: a, disp: 8 * k as i64 }, src: t });
    }
    let mut q = p.clone();
    let entry = &mut q.functions[fi].blocks[0].insts;
    insts.append(entry);
    *entry = insts;
    Ok(q)
}

/// Random ALU noise over registers dead at `live`, an optional store into the
/// bogus region, then a jump to `next`.
fn bogus_block(label: String, next: String, live: u32, rng: &mut ChaCha8Rng) -> BasicBlock {
    const OPS: [BinOp; 7] = [BinOp::Add, BinOp::Sub, BinOp::Xor, BinOp::Mul, BinOp::And, BinOp::Or, BinOp::Shl];
    let dead = free_regs(live);
    let mut insts = Vec::new();
    for _ in 0..rng.gen_range(2..=5) {
        let dst = *dead.choose(rng).expect("site has dead registers");
        let op = *OPS.choose(rng).expect("non-empty");
        let lhs = Reg(rng.gen_range(0..NUM_REGS as u8));
        let rhs = if op == BinOp::Shl || rng.gen_bool(0.5) {
            Src::Imm(if op == BinOp::Shl { rng.gen_range(0..64) } else { rng.gen_range(0..1 << 16) })
        } else {
            Src::Reg(Reg(rng.gen_range(0..NUM_REGS as u8)))
        };
        insts.push(Inst::Bin { op, dst, lhs, rhs });
    }
    if rng.gen_bool(0.3) {
        let a = *dead.choose(rng).expect("site has dead registers");
        insts.push(Inst::MovImm { dst: a, imm: BOGUS_BASE + 8 * rng.gen_range(0..512) });
        insts.push(Inst::Store {
            addr: MemRef { base: a, disp: 0 },
            src: Reg(rng.gen_range(0..NUM_REGS as u8)),
        });
    }
    BasicBlock { label, insts, term: Terminator::Jump(next) }
}
