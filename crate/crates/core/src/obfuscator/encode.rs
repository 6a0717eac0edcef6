use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{function_index, ObfError};
use crate::mir::{live_after_each, BinOp, Inst, Liveness, MemRef, Program, Reg, Src, UnOp, NUM_REGS, OUTPUT_BASE};

/// Registers not live after instruction `i` and not used by it.
fn scratch_after(inst: &Inst, live_after: u32) -> Vec<Reg> {
    let used = inst.use_regs();
    (0..NUM_REGS as u8)
        .map(Reg)
        .filter(|r| live_after & (1 << r.0) == 0 && !used.contains(r) && inst.def_reg() != Some(*r))
        .collect()
}

/// Rewrites `add`, `sub` and `xor` through mixed boolean-arithmetic identities:
/// `a + b = (a ^ b) + 2(a & b)`, `a - b = (a ^ b) - 2(~a & b)`,
/// `a ^ b = (a | b) - (a & b)`.
pub fn encode_arithmetic(p: &Program, func: &str, rng: &mut ChaCha8Rng) -> Result<Program, ObfError> {
    let fi = function_index(p, func)?;
    let f = &p.functions[fi];
    let live = Liveness::compute(f, &|n| p.arity_of(n));
    let mut g = f.clone();
    for (bi, block) in f.blocks.iter().enumerate() {
        let after = live_after_each(f, bi, &live);
        let mut out = Vec::with_capacity(block.insts.len());
        for (i, inst) in block.insts.iter().enumerate() {
            let Inst::Bin { op, dst, lhs, rhs } = *inst else {
                out.push(inst.clone());
                continue;
            };
            let mut free = scratch_after(inst, after[i]);
            if !matches!(op, BinOp::Add | BinOp::Sub | BinOp::Xor) || free.len() < 2 {
                out.push(inst.clone());
                continue;
            }
            free.shuffle(rng);
            let (t1, t2) = (free[0], free[1]);
            let shl1 = |t: Reg, rng: &mut ChaCha8Rng| {
                if rng.gen_bool(0.5) {
                    Inst::Bin { op: BinOp::Shl, dst: t, lhs: t, rhs: Src::Imm(1) }
                } else {
                    Inst::Bin { op: BinOp::Add, dst: t, lhs: t, rhs: Src::Reg(t) }
                }
            };
            match op {
                BinOp::Add => {
                    out.push(Inst::Bin { op: BinOp::Xor, dst: t1, lhs, rhs });
                    out.push(Inst::Bin { op: BinOp::And, dst: t2, lhs, rhs });
                    out.push(shl1(t2, rng));
                    out.push(Inst::Bin { op: BinOp::Add, dst, lhs: t1, rhs: Src::Reg(t2) });
                }
                BinOp::Sub => {
                    out.push(Inst::Bin { op: BinOp::Xor, dst: t1, lhs, rhs });
                    out.push(Inst::Un { op: UnOp::Not, dst: t2, src: lhs });
                    out.push(Inst::Bin { op: BinOp::And, dst: t2, lhs: t2, rhs });
                    out.push(shl1(t2, rng));
                    out.push(Inst::Bin { op: BinOp::Sub, dst, lhs: t1, rhs: Src::Reg(t2) });
                }
                _ => {
                    out.push(Inst::Bin { op: BinOp::Or, dst: t1, lhs, rhs });
                    out.push(Inst::Bin { op: BinOp::And, dst: t2, lhs, rhs });
                    out.push(Inst::Bin { op: BinOp::Sub, dst, lhs: t1, rhs: Src::Reg(t2) });
                }
            }
        }
        g.blocks[bi].insts = out;
    }
    let mut q = p.clone();
    q.functions[fi] = g;
    Ok(q)
}

/// Replaces `movimm` constants by `c ^ k` or `c - k` followed by the
/// instruction that recovers `c`, and immediate ALU operands by a register
/// computed the same way when a dead register is available.
pub fn encode_literals(p: &Program, func: &str, rng: &mut ChaCha8Rng) -> Result<Program, ObfError> {
    let fi = function_index(p, func)?;
    let f = &p.functions[fi];
    let live = Liveness::compute(f, &|n| p.arity_of(n));
    let mut g = f.clone();
    let split = |c: u64, dst: Reg, rng: &mut ChaCha8Rng| -> [Inst; 2] {
        let k: u64 = rng.gen_range(1..1 << 32);
        if rng.gen_bool(0.5) {
            [Inst::MovImm { dst, imm: c ^ k }, Inst::Bin { op: BinOp::Xor, dst, lhs: dst, rhs: Src::Imm(k) }]
        } else {
            [Inst::MovImm { dst, imm: c.wrapping_sub(k) }, Inst::Bin { op: BinOp::Add, dst, lhs: dst, rhs: Src::Imm(k) }]
        }
    };
    for (bi, block) in f.blocks.iter().enumerate() {
        let after = live_after_each(f, bi, &live);
        let mut out = Vec::with_capacity(block.insts.len());
        for (i, inst) in block.insts.iter().enumerate() {
            match *inst {
                Inst::MovImm { dst, imm } => out.extend(split(imm, dst, rng)),
                Inst::Bin { op, dst, lhs, rhs: Src::Imm(c) } if rng.gen_bool(0.5) => {
                    match scratch_after(inst, after[i]).choose(rng) {
                        Some(&t) => {
                            out.extend(split(c, t, rng));
                            out.push(Inst::Bin { op, dst, lhs, rhs: Src::Reg(t) });
                        }
                        None => out.push(inst.clone()),
                    }
                }
                _ => out.push(inst.clone()),
            }
        }
        g.blocks[bi].insts = out;
    }
    let mut q = p.clone();
    q.functions[fi] = g;
    Ok(q)
}

/// Encoding applied to a memory variable at rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataCodec {
    Xor,
    Add,
    /// `v * a + b` with odd `a`.
    Poly,
}

impl DataCodec {
    pub const ALL: [DataCodec; 3] = [DataCodec::Xor, DataCodec::Add, DataCodec::Poly];
}

/// Multiplicative inverse of odd `a` modulo 2^64.
pub(crate) fn inverse_odd(a: u64) -> u64 {
    debug_assert!(a & 1 == 1);
    let mut x = a;
    for _ in 0..6 {
        x = x.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(x)));
    }
    x
}

struct Codec {
    kind: DataCodec,
    a: u64,
    b: u64,
}

impl Codec {
    fn encode_value(&self, v: u64) -> u64 {
        match self.kind {
            DataCodec::Xor => v ^ self.b,
            DataCodec::Add => v.wrapping_add(self.b),
            DataCodec::Poly => v.wrapping_mul(self.a).wrapping_add(self.b),
        }
    }

    /// `t = enc(src)`.
    fn encode(&self, t: Reg, src: Reg) -> Vec<Inst> {
        let b = Src::Imm(self.b);
        match self.kind {
            DataCodec::Xor => vec![Inst::Bin { op: BinOp::Xor, dst: t, lhs: src, rhs: b }],
            DataCodec::Add => vec![Inst::Bin { op: BinOp::Add, dst: t, lhs: src, rhs: b }],
            DataCodec::Poly => vec![
                Inst::Bin { op: BinOp::Mul, dst: t, lhs: src, rhs: Src::Imm(self.a) },
                Inst::Bin { op: BinOp::Add, dst: t, lhs: t, rhs: b },
            ],
        }
    }

    /// `r = dec(r)`.
    fn decode(&self, r: Reg) -> Vec<Inst> {
        let b = Src::Imm(self.b);
        match self.kind {
            DataCodec::Xor => vec![Inst::Bin { op: BinOp::Xor, dst: r, lhs: r, rhs: b }],
            DataCodec::Add => vec![Inst::Bin { op: BinOp::Sub, dst: r, lhs: r, rhs: b }],
            DataCodec::Poly => vec![
                Inst::Bin { op: BinOp::Sub, dst: r, lhs: r, rhs: b },
                Inst::Bin { op: BinOp::Mul, dst: r, lhs: r, rhs: Src::Imm(inverse_odd(self.a)) },
            ],
        }
    }
}

/// Keeps one scalar memory variable encoded at rest: every store writes
/// `enc(v)` and every load is followed by `dec`. The variable is a cell
/// `[base + d]` where `base` is assigned exactly once, by a `movimm` in the
/// entry block, and never written elsewhere. The cell is seeded with `enc(0)`
/// right after `base` is set. Cells in the output region are never chosen.
/// Other accesses must not alias the cell.
pub fn encode_data(p: &Program, func: &str, codec: DataCodec, rng: &mut ChaCha8Rng) -> Result<Program, ObfError> {
    let fi = function_index(p, func)?;
    let f = &p.functions[fi];
    let none = || ObfError::NoDataVariable(func.to_string());
    // The seeding store must run exactly once.
    if f.blocks.iter().any(|b| b.term.targets().contains(&f.entry_label())) {
        return Err(none());
    }

    // Base registers defined once, by movimm in the entry block.
    let mut defs = [0usize; NUM_REGS];
    let mut movimm_at: [Option<(usize, u64)>; NUM_REGS] = [None; NUM_REGS];
    for (bi, b) in f.blocks.iter().enumerate() {
        for (i, inst) in b.insts.iter().enumerate() {
            if let Some(d) = inst.def_reg() {
                defs[d.0 as usize] += 1;
                if let (0, Inst::MovImm { imm, .. }) = (bi, inst) {
                    movimm_at[d.0 as usize] = Some((i, *imm));
                }
            }
        }
        if let crate::mir::Terminator::Call { .. } = b.term {
            defs[0] += 1;
        }
    }
    let param = |r: usize| r < f.arity;
    let stable = |r: Reg| defs[r.0 as usize] == 1 && movimm_at[r.0 as usize].is_some() && !param(r.0 as usize);
    let mut cells: BTreeSet<(u8, i64)> = BTreeSet::new();
    for b in &f.blocks {
        for inst in &b.insts {
            if let Inst::Load { addr, .. } | Inst::Store { addr, .. } = inst {
                // Output cells are observable and stay plain.
                let plain = |(_, v): (usize, u64)| {
                    let a = v.wrapping_add(addr.disp as u64);
                    a < OUTPUT_BASE && a % 8 == 0
                };
                if stable(addr.base) && movimm_at[addr.base.0 as usize].is_some_and(plain) {
                    cells.insert((addr.base.0, addr.disp));
                }
            }
        }
    }
    let cells: Vec<(u8, i64)> = cells.into_iter().collect();
    let &(base, disp) = cells.choose(rng).ok_or_else(none)?;
    let base = Reg(base);
    let is_cell = |m: &MemRef| m.base == base && m.disp == disp;

    let a = rng.gen::<u64>() | 1;
    let codec = Codec { kind: codec, a, b: rng.gen_range(1..u64::MAX) };
    let live = Liveness::compute(f, &|n| p.arity_of(n));
    let mut g = f.clone();
    for (bi, block) in f.blocks.iter().enumerate() {
        let after = live_after_each(f, bi, &live);
        let mut out = Vec::new();
        for (i, inst) in block.insts.iter().enumerate() {
            match inst {
                Inst::Store { addr, src } if is_cell(addr) => {
                    let t = *scratch_after(inst, after[i]).iter().find(|&&r| r != base).ok_or_else(none)?;
                    out.extend(codec.encode(t, *src));
                    out.push(Inst::Store { addr: *addr, src: t });
                }
                Inst::Load { dst, addr } if is_cell(addr) => {
                    out.push(inst.clone());
                    out.extend(codec.decode(*dst));
                }
                _ => {
                    out.push(inst.clone());
                    if bi == 0 && movimm_at[base.0 as usize].map(|m| m.0) == Some(i) {
                        let t = *scratch_after(inst, after[i]).iter().find(|&&r| r != base).ok_or_else(none)?;
                        out.push(Inst::MovImm { dst: t, imm: codec.encode_value(0) });
                        out.push(Inst::Store { addr: MemRef { base, disp }, src: t });
                    }
                }
            }
        }
        g.blocks[bi].insts = out;
    }
    let mut q = p.clone();
    q.functions[fi] = g;
    Ok(q)
}
