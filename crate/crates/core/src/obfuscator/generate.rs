//! Random structured programs: an entry function `main(2 args)` with
//! conditionals, bounded loops, global and array memory, output stores and
//! calls to small branch-free helpers.
//!
//! Register use in `main`: `r0..r7` hold values, `r8` points at the output
//! region and `r9` at the data region. `r10..r15` are never touched, which
//! leaves room for the obfuscator's scratch needs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::EnvDomain;
use crate::mir::{
    BasicBlock, BinOp, Cond, Function, Inst, MemRef, Program, Reg, Src, Terminator, DATA_BASE, DEFAULT_BASE_ADDRESS,
    OUTPUT_BASE,
};

const OUT: Reg = Reg(8);
const DATA: Reg = Reg(9);
const VARS: u8 = 8;
/// Scalars live in `DATA_BASE + 8 * 0..SCALARS`; arrays of 8 words follow.
const SCALARS: i64 = 16;
const ARRAYS: i64 = 4;
const ARRAY_BASE: i64 = 0x100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenConfig {
    /// Range of conditional constructs (ifs and loops) in `main`.
    pub min_branches: usize,
    pub max_branches: usize,
    pub max_depth: usize,
    pub max_helpers: usize,
    /// Environment slots ordinary code may read.
    pub env_slots: u8,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { min_branches: 2, max_branches: 5, max_depth: 2, max_helpers: 2, env_slots: 8 }
    }
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: GenConfig,
    done: Vec<BasicBlock>,
    label: String,
    insts: Vec<Inst>,
    next_label: usize,
    locked: Vec<Reg>,
    branches_left: usize,
    helpers: Vec<(String, usize)>,
    /// Variables that may depend on the inputs or free environment slots.
    tainted: u16,
    mem_tainted: bool,
}

impl Gen<'_> {
    fn fresh(&mut self) -> String {
        self.next_label += 1;
        format!("b{}", self.next_label)
    }

    fn close(&mut self, term: Terminator, next: String) {
        let label = std::mem::replace(&mut self.label, next);
        let insts = std::mem::take(&mut self.insts);
        self.done.push(BasicBlock { label, insts, term });
    }

    fn is_tainted(&self, r: Reg) -> bool {
        self.tainted & (1 << r.0) != 0
    }

    fn set_taint(&mut self, r: Reg, t: bool) {
        if t {
            self.tainted |= 1 << r.0;
        } else {
            self.tainted &= !(1 << r.0);
        }
    }

    fn emit(&mut self, inst: Inst) {
        match inst {
            Inst::Bin { dst, lhs, rhs, .. } => {
                let t = self.is_tainted(lhs) || matches!(rhs, Src::Reg(r) if self.is_tainted(r));
                self.set_taint(dst, t);
            }
            Inst::Un { dst, src, .. } => self.set_taint(dst, self.is_tainted(src)),
            Inst::MovImm { dst, .. } => self.set_taint(dst, false),
            Inst::Load { dst, .. } => self.set_taint(dst, self.mem_tainted),
            Inst::Store { src, .. } => self.mem_tainted |= self.is_tainted(src),
            Inst::GetEnv { dst, slot } => {
                let fixed = EnvDomain::standard().fixed().iter().any(|&(s, _)| s == slot);
                self.set_taint(dst, !fixed);
            }
            _ => {}
        }
        self.insts.push(inst);
    }

    /// Taint state to merge at a join point.
    fn snapshot(&self) -> (u16, bool) {
        (self.tainted, self.mem_tainted)
    }

    fn join(&mut self, other: (u16, bool)) {
        self.tainted |= other.0;
        self.mem_tainted |= other.1;
    }

    fn any_var(&mut self) -> Reg {
        Reg(self.rng.gen_range(0..VARS))
    }

    fn free_var(&mut self) -> Option<Reg> {
        let free: Vec<Reg> = (0..VARS).map(Reg).filter(|r| !self.locked.contains(r)).collect();
        free.choose(self.rng).copied()
    }

    /// A variable other than `r`, so `sub`, `xor` and `cmp` never see equal operands.
    fn other_var(&mut self, r: Reg) -> Reg {
        Reg((r.0 + self.rng.gen_range(1..VARS)) % VARS)
    }

    fn small_imm(&mut self) -> u64 {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(0..16),
            1 => self.rng.gen_range(0..256),
            2 => self.rng.gen_range(0..1 << 16),
            _ => self.rng.gen(),
        }
    }

    fn alu(&mut self, dst: Reg) {
        // Rough operator mix of compiled integer code.
        const OPS: [(BinOp, u32); 10] = [
            (BinOp::Add, 30),
            (BinOp::Sub, 14),
            (BinOp::And, 10),
            (BinOp::Or, 5),
            (BinOp::Xor, 5),
            (BinOp::Shl, 6),
            (BinOp::Shr, 6),
            (BinOp::Mul, 6),
            (BinOp::Udiv, 2),
            (BinOp::Urem, 2),
        ];
        let op = OPS.choose_weighted(self.rng, |o| o.1).expect("non-empty").0;
        let lhs = self.any_var();
        let rhs = match op {
            BinOp::Shl | BinOp::Shr => Src::Imm(self.rng.gen_range(1..16)),
            BinOp::Udiv | BinOp::Urem => Src::Imm(self.rng.gen_range(2..32)),
            _ if self.rng.gen_bool(0.5) => Src::Reg(self.other_var(lhs)),
            _ => Src::Imm(self.small_imm()),
        };
        self.emit(Inst::Bin { op, dst, lhs, rhs });
    }

    fn stmt(&mut self, depth: usize) {
        let Some(dst) = self.free_var() else { return };
        let can_branch = depth < self.cfg.max_depth && self.branches_left > 0;
        match self.rng.gen_range(0..100) {
            0..=34 => self.alu(dst),
            35..=39 => {
                let imm = self.small_imm();
                self.emit(Inst::MovImm { dst, imm });
            }
            40..=49 => {
                let disp = 8 * self.rng.gen_range(0..SCALARS);
                self.emit(Inst::Load { dst, addr: MemRef { base: DATA, disp } });
            }
            50..=57 => {
                let disp = 8 * self.rng.gen_range(0..SCALARS);
                let src = self.any_var();
                self.emit(Inst::Store { addr: MemRef { base: DATA, disp }, src });
            }
            58..=63 => self.array_access(dst),
            64..=67 => {
                let disp = 8 * self.rng.gen_range(0..16);
                let src = self.any_var();
                self.emit(Inst::Store { addr: MemRef { base: OUT, disp }, src });
            }
            68..=70 => {
                let slot = self.rng.gen_range(0..self.cfg.env_slots);
                self.emit(Inst::GetEnv { dst, slot });
            }
            71..=76 if !self.helpers.is_empty() => self.call(dst),
            77..=90 if can_branch => self.if_stmt(depth),
            91..=99 if can_branch => self.loop_stmt(depth),
            _ => self.alu(dst),
        }
    }

    fn array_access(&mut self, dst: Reg) {
        let idx = self.any_var();
        let arr = ARRAY_BASE + 64 * self.rng.gen_range(0..ARRAYS);
        self.emit(Inst::Bin { op: BinOp::And, dst, lhs: idx, rhs: Src::Imm(7) });
        self.emit(Inst::Bin { op: BinOp::Shl, dst, lhs: dst, rhs: Src::Imm(3) });
        self.emit(Inst::Bin { op: BinOp::Add, dst, lhs: dst, rhs: Src::Reg(DATA) });
        let addr = MemRef { base: dst, disp: arr };
        if self.rng.gen_bool(0.5) {
            self.emit(Inst::Load { dst, addr });
        } else {
            let src = self.any_var();
            if src != dst {
                self.emit(Inst::Store { addr, src });
            } else {
                self.emit(Inst::Load { dst, addr });
            }
        }
    }

    fn call(&mut self, dst: Reg) {
        if self.locked.contains(&Reg(0)) || self.locked.contains(&Reg(1)) {
            return self.alu(dst);
        }
        let (name, arity) = self.helpers.choose(self.rng).cloned().expect("helpers exist");
        for a in 0..arity as u8 {
            let src = self.any_var();
            if src != Reg(a) {
                self.emit(Inst::Un { op: crate::mir::UnOp::Mov, dst: Reg(a), src });
            }
        }
        let t = (0..arity as u8).any(|a| self.is_tainted(Reg(a)));
        let then = self.fresh();
        self.close(Terminator::Call { callee: name, then: then.clone() }, then);
        self.set_taint(Reg(0), t);
        if dst != Reg(0) {
            self.emit(Inst::Un { op: crate::mir::UnOp::Mov, dst, src: Reg(0) });
        }
    }

    fn condition(&mut self) -> Cond {
        let tainted: Vec<Reg> = (0..VARS).map(Reg).filter(|&r| self.is_tainted(r)).collect();
        let lhs = match tainted.choose(self.rng) {
            Some(&r) => r,
            None => self.any_var(),
        };
        let rhs = if self.rng.gen_bool(0.5) { Src::Reg(self.other_var(lhs)) } else { Src::Imm(self.small_imm()) };
        self.emit(Inst::Cmp { lhs, rhs });
        *[Cond::Eq, Cond::Ne, Cond::Ult, Cond::Slt, Cond::Uge, Cond::Sge].choose(self.rng).expect("non-empty")
    }

    fn body(&mut self, depth: usize) {
        for _ in 0..self.rng.gen_range(1..=3) {
            self.stmt(depth);
        }
    }

    fn if_stmt(&mut self, depth: usize) {
        self.branches_left -= 1;
        let cond = self.condition();
        let (then, join) = (self.fresh(), self.fresh());
        if self.rng.gen_bool(0.6) {
            let els = self.fresh();
            let before = self.snapshot();
            self.close(Terminator::CondJump { cond, taken: then.clone(), fallthrough: els.clone() }, then);
            self.body(depth + 1);
            let after_then = self.snapshot();
            self.close(Terminator::Jump(join.clone()), els);
            (self.tainted, self.mem_tainted) = before;
            self.body(depth + 1);
            self.join(after_then);
        } else {
            let before = self.snapshot();
            self.close(Terminator::CondJump { cond, taken: then.clone(), fallthrough: join.clone() }, then);
            self.body(depth + 1);
            self.join(before);
        }
        self.close(Terminator::Jump(join.clone()), join);
    }

    fn loop_stmt(&mut self, depth: usize) {
        let Some(ctr) = self.free_var() else { return };
        self.locked.push(ctr);
        self.branches_left -= 1;
        self.emit(Inst::MovImm { dst: ctr, imm: 0 });
        let bound = match self.free_var() {
            Some(b) if self.rng.gen_bool(0.5) => {
                let src = self.any_var();
                let mask = *[3u64, 7].choose(self.rng).expect("non-empty");
                self.emit(Inst::Bin { op: BinOp::And, dst: b, lhs: src, rhs: Src::Imm(mask) });
                self.locked.push(b);
                Src::Reg(b)
            }
            _ => Src::Imm(self.rng.gen_range(1..=6)),
        };
        let (head, body, exit) = (self.fresh(), self.fresh(), self.fresh());
        self.close(Terminator::Jump(head.clone()), head.clone());
        self.emit(Inst::Cmp { lhs: ctr, rhs: bound });
        self.close(Terminator::CondJump { cond: Cond::Uge, taken: exit.clone(), fallthrough: body.clone() }, body);
        let before = self.snapshot();
        self.body(depth + 1);
        // The exit is reached after zero or more iterations.
        self.join(before);
        self.emit(Inst::Bin { op: BinOp::Add, dst: ctr, lhs: ctr, rhs: Src::Imm(1) });
        self.close(Terminator::Jump(head), exit);
        if let Src::Reg(b) = bound {
            self.locked.retain(|&r| r != b);
        }
        self.locked.retain(|&r| r != ctr);
    }
}

fn helper(rng: &mut ChaCha8Rng, name: String, arity: usize) -> Function {
    const OPS: [BinOp; 7] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Xor, BinOp::And, BinOp::Or, BinOp::Shr];
    let mut insts = Vec::new();
    let n = rng.gen_range(2..=5);
    // Each step reads the previous result, so the return value depends on r0.
    let mut lhs = Reg(0);
    for _ in 0..n {
        let dst = Reg(rng.gen_range(0..4));
        let op = *OPS.choose(rng).expect("non-empty");
        let rhs = if op == BinOp::Shr {
            Src::Imm(rng.gen_range(1..16))
        } else if rng.gen_bool(0.5) && arity > 1 && lhs.0 < arity as u8 {
            Src::Reg(Reg((lhs.0 + 1) % arity as u8))
        } else {
            Src::Imm(rng.gen_range(1..1 << 12))
        };
        insts.push(Inst::Bin { op, dst, lhs, rhs });
        lhs = dst;
    }
    let ret = lhs;
    Function { name, arity, blocks: vec![BasicBlock { label: "entry".into(), insts, term: Terminator::Return(ret) }] }
}

/// Builds a random program whose entry function has between
/// `cfg.min_branches` and `cfg.max_branches` conditional constructs.
pub fn generate_program(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Program {
    let n_helpers = rng.gen_range(0..=cfg.max_helpers);
    let mut functions = Vec::new();
    let mut helpers = Vec::new();
    for i in 0..n_helpers {
        let arity = rng.gen_range(1..=2);
        let name = format!("h{i}");
        helpers.push((name.clone(), arity));
        functions.push(helper(rng, name, arity));
    }
    let branches = rng.gen_range(cfg.min_branches..=cfg.max_branches);
    let mut g = Gen {
        rng,
        cfg: *cfg,
        done: Vec::new(),
        label: "entry".into(),
        insts: Vec::new(),
        next_label: 0,
        locked: Vec::new(),
        branches_left: branches,
        helpers,
        tainted: 0b11,
        mem_tainted: false,
    };
    g.emit(Inst::MovImm { dst: DATA, imm: DATA_BASE });
    g.emit(Inst::MovImm { dst: OUT, imm: OUTPUT_BASE });
    for r in 2..VARS {
        let inst = if g.rng.gen_bool(0.5) {
            Inst::MovImm { dst: Reg(r), imm: g.small_imm() }
        } else {
            let op = *[BinOp::Add, BinOp::Xor, BinOp::Mul, BinOp::Sub].choose(g.rng).expect("non-empty");
            let lhs = Reg(g.rng.gen_range(0..2));
            let rhs = Src::Reg(Reg(g.rng.gen_range(0..2)));
            Inst::Bin { op, dst: Reg(r), lhs, rhs }
        };
        g.emit(inst);
    }
    // Interleave straight-line code with every remaining branch construct.
    let mut guard = 0;
    while g.branches_left > 0 && guard < 1000 {
        guard += 1;
        for _ in 0..g.rng.gen_range(0..=3) {
            g.stmt(g.cfg.max_depth);
        }
        if g.rng.gen_bool(0.6) {
            g.if_stmt(0);
        } else {
            g.loop_stmt(0);
        }
    }
    for _ in 0..g.rng.gen_range(1..=3) {
        let disp = 8 * g.rng.gen_range(0..16);
        let src = g.any_var();
        g.emit(Inst::Store { addr: MemRef { base: OUT, disp }, src });
    }
    let ret = g.any_var();
    let last = g.label.clone();
    g.close(Terminator::Return(ret), last);
    let main = Function { name: "main".into(), arity: 2, blocks: g.done };
    functions.insert(0, main);
    Program { functions, base_address: DEFAULT_BASE_ADDRESS, entry: "main".into() }
}
