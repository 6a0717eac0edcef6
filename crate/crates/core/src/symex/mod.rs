//! Thresholded static symbolic execution.
//!
//! Paths from a function's entry block to the block holding a target
//! predicate are enumerated depth-first, bounded by a per-back-edge loop
//! budget and a total path budget. Each path is then interpreted with
//! symbolic inputs into a [`SymbolicState`]. No feasibility checking is done.

mod expr;
mod replay;

use std::collections::{HashMap, HashSet};

use thiserror::Error;

pub use expr::{mask, Expr, OpKind};
pub use replay::{replay, Replay};

use crate::mir::{
    back_edges, successors, Cond, Function, Inst, PredicateId, Program, Src, Terminator, NUM_FREGS, NUM_REGS,
};

/// Upper bound on DFS node expansions per enumeration; hitting it marks the
/// result truncated.
pub const MAX_EXPANSIONS: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PathBudget {
    /// Maximum traversals of any single back-edge per path.
    pub alpha_loop: u32,
    /// Maximum number of paths returned.
    pub alpha_paths: usize,
}

impl Default for PathBudget {
    fn default() -> Self {
        PathBudget { alpha_loop: 2, alpha_paths: 8 }
    }
}

impl PathBudget {
    pub fn new(alpha_loop: u32, alpha_paths: usize) -> Result<PathBudget, SymexError> {
        if alpha_loop == 0 || alpha_paths == 0 {
            return Err(SymexError::BadBudget);
        }
        Ok(PathBudget { alpha_loop, alpha_paths })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymexError {
    #[error("no function `{0}`")]
    UnknownFunction(String),
    #[error("predicate {0} does not exist")]
    UnknownPredicate(PredicateId),
    #[error("path is not a valid CFG walk ending at a conditional jump: {0}")]
    BadPath(String),
    #[error("path budget thresholds must be at least 1")]
    BadBudget,
}

/// Block labels from the entry block to the predicate's block.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Path(pub Vec<String>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathSet {
    pub paths: Vec<Path>,
    /// More paths existed than the budget allowed, or the expansion cap was hit.
    pub truncated: bool,
}

/// Destination of one SSA assignment.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Dest {
    Id { name: String, size: u32 },
    Mem { addr: Expr, size: u32, version: usize },
}

impl Dest {
    pub fn render(&self) -> String {
        match self {
            Dest::Id { name, size } => format!("ExprId('{name}', size={size})"),
            Dest::Mem { addr, size, .. } => format!("ExprMem({}, size={size})", addr.render()),
        }
    }

    pub fn render_infix(&self) -> String {
        match self {
            Dest::Id { name, .. } => name.clone(),
            Dest::Mem { addr, size, .. } => format!("@{size}[{}]", addr.render_infix()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Assignment {
    pub dest: Dest,
    pub value: Expr,
}

/// Name of the branch-target pseudo register.
pub const IRDST: &str = "IRDst";
/// Flag names in assignment order after each `cmp`.
pub const FLAG_NAMES: [&str; 4] = ["zf", "nf", "cf", "of"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolicState {
    /// SSA assignments in execution order; every destination is unique.
    pub assignments: Vec<Assignment>,
    /// Indices into `assignments` of the flag definitions read by the final branch.
    pub flag_defs: Vec<usize>,
    /// Final branch target: an `Int` when the condition folded, else a `Cond`.
    pub predicate_dst: Expr,
    pub path: Path,
}

impl SymbolicState {
    /// Branch direction the state commits to, when the target folded.
    pub fn folded_target(&self) -> Option<u64> {
        self.predicate_dst.as_int()
    }
}

/// Per-program analysis context caching block addresses.
pub struct Analyzer<'p> {
    program: &'p Program,
    addresses: HashMap<(String, String), u64>,
}

impl<'p> Analyzer<'p> {
    pub fn new(program: &'p Program) -> Analyzer<'p> {
        Analyzer { program, addresses: program.block_addresses() }
    }

    pub fn program(&self) -> &'p Program {
        self.program
    }

    fn function(&self, name: &str) -> Result<&'p Function, SymexError> {
        self.program.function(name).ok_or_else(|| SymexError::UnknownFunction(name.to_string()))
    }

    pub fn enumerate_paths(&self, target: &PredicateId, budget: PathBudget) -> Result<PathSet, SymexError> {
        let f = self.function(&target.function)?;
        enumerate_paths(f, target, budget)
    }

    pub fn exec_path(&self, function: &str, path: &Path) -> Result<SymbolicState, SymexError> {
        let f = self.function(function)?;
        let addr = |label: &str| self.addresses[&(f.name.clone(), label.to_string())];
        exec_path_with(f, path, &addr)
    }

    /// One symbolic state per enumerated path.
    pub fn collect_states(&self, target: &PredicateId, budget: PathBudget) -> Result<Vec<SymbolicState>, SymexError> {
        let paths = self.enumerate_paths(target, budget)?;
        paths.paths.iter().map(|p| self.exec_path(&target.function, p)).collect()
    }
}

fn target_block(f: &Function, target: &PredicateId) -> Result<usize, SymexError> {
    let idx = f.block_index(&target.block).ok_or_else(|| SymexError::UnknownPredicate(target.clone()))?;
    if !matches!(f.blocks[idx].term, Terminator::CondJump { .. }) {
        return Err(SymexError::UnknownPredicate(target.clone()));
    }
    Ok(idx)
}

/// Depth-first enumeration of entry-to-target paths, taken edge first.
pub fn enumerate_paths(f: &Function, target: &PredicateId, budget: PathBudget) -> Result<PathSet, SymexError> {
    if budget.alpha_loop == 0 || budget.alpha_paths == 0 {
        return Err(SymexError::BadBudget);
    }
    let t = target_block(f, target)?;
    let n = f.blocks.len();
    let succ: Vec<Vec<usize>> = (0..n).map(|b| successors(f, b)).collect();

    // Blocks from which the target can be reached.
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (b, ss) in succ.iter().enumerate() {
        for &s in ss {
            preds[s].push(b);
        }
    }
    let mut useful = vec![false; n];
    let mut work = vec![t];
    while let Some(b) = work.pop() {
        if !std::mem::replace(&mut useful[b], true) {
            work.extend(preds[b].iter().copied());
        }
    }
    if !useful[0] {
        return Ok(PathSet { paths: Vec::new(), truncated: false });
    }
    let back = back_edges(f);

    let mut paths = Vec::new();
    let mut truncated = false;
    let mut expansions = 0usize;
    let mut path = vec![0usize];
    let mut uses: HashMap<(usize, usize), u32> = HashMap::new();
    // Stack of child cursors parallel to `path`.
    let mut cursor = vec![0usize];
    let mut arrived = true;
    'dfs: while let Some(&b) = path.last() {
        if arrived {
            arrived = false;
            if b == t {
                if paths.len() == budget.alpha_paths {
                    truncated = true;
                    break 'dfs;
                }
                paths.push(Path(path.iter().map(|&i| f.blocks[i].label.clone()).collect()));
            }
        }
        let top = cursor.len() - 1;
        if cursor[top] < succ[b].len() {
            let s = succ[b][cursor[top]];
            cursor[top] += 1;
            if !useful[s] {
                continue;
            }
            if back.contains(&(b, s)) {
                let c = uses.entry((b, s)).or_insert(0);
                if *c >= budget.alpha_loop {
                    continue;
                }
                *c += 1;
            }
            expansions += 1;
            if expansions > MAX_EXPANSIONS {
                truncated = true;
                break 'dfs;
            }
            path.push(s);
            cursor.push(0);
            arrived = true;
        } else {
            path.pop();
            cursor.pop();
            if let Some(&parent) = path.last() {
                if back.contains(&(parent, b)) {
                    *uses.get_mut(&(parent, b)).expect("counted on entry") -= 1;
                }
            }
        }
    }
    Ok(PathSet { paths, truncated })
}

/// Branch condition as a 1-bit expression over the current flag values.
fn cond_expr(cond: Cond, flags: &[Expr; 4]) -> Expr {
    let [zf, nf, cf, of] = flags.clone();
    let not = |e: Expr| Expr::op(OpKind::Not, vec![e]);
    match cond {
        Cond::Eq => zf,
        Cond::Ne => not(zf),
        Cond::Ult => cf,
        Cond::Uge => not(cf),
        Cond::Slt => Expr::op(OpKind::Xor, vec![nf, of]),
        Cond::Sge => not(Expr::op(OpKind::Xor, vec![nf, of])),
    }
}

struct Machine {
    regs: Vec<Expr>,
    fregs: Vec<Expr>,
    flags: [Expr; 4],
    versions: HashMap<String, usize>,
    stores: Vec<(Expr, Expr)>,
    assignments: Vec<Assignment>,
    flag_defs: Vec<usize>,
    call_count: usize,
    /// SSA name to assigned value, for the identity rules in [`Machine::op`].
    defs: HashMap<String, Expr>,
}

impl Machine {
    fn new(f: &Function) -> Machine {
        let regs = (0..NUM_REGS)
            .map(|i| if i < f.arity { Expr::id(format!("r{i}"), 64) } else { Expr::int(0, 64) })
            .collect();
        Machine {
            regs,
            fregs: vec![Expr::int(0, 64); NUM_FREGS],
            flags: [Expr::int(0, 1), Expr::int(0, 1), Expr::int(0, 1), Expr::int(0, 1)],
            versions: HashMap::new(),
            stores: Vec::new(),
            assignments: Vec::new(),
            flag_defs: Vec::new(),
            call_count: 0,
            defs: HashMap::new(),
        }
    }

    /// Records `base_version = value` and returns what later readers see:
    /// the constant itself, or a reference to the SSA name.
    fn assign(&mut self, base: &str, size: u32, value: Expr) -> Expr {
        let v = self.versions.entry(base.to_string()).or_insert(0);
        *v += 1;
        let name = format!("{base}_{v}");
        let seen = if value.as_int().is_some() { value.clone() } else { Expr::id(name.clone(), size) };
        self.defs.insert(name.clone(), value.clone());
        self.assignments.push(Assignment { dest: Dest::Id { name, size }, value });
        seen
    }

    fn def_of<'a>(&'a self, e: &'a Expr) -> &'a Expr {
        match e {
            Expr::Id { name, .. } => self.defs.get(name).unwrap_or(e),
            _ => e,
        }
    }

    /// [`Expr::op`] plus identities that hold for every valuation: comparing a
    /// term with itself, `x - x`, `x ^ x`, and the low bit of `x * (x + 1)`.
    fn op(&self, op: OpKind, args: Vec<Expr>) -> Expr {
        if let [a, b] = args.as_slice() {
            if a == b {
                let v = match op {
                    OpKind::FlagEqCmp | OpKind::Eq => Some(1),
                    OpKind::FlagSignSub | OpKind::FlagSubCf | OpKind::FlagSubOf | OpKind::Sub | OpKind::Xor => Some(0),
                    _ => None,
                };
                if let Some(v) = v {
                    return Expr::int(v, op.result_size(a.size()));
                }
            }
            if op == OpKind::And && b.as_int() == Some(1) && self.consecutive_product(a) {
                return Expr::int(0, a.size());
            }
        }
        Expr::op(op, args)
    }

    fn consecutive_product(&self, e: &Expr) -> bool {
        let Expr::Op { op: OpKind::Mul, args, .. } = self.def_of(e) else {
            return false;
        };
        let succ = |x: &Expr, y: &Expr| {
            matches!(self.def_of(y), Expr::Op { op: OpKind::Add, args, .. }
                if args.len() == 2 && args[1].as_int() == Some(1) && &args[0] == x)
        };
        match args.as_slice() {
            [x, y] => succ(x, y) || succ(y, x),
            _ => false,
        }
    }

    fn src(&self, s: Src) -> Expr {
        match s {
            Src::Reg(r) => self.regs[r.0 as usize].clone(),
            Src::Imm(v) => Expr::int(v, 64),
        }
    }

    fn address(&self, base: crate::mir::Reg, disp: i64) -> Expr {
        let b = self.regs[base.0 as usize].clone();
        if disp == 0 {
            b
        } else {
            Expr::op(OpKind::Add, vec![b, Expr::int(disp as u64, 64)])
        }
    }

    /// Reads memory through the store log: an exact address match returns the
    /// stored value; distinct constant addresses are skipped; anything else
    /// becomes a guarded choice, bottoming out in the initial memory.
    fn load(&self, addr: &Expr) -> Expr {
        let mut guarded: Vec<(Expr, Expr)> = Vec::new();
        let mut base = Expr::mem(addr.clone(), 64);
        for (waddr, wval) in self.stores.iter().rev() {
            if waddr == addr {
                base = wval.clone();
                break;
            }
            if addr.as_int().is_some() && waddr.as_int().is_some() {
                continue;
            }
            guarded.push((Expr::op(OpKind::Eq, vec![addr.clone(), waddr.clone()]), wval.clone()));
        }
        guarded.into_iter().rev().fold(base, |acc, (c, v)| Expr::cond(c, v, acc))
    }

    fn step(&mut self, inst: &Inst) {
        match *inst {
            Inst::Bin { op, dst, lhs, rhs } => {
                let v = self.op(OpKind::from_binop(op), vec![self.regs[lhs.0 as usize].clone(), self.src(rhs)]);
                self.regs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
            Inst::Un { op, dst, src } => {
                let a = self.regs[src.0 as usize].clone();
                let v = match op {
                    crate::mir::UnOp::Not => Expr::op(OpKind::Not, vec![a]),
                    crate::mir::UnOp::Neg => Expr::op(OpKind::Neg, vec![a]),
                    crate::mir::UnOp::Mov => a,
                };
                self.regs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
            Inst::MovImm { dst, imm } => {
                self.regs[dst.0 as usize] = self.assign(&dst.to_string(), 64, Expr::int(imm, 64));
            }
            Inst::Cmp { lhs, rhs } => {
                let a = self.regs[lhs.0 as usize].clone();
                let b = self.src(rhs);
                self.flag_defs.clear();
                let ops = [OpKind::FlagEqCmp, OpKind::FlagSignSub, OpKind::FlagSubCf, OpKind::FlagSubOf];
                for (i, op) in ops.into_iter().enumerate() {
                    let v = self.op(op, vec![a.clone(), b.clone()]);
                    self.flags[i] = self.assign(FLAG_NAMES[i], 1, v);
                    self.flag_defs.push(self.assignments.len() - 1);
                }
            }
            Inst::Load { dst, addr } => {
                let a = self.address(addr.base, addr.disp);
                let v = self.load(&a);
                self.regs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
            Inst::Store { addr, src } => {
                let a = self.address(addr.base, addr.disp);
                let v = self.regs[src.0 as usize].clone();
                let version = self.assignments.len();
                self.assignments.push(Assignment { dest: Dest::Mem { addr: a.clone(), size: 64, version }, value: v.clone() });
                self.stores.push((a, v));
            }
            Inst::FBin { op, dst, lhs, rhs } => {
                let k = match op {
                    crate::mir::FBinOp::Fadd => OpKind::Fadd,
                    crate::mir::FBinOp::Fmul => OpKind::Fmul,
                };
                let v = Expr::op(k, vec![self.fregs[lhs.0 as usize].clone(), self.fregs[rhs.0 as usize].clone()]);
                self.fregs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
            Inst::Fcmp { dst, lhs, rhs } => {
                let v = Expr::op(
                    OpKind::Fcmp,
                    vec![self.fregs[lhs.0 as usize].clone(), self.fregs[rhs.0 as usize].clone()],
                );
                self.regs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
            Inst::Itof { dst, src } => {
                let v = Expr::op(OpKind::SintToFp, vec![self.regs[src.0 as usize].clone()]);
                self.fregs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
            Inst::GetEnv { dst, slot } => {
                let v = Expr::id(env_symbol(slot), 64);
                self.regs[dst.0 as usize] = self.assign(&dst.to_string(), 64, v);
            }
        }
    }
}

/// Free identifier standing for environment slot `slot`.
pub fn env_symbol(slot: u8) -> String {
    format!("ENV{slot}")
}

pub(crate) const CALL_PREFIX: &str = "RET_";

/// Free identifier standing for the result of the `n`-th call on a path.
pub fn call_symbol(callee: &str, n: usize) -> String {
    format!("{CALL_PREFIX}{callee}_{n}")
}

/// Symbolically interprets `path` through `f`; `addr` maps block labels to
/// concrete addresses.
pub fn exec_path_with(f: &Function, path: &Path, addr: &dyn Fn(&str) -> u64) -> Result<SymbolicState, SymexError> {
    let bad = || SymexError::BadPath(path.0.join(" -> "));
    let map = f.label_map();
    let idx: Vec<usize> = path.0.iter().map(|l| map.get(l.as_str()).copied().ok_or_else(bad)).collect::<Result<_, _>>()?;
    if idx.first() != Some(&0) {
        return Err(bad());
    }
    let mut m = Machine::new(f);
    for (k, &b) in idx.iter().enumerate() {
        let block = &f.blocks[b];
        for inst in &block.insts {
            m.step(inst);
        }
        let last = k + 1 == idx.len();
        if !last {
            let next = &f.blocks[idx[k + 1]].label;
            if !block.term.targets().contains(&next.as_str()) {
                return Err(bad());
            }
            if let Terminator::Call { callee, .. } = &block.term {
                m.call_count += 1;
                let ret = Expr::id(call_symbol(callee, m.call_count), 64);
                m.regs[0] = m.assign("r0", 64, ret);
            }
        } else {
            let Terminator::CondJump { cond, taken, fallthrough } = &block.term else {
                return Err(bad());
            };
            let c = cond_expr(*cond, &m.flags);
            let dst = Expr::cond(c, Expr::int(addr(taken), 64), Expr::int(addr(fallthrough), 64));
            return Ok(SymbolicState {
                assignments: m.assignments,
                flag_defs: m.flag_defs,
                predicate_dst: dst,
                path: path.clone(),
            });
        }
    }
    Err(bad())
}

/// Convenience wrapper: paths then states for `target` in `p`.
pub fn collect_states(p: &Program, target: &PredicateId, budget: PathBudget) -> Result<Vec<SymbolicState>, SymexError> {
    Analyzer::new(p).collect_states(target, budget)
}

/// All distinct SSA destinations; used to check the single-assignment invariant.
pub fn is_ssa(state: &SymbolicState) -> bool {
    let mut seen = HashSet::new();
    state.assignments.iter().all(|a| seen.insert(a.dest.clone()))
}

#[cfg(test)]
mod tests;
