//! Compact register-based IR.
//!
//! A [`Program`] is a list of functions, each a list of basic blocks ending in
//! exactly one terminator. Integer registers `r0..r15` and the float registers
//! `f0..f7` are 64 bits wide; `cmp` is the only instruction that writes the
//! four flags read by conditional jumps.

mod asm;
mod cfg;
mod interp;

use std::collections::{HashMap, HashSet};
use std::fmt;

pub use asm::{emit_asm, parse_asm, AsmError};
pub use cfg::{
    back_edges, enumerate_predicates, live_after_each, reachable_blocks, successors, Liveness,
    LOC_FLAGS,
};
pub use interp::{
    concrete_run, Executable, Fault, NoTrace, Observation, Outcome, RunError, Tracer, WriteEvent,
};

/// Number of integer registers.
pub const NUM_REGS: usize = 16;
/// Number of float registers.
pub const NUM_FREGS: usize = 8;
/// Number of environment table slots readable through `getenv`.
pub const ENV_SLOTS: usize = 16;
/// Size in bytes of the flat memory.
pub const MEM_SIZE: u64 = 64 * 1024;
/// Stores at or above this address are observable output.
pub const OUTPUT_BASE: u64 = 0xF000;
/// Region reserved for obfuscator-introduced memory traffic (alias and table templates).
pub const SCRATCH_BASE: u64 = 0x8000;
/// Cells the obfuscator seeds from the inputs at entry and opaque predicates read.
pub const OPAQUE_BASE: u64 = 0xB000;
pub const OPAQUE_CELLS: u64 = 8;
/// Region used by bogus stores in dead blocks.
pub const BOGUS_BASE: u64 = 0xC000;
/// Data region used by generated programs.
pub const DATA_BASE: u64 = 0x1000;
/// Default load address.
pub const DEFAULT_BASE_ADDRESS: u64 = 0x40_0000;

/// Environment table supplied at run and analysis time.
pub type Env = [u64; ENV_SLOTS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg(pub u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FReg(pub u8);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Display for FReg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "f{}", self.0)
    }
}

/// Second operand of ALU instructions and `cmp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Src {
    Reg(Reg),
    Imm(u64),
}

impl From<Reg> for Src {
    fn from(r: Reg) -> Self {
        Src::Reg(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Udiv,
    Urem,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub const ALL: [BinOp; 10] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Udiv,
        BinOp::Urem,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Udiv => "udiv",
            BinOp::Urem => "urem",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
        }
    }

    /// Wrapping 64-bit semantics; `None` on division by zero.
    pub fn eval(self, a: u64, b: u64) -> Option<u64> {
        Some(match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Udiv => a.checked_div(b)?,
            BinOp::Urem => a.checked_rem(b)?,
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a.wrapping_shl((b & 63) as u32),
            BinOp::Shr => a.wrapping_shr((b & 63) as u32),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnOp {
    Not,
    Neg,
    Mov,
}

impl UnOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            UnOp::Not => "not",
            UnOp::Neg => "neg",
            UnOp::Mov => "mov",
        }
    }

    pub fn eval(self, a: u64) -> u64 {
        match self {
            UnOp::Not => !a,
            UnOp::Neg => a.wrapping_neg(),
            UnOp::Mov => a,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FBinOp {
    Fadd,
    Fmul,
}

impl FBinOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            FBinOp::Fadd => "fadd",
            FBinOp::Fmul => "fmul",
        }
    }

    pub fn eval(self, a: u64, b: u64) -> u64 {
        let (x, y) = (f64::from_bits(a), f64::from_bits(b));
        match self {
            FBinOp::Fadd => (x + y).to_bits(),
            FBinOp::Fmul => (x * y).to_bits(),
        }
    }
}

/// `fcmp` result: 0 equal, 1 less, 2 greater, 3 unordered.
pub fn fcmp_code(a: u64, b: u64) -> u64 {
    let (x, y) = (f64::from_bits(a), f64::from_bits(b));
    match x.partial_cmp(&y) {
        Some(std::cmp::Ordering::Equal) => 0,
        Some(std::cmp::Ordering::Less) => 1,
        Some(std::cmp::Ordering::Greater) => 2,
        None => 3,
    }
}

/// Signed integer to float conversion, as bits.
pub fn itof_bits(a: u64) -> u64 {
    (a as i64 as f64).to_bits()
}

/// Memory operand `[base+disp]`. Accesses are 8 bytes and must be 8-aligned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemRef {
    pub base: Reg,
    pub disp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Inst {
    Bin { op: BinOp, dst: Reg, lhs: Reg, rhs: Src },
    Un { op: UnOp, dst: Reg, src: Reg },
    MovImm { dst: Reg, imm: u64 },
    Cmp { lhs: Reg, rhs: Src },
    Load { dst: Reg, addr: MemRef },
    Store { addr: MemRef, src: Reg },
    FBin { op: FBinOp, dst: FReg, lhs: FReg, rhs: FReg },
    Fcmp { dst: Reg, lhs: FReg, rhs: FReg },
    Itof { dst: FReg, src: Reg },
    GetEnv { dst: Reg, slot: u8 },
}

impl Inst {
    /// Integer register written, if any.
    pub fn def_reg(&self) -> Option<Reg> {
        match *self {
            Inst::Bin { dst, .. }
            | Inst::Un { dst, .. }
            | Inst::MovImm { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::Fcmp { dst, .. }
            | Inst::GetEnv { dst, .. } => Some(dst),
            _ => None,
        }
    }

    /// Integer registers read.
    pub fn use_regs(&self) -> Vec<Reg> {
        match *self {
            Inst::Bin { lhs, rhs, .. } | Inst::Cmp { lhs, rhs } => match rhs {
                Src::Reg(r) => vec![lhs, r],
                Src::Imm(_) => vec![lhs],
            },
            Inst::Un { src, .. } | Inst::Itof { src, .. } => vec![src],
            Inst::Load { addr, .. } => vec![addr.base],
            Inst::Store { addr, src } => vec![addr.base, src],
            _ => Vec::new(),
        }
    }
}

/// Flag condition read by `jcc`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Ult,
    Slt,
    Uge,
    Sge,
}

impl Cond {
    pub const ALL: [Cond; 6] = [Cond::Eq, Cond::Ne, Cond::Ult, Cond::Slt, Cond::Uge, Cond::Sge];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Ult => "ult",
            Cond::Slt => "slt",
            Cond::Uge => "uge",
            Cond::Sge => "sge",
        }
    }

    pub fn negate(self) -> Cond {
        match self {
            Cond::Eq => Cond::Ne,
            Cond::Ne => Cond::Eq,
            Cond::Ult => Cond::Uge,
            Cond::Uge => Cond::Ult,
            Cond::Slt => Cond::Sge,
            Cond::Sge => Cond::Slt,
        }
    }

    pub fn holds(self, flags: Flags) -> bool {
        match self {
            Cond::Eq => flags.zf,
            Cond::Ne => !flags.zf,
            Cond::Ult => flags.cf,
            Cond::Uge => !flags.cf,
            Cond::Slt => flags.sf != flags.of,
            Cond::Sge => flags.sf == flags.of,
        }
    }
}

/// Flags written by `cmp a, b` from `a - b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Flags {
    pub zf: bool,
    pub sf: bool,
    pub cf: bool,
    pub of: bool,
}

impl Flags {
    pub fn from_cmp(a: u64, b: u64) -> Flags {
        let res = a.wrapping_sub(b);
        Flags {
            zf: res == 0,
            sf: (res as i64) < 0,
            cf: a < b,
            of: (a as i64).overflowing_sub(b as i64).1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Terminator {
    Jump(String),
    CondJump { cond: Cond, taken: String, fallthrough: String },
    Return(Reg),
    Call { callee: String, then: String },
}

impl Terminator {
    /// Successor labels in DFS child order (taken before fallthrough).
    pub fn targets(&self) -> Vec<&str> {
        match self {
            Terminator::Jump(l) => vec![l],
            Terminator::CondJump { taken, fallthrough, .. } => vec![taken, fallthrough],
            Terminator::Return(_) => Vec::new(),
            Terminator::Call { then, .. } => vec![then],
        }
    }

    pub fn targets_mut(&mut self) -> Vec<&mut String> {
        match self {
            Terminator::Jump(l) => vec![l],
            Terminator::CondJump { taken, fallthrough, .. } => vec![taken, fallthrough],
            Terminator::Return(_) => Vec::new(),
            Terminator::Call { then, .. } => vec![then],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BasicBlock {
    pub label: String,
    pub insts: Vec<Inst>,
    pub term: Terminator,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Function {
    pub name: String,
    /// Inputs arrive in `r0..r{arity-1}`.
    pub arity: usize,
    /// The first block is the entry block.
    pub blocks: Vec<BasicBlock>,
}

impl Function {
    pub fn entry_label(&self) -> &str {
        &self.blocks[0].label
    }

    pub fn params(&self) -> Vec<Reg> {
        (0..self.arity as u8).map(Reg).collect()
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn block(&self, label: &str) -> Option<&BasicBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    /// Label-to-index map.
    pub fn label_map(&self) -> HashMap<&str, usize> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (b.label.as_str(), i))
            .collect()
    }

    /// A label not yet used in this function, of the form `<prefix><n>`.
    pub fn fresh_label(&self, prefix: &str) -> String {
        let used: HashSet<&str> = self.blocks.iter().map(|b| b.label.as_str()).collect();
        (0..)
            .map(|n| format!("{prefix}{n}"))
            .find(|l| !used.contains(l.as_str()))
            .expect("unbounded label space")
    }

    pub fn cond_jump_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b.term, Terminator::CondJump { .. }))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Program {
    pub functions: Vec<Function>,
    pub base_address: u64,
    pub entry: String,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn entry_function(&self) -> &Function {
        self.function(&self.entry).expect("validated program has an entry function")
    }

    pub fn arity_of(&self, name: &str) -> usize {
        self.function(name).map(|f| f.arity).unwrap_or(0)
    }

    /// Concrete address of every block, keyed by (function, label). Each
    /// instruction and terminator occupies 4 bytes; functions start 16-aligned.
    pub fn block_addresses(&self) -> HashMap<(String, String), u64> {
        let mut out = HashMap::new();
        let mut addr = self.base_address;
        for f in &self.functions {
            addr = (addr + 15) & !15;
            for b in &f.blocks {
                out.insert((f.name.clone(), b.label.clone()), addr);
                addr += 4 * (b.insts.len() as u64 + 1);
            }
        }
        out
    }

    /// Total number of conditional jumps across all functions.
    pub fn predicate_count(&self) -> usize {
        self.functions.iter().map(Function::cond_jump_count).sum()
    }

    /// Checks the structural invariants: unique names, one existing entry
    /// function, resolvable labels and call targets, sane register numbers.
    pub fn validate(&self) -> Result<(), AsmError> {
        let mut names = HashSet::new();
        for f in &self.functions {
            if !names.insert(f.name.as_str()) {
                return Err(AsmError::Invalid(format!("duplicate function `{}`", f.name)));
            }
        }
        if !names.contains(self.entry.as_str()) {
            return Err(AsmError::Invalid(format!("entry function `{}` not defined", self.entry)));
        }
        for f in &self.functions {
            if f.blocks.is_empty() {
                return Err(AsmError::Invalid(format!("function `{}` has no blocks", f.name)));
            }
            if f.arity > NUM_REGS {
                return Err(AsmError::Invalid(format!("function `{}` has too many args", f.name)));
            }
            let labels = f.label_map();
            if labels.len() != f.blocks.len() {
                return Err(AsmError::Invalid(format!("duplicate label in `{}`", f.name)));
            }
            for b in &f.blocks {
                for t in b.term.targets() {
                    if !labels.contains_key(t) {
                        return Err(AsmError::UndefinedLabel {
                            function: f.name.clone(),
                            label: t.to_string(),
                        });
                    }
                }
                if let Terminator::Call { callee, .. } = &b.term {
                    if !names.contains(callee.as_str()) {
                        return Err(AsmError::Invalid(format!("call to undefined `{callee}`")));
                    }
                }
                if let Terminator::Return(r) = b.term {
                    check_reg(r)?;
                }
                for i in &b.insts {
                    check_inst(i)?;
                }
            }
        }
        Ok(())
    }
}

fn check_reg(r: Reg) -> Result<(), AsmError> {
    if (r.0 as usize) < NUM_REGS {
        Ok(())
    } else {
        Err(AsmError::Invalid(format!("register {r} out of range")))
    }
}

fn check_freg(r: FReg) -> Result<(), AsmError> {
    if (r.0 as usize) < NUM_FREGS {
        Ok(())
    } else {
        Err(AsmError::Invalid(format!("float register {r} out of range")))
    }
}

fn check_inst(i: &Inst) -> Result<(), AsmError> {
    if let Some(r) = i.def_reg() {
        check_reg(r)?;
    }
    for r in i.use_regs() {
        check_reg(r)?;
    }
    match *i {
        Inst::FBin { dst, lhs, rhs, .. } => {
            check_freg(dst)?;
            check_freg(lhs)?;
            check_freg(rhs)
        }
        Inst::Fcmp { lhs, rhs, .. } => {
            check_freg(lhs)?;
            check_freg(rhs)
        }
        Inst::Itof { dst, .. } => check_freg(dst),
        Inst::GetEnv { slot, .. } if slot as usize >= ENV_SLOTS => {
            Err(AsmError::Invalid(format!("getenv slot {slot} out of range")))
        }
        _ => Ok(()),
    }
}

/// Identifies one conditional jump: the `ordinal`-th CondJump of `function`
/// counting blocks in order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PredicateId {
    pub function: String,
    pub block: String,
    pub ordinal: usize,
}

impl fmt::Display for PredicateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.function, self.block, self.ordinal)
    }
}

impl std::str::FromStr for PredicateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.rsplitn(3, ':');
        let ordinal = parts.next().and_then(|o| o.parse().ok());
        let block = parts.next();
        let function = parts.next();
        match (function, block, ordinal) {
            (Some(f), Some(b), Some(o)) => Ok(PredicateId {
                function: f.to_string(),
                block: b.to_string(),
                ordinal: o,
            }),
            _ => Err(format!("malformed predicate id `{s}`")),
        }
    }
}
