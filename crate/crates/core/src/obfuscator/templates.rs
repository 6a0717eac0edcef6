//! Invariant predicate constructions. Each template emits straight-line code
//! over two input registers `x`, `y` and returns the branch condition; the
//! condition always holds for `OpTrue` templates and never for `OpFalse` ones.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::builder::Builder;
use super::{EnvDomain, Label, OpaqueKind};
use crate::mir::{
    BasicBlock, BinOp::*, Cond, Executable, FBinOp, FReg, Function, Outcome, Program, Reg, Terminator, UnOp, SCRATCH_BASE,
};

pub type BuildFn = fn(&mut Builder, Reg, Reg, &EnvDomain) -> Cond;

pub struct Template {
    pub id: &'static str,
    pub kind: OpaqueKind,
    pub polarity: Label,
    pub build: BuildFn,
}

/// Integer and float scratch registers a template may need.
pub const SCRATCH_REGS: usize = 5;
pub const SCRATCH_FREGS: usize = 4;

macro_rules! templates {
    ($($id:literal, $kind:ident, $pol:ident, $f:ident;)*) => {
        pub static TEMPLATES: &[Template] = &[
            $(Template { id: $id, kind: OpaqueKind::$kind, polarity: Label::$pol, build: $f },)*
        ];
    };
}

templates! {
    "ar-parity-even", Arithmetic, OpTrue, ar_parity_even;
    "ar-square-mod4", Arithmetic, OpTrue, ar_square_mod4;
    "ar-or-odd", Arithmetic, OpTrue, ar_or_odd;
    "ar-triple-even", Arithmetic, OpTrue, ar_triple_even;
    "ar-parity-odd", Arithmetic, OpFalse, ar_parity_odd;
    "ar-seven-square", Arithmetic, OpFalse, ar_seven_square;
    "ar-square-three", Arithmetic, OpFalse, ar_square_three;
    "ar-double-odd", Arithmetic, OpFalse, ar_double_odd;
    "mba-add", Mba, OpTrue, mba_add;
    "mba-sub", Mba, OpTrue, mba_sub;
    "mba-or", Mba, OpTrue, mba_or;
    "mba-xor", Mba, OpTrue, mba_xor;
    "mba-add-offset", Mba, OpFalse, mba_add_offset;
    "mba-not-self", Mba, OpFalse, mba_not_self;
    "mba-not-sum", Mba, OpFalse, mba_not_sum;
    "mba-sub-not", Mba, OpFalse, mba_sub_not;
    "al-offset-reload", Alias, OpTrue, al_offset_reload;
    "al-two-paths", Alias, OpTrue, al_two_paths;
    "al-pair-first", Alias, OpTrue, al_pair_first;
    "al-reload-uge", Alias, OpTrue, al_reload_uge;
    "al-pair-second", Alias, OpFalse, al_pair_second;
    "al-neighbour", Alias, OpFalse, al_neighbour;
    "al-reload-ult", Alias, OpFalse, al_reload_ult;
    "al-two-paths-ne", Alias, OpFalse, al_two_paths_ne;
    "env-page", Environment, OpTrue, env_page;
    "env-free-odd", Environment, OpTrue, env_free_odd;
    "env-rem", Environment, OpTrue, env_rem;
    "env-word-square", Environment, OpTrue, env_word_square;
    "env-word-half", Environment, OpFalse, env_word_half;
    "env-base-low", Environment, OpFalse, env_base_low;
    "env-free-parity", Environment, OpFalse, env_free_parity;
    "env-byte-page", Environment, OpFalse, env_byte_page;
    "fl-square-nonneg", BiOpaqueFloat, OpTrue, fl_square_nonneg;
    "fl-double", BiOpaqueFloat, OpTrue, fl_double;
    "fl-self-ordered", BiOpaqueFloat, OpTrue, fl_self_ordered;
    "fl-successor", BiOpaqueFloat, OpTrue, fl_successor;
    "fl-square-neg", BiOpaqueFloat, OpFalse, fl_square_neg;
    "fl-double-gt", BiOpaqueFloat, OpFalse, fl_double_gt;
    "fl-self-unordered", BiOpaqueFloat, OpFalse, fl_self_unordered;
    "fl-successor-gt", BiOpaqueFloat, OpFalse, fl_successor_gt;
    "sm-constant", BiOpaqueSymMem, OpTrue, sm_constant;
    "sm-small", BiOpaqueSymMem, OpTrue, sm_small;
    "sm-even", BiOpaqueSymMem, OpTrue, sm_even;
    "sm-index", BiOpaqueSymMem, OpTrue, sm_index;
    "sm-odd", BiOpaqueSymMem, OpFalse, sm_odd;
    "sm-absent", BiOpaqueSymMem, OpFalse, sm_absent;
    "sm-large", BiOpaqueSymMem, OpFalse, sm_large;
    "sm-index-shifted", BiOpaqueSymMem, OpFalse, sm_index_shifted;
}

pub fn pool(kind: OpaqueKind, polarity: Label) -> Vec<&'static Template> {
    TEMPLATES.iter().filter(|t| t.kind == kind && t.polarity == polarity).collect()
}

pub fn by_id(id: &str) -> Option<&'static Template> {
    TEMPLATES.iter().find(|t| t.id == id)
}

// Arithmetic

/// `x * (x + 1)` or `x * x + x`.
fn consecutive_product(b: &mut Builder, x: Reg) -> Reg {
    let t = b.reg();
    if b.rng.gen_bool(0.5) {
        b.bin_imm(Add, t, x, 1);
        b.bin(Mul, t, t, x);
    } else {
        b.bin(Mul, t, x, x);
        b.bin(Add, t, t, x);
    }
    t
}

fn ar_parity_even(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = consecutive_product(b, x);
    b.bin_imm(And, t, t, 1);
    b.cmp_imm(t, 0);
    Cond::Eq
}

fn ar_parity_odd(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = consecutive_product(b, x);
    b.bin_imm(Urem, t, t, 2);
    b.cmp_imm(t, 1);
    Cond::Eq
}

fn ar_square_mod4(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = b.reg();
    b.bin(Mul, t, x, x);
    b.bin_imm(And, t, t, 3);
    b.cmp_imm(t, 2);
    if b.rng.gen_bool(0.5) {
        Cond::Ult
    } else {
        Cond::Ne
    }
}

fn ar_square_three(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = b.reg();
    b.bin(Mul, t, x, x);
    b.bin_imm(Urem, t, t, 4);
    let k = *[2u64, 3].choose(b.rng).expect("non-empty");
    b.cmp_imm(t, k);
    Cond::Eq
}

fn ar_or_odd(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = b.reg();
    let k = b.rng.gen_range(0..64u64) * 2 + 1;
    b.bin_imm(Or, t, x, k);
    b.cmp_imm(t, 0);
    Cond::Ne
}

/// `x * (x + 1) * (x + 2)` is even.
fn ar_triple_even(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = consecutive_product(b, x);
    let u = b.reg();
    b.bin_imm(Add, u, x, 2);
    b.bin(Mul, t, t, u);
    b.bin_imm(And, t, t, 1);
    b.cmp_imm(t, 0);
    Cond::Eq
}

fn ar_seven_square(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let t = b.reg();
    let u = b.reg();
    b.bin(Mul, t, x, x);
    b.bin_imm(Mul, t, t, 7);
    b.bin_imm(Sub, t, t, 1);
    b.bin(Mul, u, y, y);
    if b.rng.gen_bool(0.5) {
        b.cmp(t, u);
    } else {
        b.cmp(u, t);
    }
    Cond::Eq
}

fn ar_double_odd(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let t = b.reg();
    b.bin_imm(Shl, t, x, 1);
    b.bin_imm(Urem, t, t, 2);
    b.cmp_imm(t, 1);
    Cond::Eq
}

// Mixed boolean-arithmetic

/// `(x ^ y) + 2 * (x & y)`, equal to `x + y`.
fn mba_sum(b: &mut Builder, x: Reg, y: Reg) -> Reg {
    let a = b.reg();
    let c = b.reg();
    b.bin(Xor, a, x, y);
    b.bin(And, c, x, y);
    b.double(c, c);
    b.bin(Add, a, a, c)
}

fn mba_add(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let s = b.reg();
    b.bin(Add, s, x, y);
    let a = mba_sum(b, x, y);
    b.cmp(s, a);
    Cond::Eq
}

/// `~(x ^ y) == x ^ y`: no value equals its complement.
fn mba_not_self(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let a = b.reg();
    let n = b.reg();
    b.bin(Xor, a, x, y);
    b.un(UnOp::Not, n, a);
    b.cmp(n, a);
    Cond::Eq
}

/// `x - y == (x ^ y) - 2 * ((x ^ y) & y)`.
fn mba_sub(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let s = b.reg();
    let a = b.reg();
    let n = b.reg();
    b.bin(Sub, s, x, y);
    b.bin(Xor, a, x, y);
    b.bin(And, n, a, y);
    b.double(n, n);
    b.bin(Sub, a, a, n);
    b.cmp(s, a);
    Cond::Eq
}

fn mba_or(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let s = b.reg();
    let a = b.reg();
    let c = b.reg();
    b.bin(Or, s, x, y);
    b.bin(And, a, x, y);
    b.bin(Xor, c, x, y);
    b.bin(Add, a, a, c);
    b.cmp(s, a);
    Cond::Eq
}

/// `x ^ y == (x | y) - (x & y)`.
fn mba_xor(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let s = b.reg();
    let a = b.reg();
    let c = b.reg();
    b.bin(Xor, s, x, y);
    b.bin(Or, a, x, y);
    b.bin(And, c, x, y);
    b.bin(Sub, a, a, c);
    b.cmp(s, a);
    Cond::Eq
}

fn mba_add_offset(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let s = b.reg();
    let a = b.reg();
    let c = b.reg();
    let k = b.rng.gen_range(1..1000u64);
    b.bin(Add, s, x, y);
    b.bin(Or, a, x, y);
    b.bin(And, c, x, y);
    b.bin(Add, a, a, c);
    b.bin_imm(Add, a, a, k);
    b.cmp(s, a);
    Cond::Eq
}

fn mba_not_sum(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let n = b.reg();
    b.un(UnOp::Not, n, x);
    b.bin(Add, n, n, x);
    b.bin(Add, n, n, y);
    b.cmp(n, y);
    Cond::Eq
}

fn mba_sub_not(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let s = b.reg();
    let a = b.reg();
    b.bin(Sub, s, x, y);
    b.un(UnOp::Not, a, y);
    b.bin(Add, a, x, a);
    b.cmp(s, a);
    Cond::Eq
}

// Aliasing: two address computations that provably meet or provably miss.

fn scratch_base(b: &mut Builder) -> u64 {
    SCRATCH_BASE + 8 * b.rng.gen_range(0..256u64)
}

/// `p = base + (x & 0x1f8)`.
fn cell(b: &mut Builder, x: Reg) -> Reg {
    let p = b.reg();
    let base = scratch_base(b);
    b.bin_imm(And, p, x, 0x1f8);
    b.bin_imm(Add, p, p, base);
    p
}

/// `p = base + ((x & 31) << 3)` and `q = base + ((x << 3) & 0xf8)`.
fn two_paths(b: &mut Builder, x: Reg) -> (Reg, Reg) {
    let base = scratch_base(b);
    let p = b.reg();
    let q = b.reg();
    b.bin_imm(And, p, x, 31);
    b.bin_imm(Shl, p, p, 3);
    b.bin_imm(Add, p, p, base);
    b.bin_imm(Shl, q, x, 3);
    b.bin_imm(And, q, q, 0xf8);
    b.bin_imm(Add, q, q, base);
    (p, q)
}

fn al_offset_reload(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let p = cell(b, x);
    let q = b.reg();
    let k = 8 * b.rng.gen_range(1..16i64);
    b.bin_imm(Add, q, p, k as u64);
    b.store(p, 0, y);
    let t = b.reg();
    b.load(t, q, -k);
    b.cmp(t, y);
    Cond::Eq
}

fn al_two_paths(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let (p, q) = two_paths(b, x);
    b.store(p, 0, y);
    let t = b.reg();
    b.load(t, q, 0);
    b.cmp(t, y);
    Cond::Eq
}

fn al_two_paths_ne(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let (p, q) = two_paths(b, x);
    b.store(q, 0, y);
    let t = b.reg();
    b.load(t, p, 0);
    b.cmp(y, t);
    Cond::Ne
}

fn al_pair_first(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let p = cell(b, x);
    let u = b.reg();
    b.store(p, 0, y);
    b.un(UnOp::Not, u, y);
    b.store(p, 8, u);
    let t = b.reg();
    b.load(t, p, 0);
    b.cmp(t, y);
    Cond::Eq
}

fn al_pair_second(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let p = cell(b, x);
    let u = b.reg();
    b.store(p, 0, y);
    b.bin_imm(Add, u, y, 1);
    b.store(p, 8, u);
    let t = b.reg();
    b.load(t, p, 0);
    b.cmp(t, u);
    Cond::Eq
}

fn al_reload_uge(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let (p, q) = two_paths(b, x);
    b.store(p, 0, x);
    let t = b.reg();
    b.load(t, q, 0);
    b.cmp(t, x);
    Cond::Uge
}

fn al_reload_ult(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let p = cell(b, x);
    let q = b.reg();
    let k = 8 * b.rng.gen_range(1..16i64);
    b.bin_imm(Sub, q, p, k as u64);
    b.store(q, k, y);
    let t = b.reg();
    b.load(t, p, 0);
    b.cmp(t, y);
    Cond::Ult
}

fn al_neighbour(b: &mut Builder, x: Reg, y: Reg, _: &EnvDomain) -> Cond {
    let base = scratch_base(b);
    let p = b.reg();
    let q = b.reg();
    let n = b.reg();
    b.bin_imm(And, p, x, 0xf0);
    b.bin_imm(Add, p, p, base);
    b.bin_imm(Or, q, p, 8);
    b.store(p, 0, y);
    b.un(UnOp::Not, n, y);
    b.store(q, 0, n);
    let t = b.reg();
    b.load(t, q, 0);
    b.cmp(t, y);
    Cond::Eq
}

// Environment: fixed slots of the declared domain, or invariants that hold
// for any slot value.

fn free_slot(b: &mut Builder, env: &EnvDomain) -> u8 {
    *env.free_slots().choose(b.rng).expect("domain leaves free slots")
}

fn env_page(b: &mut Builder, _: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let e = b.reg();
    b.getenv(e, EnvDomain::PAGE_SIZE);
    b.bin_imm(And, e, e, 0xfff);
    b.cmp_imm(e, 0);
    Cond::Eq
}

fn env_free_odd(b: &mut Builder, x: Reg, _: Reg, env: &EnvDomain) -> Cond {
    let e = b.reg();
    let s = free_slot(b, env);
    b.getenv(e, s);
    if b.rng.gen_bool(0.5) {
        b.bin(Xor, e, e, x);
    }
    b.bin_imm(Or, e, e, 1);
    b.cmp_imm(e, 0);
    Cond::Ne
}

fn env_rem(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let e = b.reg();
    let t = b.reg();
    b.getenv(e, EnvDomain::CACHE_LINE);
    b.bin(Urem, t, x, e);
    b.cmp(t, e);
    Cond::Ult
}

fn env_word_square(b: &mut Builder, _: Reg, _: Reg, env: &EnvDomain) -> Cond {
    let e = b.reg();
    b.getenv(e, EnvDomain::WORD_SIZE);
    b.bin(Mul, e, e, e);
    let w = env.fixed_value(EnvDomain::WORD_SIZE);
    b.cmp_imm(e, w * w);
    Cond::Eq
}

fn env_word_half(b: &mut Builder, _: Reg, _: Reg, env: &EnvDomain) -> Cond {
    let e = b.reg();
    b.getenv(e, EnvDomain::WORD_SIZE);
    b.bin_imm(Shr, e, e, 1);
    let w = env.fixed_value(EnvDomain::WORD_SIZE);
    b.cmp_imm(e, w);
    Cond::Eq
}

fn env_base_low(b: &mut Builder, _: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let e = b.reg();
    b.getenv(e, EnvDomain::IMAGE_BASE);
    b.bin_imm(Shl, e, e, 48);
    b.cmp_imm(e, 0);
    Cond::Ne
}

fn env_free_parity(b: &mut Builder, _: Reg, _: Reg, env: &EnvDomain) -> Cond {
    let e = b.reg();
    let s = free_slot(b, env);
    b.getenv(e, s);
    let t = consecutive_product(b, e);
    b.bin_imm(Shl, t, t, 63);
    b.cmp_imm(t, 0);
    Cond::Ne
}

fn env_byte_page(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let e = b.reg();
    let t = b.reg();
    b.getenv(e, EnvDomain::PAGE_SIZE);
    b.bin_imm(Shr, t, x, 56);
    b.cmp(t, e);
    Cond::Uge
}

// Floating point

/// `f = (double)(x & 0xffff)`.
fn small_float(b: &mut Builder, x: Reg) -> FReg {
    let m = b.reg();
    let f = b.freg();
    b.bin_imm(And, m, x, 0xffff);
    b.itof(f, m);
    f
}

fn float_const(b: &mut Builder, v: u64) -> FReg {
    let r = b.reg();
    let f = b.freg();
    b.movimm(r, v);
    b.itof(f, r);
    f
}

fn square_vs_zero(b: &mut Builder, x: Reg) -> Reg {
    let f0 = small_float(b, x);
    let f1 = b.freg();
    b.fbin(FBinOp::Fmul, f1, f0, f0);
    let z = float_const(b, 0);
    let r = b.reg();
    b.fcmp(r, f1, z)
}

fn fl_square_nonneg(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = square_vs_zero(b, x);
    b.cmp_imm(r, 1);
    Cond::Ne
}

fn fl_square_neg(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = square_vs_zero(b, x);
    b.cmp_imm(r, 1);
    Cond::Eq
}

/// fcmp of `f + f` against `f * 2`.
fn double_vs_scaled(b: &mut Builder, x: Reg) -> Reg {
    let f0 = small_float(b, x);
    let f1 = b.freg();
    b.fbin(FBinOp::Fadd, f1, f0, f0);
    let two = float_const(b, 2);
    b.fbin(FBinOp::Fmul, two, f0, two);
    let r = b.reg();
    b.fcmp(r, f1, two)
}

fn fl_double(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = double_vs_scaled(b, x);
    b.cmp_imm(r, 0);
    Cond::Eq
}

fn fl_double_gt(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = double_vs_scaled(b, x);
    b.cmp_imm(r, 2);
    Cond::Eq
}

fn self_compare(b: &mut Builder, x: Reg) -> Reg {
    let f = b.freg();
    b.itof(f, x);
    let r = b.reg();
    b.fcmp(r, f, f)
}

fn fl_self_ordered(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = self_compare(b, x);
    b.cmp_imm(r, 3);
    Cond::Ne
}

fn fl_self_unordered(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = self_compare(b, x);
    b.cmp_imm(r, 3);
    Cond::Eq
}

/// fcmp of `f` against `f + 1`.
fn successor(b: &mut Builder, x: Reg) -> Reg {
    let f0 = small_float(b, x);
    let one = float_const(b, 1);
    let f2 = b.freg();
    b.fbin(FBinOp::Fadd, f2, f0, one);
    let r = b.reg();
    b.fcmp(r, f0, f2)
}

fn fl_successor(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = successor(b, x);
    b.cmp_imm(r, 1);
    Cond::Eq
}

fn fl_successor_gt(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let r = successor(b, x);
    b.cmp_imm(r, 2);
    Cond::Eq
}

// Tables initialized in place and read at an input-dependent index.

/// Stores `vals` into a fresh table, then loads entry `x & (len - 1)`.
/// Returns (loaded value, byte offset of the index).
fn table_read(b: &mut Builder, x: Reg, vals: &[u64]) -> (Reg, Reg) {
    debug_assert!(vals.len().is_power_of_two());
    let tb = b.reg();
    let v = b.reg();
    let base = SCRATCH_BASE + 0x1000 + 8 * b.rng.gen_range(0..256u64);
    b.movimm(tb, base);
    for (i, &val) in vals.iter().enumerate() {
        b.movimm(v, val);
        b.store(tb, 8 * i as i64, v);
    }
    let idx = b.reg();
    b.bin_imm(And, idx, x, vals.len() as u64 - 1);
    b.bin_imm(Shl, idx, idx, 3);
    let a = b.reg();
    b.bin(Add, a, tb, idx);
    let t = b.reg();
    b.load(t, a, 0);
    (t, idx)
}

fn table_len(b: &mut Builder) -> usize {
    if b.rng.gen_bool(0.5) {
        4
    } else {
        8
    }
}

fn sm_constant(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let c = b.rng.gen_range(1..1u64 << 20);
    let n = table_len(b);
    let (t, _) = table_read(b, x, &vec![c; n]);
    b.cmp_imm(t, c);
    Cond::Eq
}

fn sm_absent(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let n = table_len(b);
    let vals: Vec<u64> = (0..n).map(|_| b.rng.gen_range(0..1u64 << 20)).collect();
    let c = loop {
        let c = b.rng.gen_range(0..1u64 << 20);
        if !vals.contains(&c) {
            break c;
        }
    };
    let (t, _) = table_read(b, x, &vals);
    b.cmp_imm(t, c);
    Cond::Eq
}

fn sm_small(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let n = table_len(b);
    let vals: Vec<u64> = (0..n).map(|_| b.rng.gen_range(0..100)).collect();
    let (t, _) = table_read(b, x, &vals);
    b.cmp_imm(t, 100);
    Cond::Ult
}

fn sm_large(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let n = table_len(b);
    let vals: Vec<u64> = (0..n).map(|_| b.rng.gen_range(1000..100_000)).collect();
    let (t, _) = table_read(b, x, &vals);
    b.cmp_imm(t, 1000);
    Cond::Ult
}

fn parity_table(b: &mut Builder, x: Reg, odd: bool) -> Reg {
    let n = table_len(b);
    let vals: Vec<u64> = (0..n).map(|_| b.rng.gen_range(0..1u64 << 16) * 2 + odd as u64).collect();
    let (t, _) = table_read(b, x, &vals);
    b.bin_imm(And, t, t, 1);
    b.cmp_imm(t, 0);
    t
}

fn sm_even(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    parity_table(b, x, false);
    Cond::Eq
}

fn sm_odd(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    parity_table(b, x, true);
    Cond::Eq
}

fn sm_index(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let n = table_len(b);
    let vals: Vec<u64> = (0..n as u64).map(|i| 8 * i).collect();
    let (t, idx) = table_read(b, x, &vals);
    b.cmp(t, idx);
    Cond::Eq
}

fn sm_index_shifted(b: &mut Builder, x: Reg, _: Reg, _: &EnvDomain) -> Cond {
    let n = table_len(b);
    let vals: Vec<u64> = (0..n as u64).map(|i| 8 * i + 8).collect();
    let (t, idx) = table_read(b, x, &vals);
    b.cmp(t, idx);
    Cond::Eq
}

/// Straight-line code and condition produced by one template instance.
pub struct Snippet {
    pub insts: Vec<crate::mir::Inst>,
    pub cond: Cond,
}

pub fn instantiate(t: &Template, rng: &mut ChaCha8Rng, x: Reg, y: Reg, regs: Vec<Reg>, fregs: Vec<FReg>, env: &EnvDomain) -> Snippet {
    let mut b = Builder::new(rng, regs, fregs);
    let cond = (t.build)(&mut b, x, y, env);
    Snippet { insts: b.insts, cond }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub x: u64,
    pub y: u64,
    pub env: crate::mir::Env,
}

/// Runs `t` standalone on every pair of 8-bit inputs and on `random` random
/// 64-bit pairs with sampled environments. `seed` fixes the template's own
/// random choices.
pub fn verify_template(t: &Template, seed: u64, env: &EnvDomain, random: usize) -> Result<(), Counterexample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regs = (2..2 + SCRATCH_REGS as u8).map(Reg).collect();
    let fregs = (0..SCRATCH_FREGS as u8).map(FReg).collect();
    let snip = instantiate(t, &mut rng, Reg(0), Reg(1), regs, fregs, env);
    let block = |label: &str, v: u64| BasicBlock {
        label: label.into(),
        insts: vec![crate::mir::Inst::MovImm { dst: Reg(0), imm: v }],
        term: Terminator::Return(Reg(0)),
    };
    let p = Program {
        functions: vec![Function {
            name: "main".into(),
            arity: 2,
            blocks: vec![
                BasicBlock {
                    label: "a".into(),
                    insts: snip.insts,
                    term: Terminator::CondJump { cond: snip.cond, taken: "t".into(), fallthrough: "f".into() },
                },
                block("t", 1),
                block("f", 0),
            ],
        }],
        base_address: crate::mir::DEFAULT_BASE_ADDRESS,
        entry: "main".into(),
    };
    let want = (t.polarity == Label::OpTrue) as u64;
    let mut exe = Executable::new(&p);
    let mut check = |x: u64, y: u64, e: &crate::mir::Env| -> Result<(), Counterexample> {
        match exe.run(&[x, y], e, 10_000) {
            Ok(Outcome::Returned(o)) if o.value == want => Ok(()),
            _ => Err(Counterexample { x, y, env: *e }),
        }
    };
    let mut erng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for x in 0..256u64 {
        let e = env.sample(&mut erng);
        for y in 0..256u64 {
            check(x, y, &e)?;
        }
    }
    for _ in 0..random {
        let e = env.sample(&mut erng);
        check(erng.gen(), erng.gen(), &e)?;
    }
    Ok(())
}
