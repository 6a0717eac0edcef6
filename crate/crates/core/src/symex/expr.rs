use std::fmt::{self, Write as _};

use crate::mir::{fcmp_code, itof_bits, BinOp, FBinOp, Flags};

/// Operators of [`Expr::Op`], rendered with their textual names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Udiv,
    Umod,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Not,
    Neg,
    /// 1-bit equality, used by symbolic memory disambiguation.
    Eq,
    FlagEqCmp,
    FlagSignSub,
    FlagSubCf,
    FlagSubOf,
    Fadd,
    Fmul,
    Fcmp,
    SintToFp,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Udiv,
        OpKind::Umod,
        OpKind::And,
        OpKind::Or,
        OpKind::Xor,
        OpKind::Shl,
        OpKind::Shr,
        OpKind::Not,
        OpKind::Neg,
        OpKind::Eq,
        OpKind::FlagEqCmp,
        OpKind::FlagSignSub,
        OpKind::FlagSubCf,
        OpKind::FlagSubOf,
        OpKind::Fadd,
        OpKind::Fmul,
        OpKind::Fcmp,
        OpKind::SintToFp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Add => "+",
            OpKind::Sub => "-",
            OpKind::Mul => "*",
            OpKind::Udiv => "udiv",
            OpKind::Umod => "umod",
            OpKind::And => "&",
            OpKind::Or => "|",
            OpKind::Xor => "^",
            OpKind::Shl => "<<",
            OpKind::Shr => ">>",
            OpKind::Not => "~",
            OpKind::Neg => "neg",
            OpKind::Eq => "==",
            OpKind::FlagEqCmp => "FLAG_EQ_CMP",
            OpKind::FlagSignSub => "FLAG_SIGN_SUB",
            OpKind::FlagSubCf => "FLAG_SUB_CF",
            OpKind::FlagSubOf => "FLAG_SUB_OF",
            OpKind::Fadd => "fadd",
            OpKind::Fmul => "fmul",
            OpKind::Fcmp => "fcmp",
            OpKind::SintToFp => "sint_to_fp",
        }
    }

    /// Alphanumeric word substituted for the operator during normalization.
    pub fn word(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Udiv => "udiv",
            OpKind::Umod => "umod",
            OpKind::And => "and",
            OpKind::Or => "or",
            OpKind::Xor => "xor",
            OpKind::Shl => "shl",
            OpKind::Shr => "shr",
            OpKind::Not => "not",
            OpKind::Neg => "neg",
            OpKind::Eq => "eq",
            OpKind::FlagEqCmp => "flageqcmp",
            OpKind::FlagSignSub => "flagsignsub",
            OpKind::FlagSubCf => "flagsubcf",
            OpKind::FlagSubOf => "flagsubof",
            OpKind::Fadd => "fadd",
            OpKind::Fmul => "fmul",
            OpKind::Fcmp => "fcmp",
            OpKind::SintToFp => "sinttofp",
        }
    }

    pub fn from_str(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|o| o.as_str() == s)
    }

    pub fn from_binop(op: BinOp) -> OpKind {
        match op {
            BinOp::Add => OpKind::Add,
            BinOp::Sub => OpKind::Sub,
            BinOp::Mul => OpKind::Mul,
            BinOp::Udiv => OpKind::Udiv,
            BinOp::Urem => OpKind::Umod,
            BinOp::And => OpKind::And,
            BinOp::Or => OpKind::Or,
            BinOp::Xor => OpKind::Xor,
            BinOp::Shl => OpKind::Shl,
            BinOp::Shr => OpKind::Shr,
        }
    }

    /// Result size given the operand size.
    pub fn result_size(self, operand_size: u32) -> u32 {
        match self {
            OpKind::Eq | OpKind::FlagEqCmp | OpKind::FlagSignSub | OpKind::FlagSubCf | OpKind::FlagSubOf => 1,
            _ => operand_size,
        }
    }

    /// Concrete semantics on size-masked operands; `None` when undefined
    /// (division by zero) or arity is wrong.
    pub fn apply(self, args: &[u64], size: u32) -> Option<u64> {
        let v = match (self, args) {
            (OpKind::Not, [a]) => !a,
            (OpKind::Neg, [a]) => a.wrapping_neg(),
            (OpKind::SintToFp, [a]) => itof_bits(*a),
            (OpKind::Eq, [a, b]) => (a == b) as u64,
            (OpKind::FlagEqCmp, [a, b]) => Flags::from_cmp(*a, *b).zf as u64,
            (OpKind::FlagSignSub, [a, b]) => Flags::from_cmp(*a, *b).sf as u64,
            (OpKind::FlagSubCf, [a, b]) => Flags::from_cmp(*a, *b).cf as u64,
            (OpKind::FlagSubOf, [a, b]) => Flags::from_cmp(*a, *b).of as u64,
            (OpKind::Fadd, [a, b]) => FBinOp::Fadd.eval(*a, *b),
            (OpKind::Fmul, [a, b]) => FBinOp::Fmul.eval(*a, *b),
            (OpKind::Fcmp, [a, b]) => fcmp_code(*a, *b),
            (op, [a, b]) => {
                let bin = match op {
                    OpKind::Add => BinOp::Add,
                    OpKind::Sub => BinOp::Sub,
                    OpKind::Mul => BinOp::Mul,
                    OpKind::Udiv => BinOp::Udiv,
                    OpKind::Umod => BinOp::Urem,
                    OpKind::And => BinOp::And,
                    OpKind::Or => BinOp::Or,
                    OpKind::Xor => BinOp::Xor,
                    OpKind::Shl => BinOp::Shl,
                    OpKind::Shr => BinOp::Shr,
                    _ => return None,
                };
                bin.eval(*a, *b)?
            }
            _ => return None,
        };
        Some(mask(v, size))
    }
}

pub fn mask(v: u64, size: u32) -> u64 {
    if size >= 64 {
        v
    } else {
        v & ((1u64 << size) - 1)
    }
}

/// Symbolic expression. `Int` values are always reduced modulo `2^size`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    Id { name: String, size: u32 },
    Int { value: u64, size: u32 },
    Mem { addr: Box<Expr>, size: u32 },
    Op { op: OpKind, args: Vec<Expr>, size: u32 },
    Cond { cond: Box<Expr>, then: Box<Expr>, els: Box<Expr> },
}

impl Expr {
    pub fn id(name: impl Into<String>, size: u32) -> Expr {
        Expr::Id { name: name.into(), size }
    }

    pub fn int(value: u64, size: u32) -> Expr {
        Expr::Int { value: mask(value, size), size }
    }

    pub fn size(&self) -> u32 {
        match self {
            Expr::Id { size, .. } | Expr::Int { size, .. } | Expr::Mem { size, .. } | Expr::Op { size, .. } => *size,
            Expr::Cond { then, .. } => then.size(),
        }
    }

    pub fn as_int(&self) -> Option<u64> {
        match self {
            Expr::Int { value, .. } => Some(*value),
            _ => None,
        }
    }

    /// Builds an operator node, folding it when every operand is an `Int`.
    pub fn op(op: OpKind, args: Vec<Expr>) -> Expr {
        let size = op.result_size(args.first().map(Expr::size).unwrap_or(64));
        let ints: Option<Vec<u64>> = args.iter().map(Expr::as_int).collect();
        if let Some(vals) = ints {
            if let Some(v) = op.apply(&vals, size) {
                return Expr::int(v, size);
            }
        }
        Expr::Op { op, args, size }
    }

    /// Builds a conditional, folding it when the condition is an `Int`.
    pub fn cond(cond: Expr, then: Expr, els: Expr) -> Expr {
        match cond.as_int() {
            Some(0) => els,
            Some(_) => then,
            None => Expr::Cond { cond: Box::new(cond), then: Box::new(then), els: Box::new(els) },
        }
    }

    pub fn mem(addr: Expr, size: u32) -> Expr {
        Expr::Mem { addr: Box::new(addr), size }
    }

    /// Concrete evaluation. `ids` resolves free identifiers, `mem` supplies
    /// the initial memory contents.
    pub fn eval(&self, ids: &dyn Fn(&str) -> Option<u64>, mem: &dyn Fn(u64) -> u64) -> Option<u64> {
        match self {
            Expr::Id { name, size } => ids(name).map(|v| mask(v, *size)),
            Expr::Int { value, .. } => Some(*value),
            Expr::Mem { addr, size } => Some(mask(mem(addr.eval(ids, mem)?), *size)),
            Expr::Op { op, args, size } => {
                let vals = args.iter().map(|a| a.eval(ids, mem)).collect::<Option<Vec<_>>>()?;
                op.apply(&vals, *size)
            }
            Expr::Cond { cond, then, els } => {
                if cond.eval(ids, mem)? != 0 {
                    then.eval(ids, mem)
                } else {
                    els.eval(ids, mem)
                }
            }
        }
    }

    /// Constructor-syntax rendering, e.g. `ExprOp('+', ExprId('r0', size=64), ExprInt(0x1, 64))`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.render_into(&mut s);
        s
    }

    pub(crate) fn render_into(&self, out: &mut String) {
        match self {
            Expr::Id { name, size } => {
                let _ = write!(out, "ExprId('{name}', size={size})");
            }
            Expr::Int { value, size } => {
                let _ = write!(out, "ExprInt({value:#x}, {size})");
            }
            Expr::Mem { addr, size } => {
                out.push_str("ExprMem(");
                addr.render_into(out);
                let _ = write!(out, ", size={size})");
            }
            Expr::Op { op, args, .. } => {
                let _ = write!(out, "ExprOp('{}'", op.as_str());
                for a in args {
                    out.push_str(", ");
                    a.render_into(out);
                }
                out.push(')');
            }
            Expr::Cond { cond, then, els } => {
                out.push_str("ExprCond(");
                cond.render_into(out);
                out.push_str(", ");
                then.render_into(out);
                out.push_str(", ");
                els.render_into(out);
                out.push(')');
            }
        }
    }

    /// Compact infix rendering, e.g. `(r0 + 0x1)`.
    pub fn render_infix(&self) -> String {
        match self {
            Expr::Id { name, .. } => name.clone(),
            Expr::Int { value, .. } => format!("{value:#x}"),
            Expr::Mem { addr, size } => format!("@{size}[{}]", addr.render_infix()),
            Expr::Op { op, args, .. } => match args.as_slice() {
                [a] => format!("{}({})", op.as_str(), a.render_infix()),
                [a, b] if matches!(op.as_str().chars().next(), Some(c) if !c.is_ascii_alphabetic()) => {
                    format!("({} {} {})", a.render_infix(), op.as_str(), b.render_infix())
                }
                _ => format!(
                    "{}({})",
                    op.as_str(),
                    args.iter().map(Expr::render_infix).collect::<Vec<_>>().join(", ")
                ),
            },
            Expr::Cond { cond, then, els } => {
                format!("({} ? {} : {})", cond.render_infix(), then.render_infix(), els.render_infix())
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ints_are_reduced() {
        assert_eq!(Expr::int(0x1ff, 8), Expr::Int { value: 0xff, size: 8 });
        assert_eq!(Expr::int(3, 1).as_int(), Some(1));
    }

    #[test]
    fn folding_only_with_all_ints() {
        let x = Expr::id("r0", 64);
        assert_eq!(Expr::op(OpKind::Add, vec![Expr::int(2, 64), Expr::int(3, 64)]), Expr::int(5, 64));
        let sym = Expr::op(OpKind::Mul, vec![x.clone(), Expr::int(0, 64)]);
        assert!(matches!(sym, Expr::Op { .. }));
        assert_eq!(Expr::op(OpKind::FlagEqCmp, vec![Expr::int(4, 64), Expr::int(4, 64)]), Expr::int(1, 1));
        // division by zero is left symbolic
        assert!(matches!(Expr::op(OpKind::Udiv, vec![Expr::int(4, 64), Expr::int(0, 64)]), Expr::Op { .. }));
    }

    #[test]
    fn render_matches_constructor_syntax() {
        let e = Expr::cond(
            Expr::id("zf_1", 1),
            Expr::int(0x402b36, 64),
            Expr::op(OpKind::Add, vec![Expr::id("r0", 64), Expr::int(1, 64)]),
        );
        assert_eq!(
            e.render(),
            "ExprCond(ExprId('zf_1', size=1), ExprInt(0x402b36, 64), ExprOp('+', ExprId('r0', size=64), ExprInt(0x1, 64)))"
        );
        assert_eq!(e.render_infix(), "(zf_1 ? 0x402b36 : (r0 + 0x1))");
    }

    #[test]
    fn eval_with_memory_and_cond() {
        let e = Expr::cond(
            Expr::op(OpKind::Eq, vec![Expr::id("a", 64), Expr::int(8, 64)]),
            Expr::mem(Expr::id("a", 64), 64),
            Expr::int(7, 64),
        );
        let ids = |n: &str| (n == "a").then_some(8);
        assert_eq!(e.eval(&ids, &|addr| addr * 10), Some(80));
        let ids = |n: &str| (n == "a").then_some(9);
        assert_eq!(e.eval(&ids, &|_| 0), Some(7));
    }
}
