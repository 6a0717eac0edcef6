//! Line-oriented assembly text for [`Program`].
//!
//! ```text
//! .base 0x400000
//! .entry main
//! fn main(2 args)
//! entry:
//!     add r2, r0, r1
//!     cmp r2, 5
//!     jcc eq big small
//! big:
//!     ret r2
//! small:
//!     ret r0
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use super::*;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsmError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: `{opcode}` expects {expected} operands, found {found}")]
    Arity { line: usize, opcode: String, expected: usize, found: usize },
    #[error("undefined label `{label}` in function `{function}`")]
    UndefinedLabel { function: String, label: String },
    #[error("invalid program: {0}")]
    Invalid(String),
}

fn syntax(line: usize, msg: impl Into<String>) -> AsmError {
    AsmError::Syntax { line, msg: msg.into() }
}

pub fn parse_asm(text: &str) -> Result<Program, AsmError> {
    let mut base_address = DEFAULT_BASE_ADDRESS;
    let mut entry: Option<String> = None;
    let mut functions: Vec<Function> = Vec::new();
    // Block currently being filled: label, line of label, instructions.
    let mut open: Option<(String, usize, Vec<Inst>)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let code = raw.split(';').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        if let Some(rest) = code.strip_prefix(".base") {
            base_address = parse_u64(rest.trim()).ok_or_else(|| syntax(line, "bad .base value"))?;
            continue;
        }
        if let Some(rest) = code.strip_prefix(".entry") {
            let name = rest.trim();
            if !is_ident(name) {
                return Err(syntax(line, "bad .entry name"));
            }
            entry = Some(name.to_string());
            continue;
        }
        if let Some(rest) = code.strip_prefix("fn ") {
            if let Some((label, _, _)) = open.take() {
                return Err(syntax(line, format!("block `{label}` has no terminator")));
            }
            functions.push(parse_header(rest.trim(), line)?);
            continue;
        }
        if let Some(label) = code.strip_suffix(':') {
            let label = label.trim();
            if !is_ident(label) {
                return Err(syntax(line, format!("bad label `{label}`")));
            }
            if functions.is_empty() {
                return Err(syntax(line, "label outside of a function"));
            }
            if let Some((prev, _, _)) = open.take() {
                return Err(syntax(line, format!("block `{prev}` has no terminator")));
            }
            open = Some((label.to_string(), line, Vec::new()));
            continue;
        }

        let (opcode, operands) = split_operands(code);
        let Some((label, _, insts)) = open.as_mut() else {
            return Err(syntax(line, "instruction outside of a block"));
        };
        if let Some(term) = parse_terminator(&opcode, &operands, line)? {
            let block = BasicBlock { label: std::mem::take(label), insts: std::mem::take(insts), term };
            open = None;
            functions.last_mut().expect("checked above").blocks.push(block);
        } else {
            insts.push(parse_inst(&opcode, &operands, line)?);
        }
    }
    if let Some((label, line, _)) = open {
        return Err(syntax(line, format!("block `{label}` has no terminator")));
    }
    let entry = match entry {
        Some(e) => e,
        None => functions
            .first()
            .map(|f| f.name.clone())
            .ok_or_else(|| AsmError::Invalid("no functions".into()))?,
    };
    let program = Program { functions, base_address, entry };
    program.validate()?;
    Ok(program)
}

fn parse_header(rest: &str, line: usize) -> Result<Function, AsmError> {
    // name(<k> args)
    let open = rest.find('(').ok_or_else(|| syntax(line, "expected `(` in fn header"))?;
    let name = rest[..open].trim();
    if !is_ident(name) {
        return Err(syntax(line, format!("bad function name `{name}`")));
    }
    let inner = rest[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| syntax(line, "expected `)` at end of fn header"))?;
    let mut words = inner.split_whitespace();
    let arity = words
        .next()
        .and_then(|w| w.parse::<usize>().ok())
        .ok_or_else(|| syntax(line, "expected argument count"))?;
    match words.next() {
        Some("args") | Some("arg") if words.next().is_none() => {}
        _ => return Err(syntax(line, "expected `<k> args`")),
    }
    Ok(Function { name: name.to_string(), arity, blocks: Vec::new() })
}

fn split_operands(code: &str) -> (String, Vec<String>) {
    let mut it = code.splitn(2, char::is_whitespace);
    let opcode = it.next().unwrap_or("").to_string();
    let rest = it.next().unwrap_or("").trim();
    let operands = if rest.is_empty() {
        Vec::new()
    } else if opcode == "jcc" || opcode == "call" {
        rest.split_whitespace().map(str::to_string).collect()
    } else {
        rest.split(',').map(|s| s.trim().to_string()).collect()
    };
    (opcode, operands)
}

fn expect_arity(opcode: &str, ops: &[String], n: usize, line: usize) -> Result<(), AsmError> {
    if ops.len() == n {
        Ok(())
    } else {
        Err(AsmError::Arity { line, opcode: opcode.to_string(), expected: n, found: ops.len() })
    }
}

fn parse_terminator(opcode: &str, ops: &[String], line: usize) -> Result<Option<Terminator>, AsmError> {
    let label = |s: &String| -> Result<String, AsmError> {
        if is_ident(s) {
            Ok(s.clone())
        } else {
            Err(syntax(line, format!("bad label `{s}`")))
        }
    };
    Ok(Some(match opcode {
        "jmp" => {
            expect_arity(opcode, ops, 1, line)?;
            Terminator::Jump(label(&ops[0])?)
        }
        "jcc" => {
            expect_arity(opcode, ops, 3, line)?;
            let cond = Cond::ALL
                .into_iter()
                .find(|c| c.mnemonic() == ops[0])
                .ok_or_else(|| syntax(line, format!("unknown condition `{}`", ops[0])))?;
            Terminator::CondJump { cond, taken: label(&ops[1])?, fallthrough: label(&ops[2])? }
        }
        "ret" => {
            expect_arity(opcode, ops, 1, line)?;
            Terminator::Return(reg(&ops[0], line)?)
        }
        "call" => {
            expect_arity(opcode, ops, 2, line)?;
            Terminator::Call { callee: label(&ops[0])?, then: label(&ops[1])? }
        }
        _ => return Ok(None),
    }))
}

fn parse_inst(opcode: &str, ops: &[String], line: usize) -> Result<Inst, AsmError> {
    if let Some(op) = BinOp::ALL.into_iter().find(|o| o.mnemonic() == opcode) {
        expect_arity(opcode, ops, 3, line)?;
        return Ok(Inst::Bin { op, dst: reg(&ops[0], line)?, lhs: reg(&ops[1], line)?, rhs: src(&ops[2], line)? });
    }
    let un = [UnOp::Not, UnOp::Neg, UnOp::Mov];
    if let Some(op) = un.into_iter().find(|o| o.mnemonic() == opcode) {
        expect_arity(opcode, ops, 2, line)?;
        return Ok(Inst::Un { op, dst: reg(&ops[0], line)?, src: reg(&ops[1], line)? });
    }
    let fbin = [FBinOp::Fadd, FBinOp::Fmul];
    if let Some(op) = fbin.into_iter().find(|o| o.mnemonic() == opcode) {
        expect_arity(opcode, ops, 3, line)?;
        return Ok(Inst::FBin {
            op,
            dst: freg(&ops[0], line)?,
            lhs: freg(&ops[1], line)?,
            rhs: freg(&ops[2], line)?,
        });
    }
    match opcode {
        "movimm" => {
            expect_arity(opcode, ops, 2, line)?;
            let imm = parse_u64(&ops[1]).ok_or_else(|| syntax(line, "bad immediate"))?;
            Ok(Inst::MovImm { dst: reg(&ops[0], line)?, imm })
        }
        "cmp" => {
            expect_arity(opcode, ops, 2, line)?;
            Ok(Inst::Cmp { lhs: reg(&ops[0], line)?, rhs: src(&ops[1], line)? })
        }
        "load" => {
            expect_arity(opcode, ops, 2, line)?;
            Ok(Inst::Load { dst: reg(&ops[0], line)?, addr: mem(&ops[1], line)? })
        }
        "store" => {
            expect_arity(opcode, ops, 2, line)?;
            Ok(Inst::Store { addr: mem(&ops[0], line)?, src: reg(&ops[1], line)? })
        }
        "fcmp" => {
            expect_arity(opcode, ops, 3, line)?;
            Ok(Inst::Fcmp { dst: reg(&ops[0], line)?, lhs: freg(&ops[1], line)?, rhs: freg(&ops[2], line)? })
        }
        "itof" => {
            expect_arity(opcode, ops, 2, line)?;
            Ok(Inst::Itof { dst: freg(&ops[0], line)?, src: reg(&ops[1], line)? })
        }
        "getenv" => {
            expect_arity(opcode, ops, 2, line)?;
            let slot = parse_u64(&ops[1])
                .filter(|s| (*s as usize) < ENV_SLOTS)
                .ok_or_else(|| syntax(line, "bad environment slot"))?;
            Ok(Inst::GetEnv { dst: reg(&ops[0], line)?, slot: slot as u8 })
        }
        _ => Err(syntax(line, format!("unknown opcode `{opcode}`"))),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_u64(s: &str) -> Option<u64> {
    if let Some(hex) = s.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn reg(s: &str, line: usize) -> Result<Reg, AsmError> {
    s.strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|n| (*n as usize) < NUM_REGS)
        .map(Reg)
        .ok_or_else(|| syntax(line, format!("expected register, found `{s}`")))
}

fn freg(s: &str, line: usize) -> Result<FReg, AsmError> {
    s.strip_prefix('f')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|n| (*n as usize) < NUM_FREGS)
        .map(FReg)
        .ok_or_else(|| syntax(line, format!("expected float register, found `{s}`")))
}

fn src(s: &str, line: usize) -> Result<Src, AsmError> {
    if s.starts_with('r') {
        reg(s, line).map(Src::Reg)
    } else {
        parse_u64(s)
            .map(Src::Imm)
            .ok_or_else(|| syntax(line, format!("expected register or immediate, found `{s}`")))
    }
}

fn mem(s: &str, line: usize) -> Result<MemRef, AsmError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| syntax(line, format!("expected memory operand, found `{s}`")))?;
    let (base, disp) = if let Some(p) = inner.find(['+', '-']) {
        let magnitude = parse_u64(inner[p + 1..].trim())
            .filter(|m| *m <= i64::MAX as u64)
            .ok_or_else(|| syntax(line, "bad displacement"))? as i64;
        let disp = if inner.as_bytes()[p] == b'-' { -magnitude } else { magnitude };
        (inner[..p].trim(), disp)
    } else {
        (inner.trim(), 0)
    };
    Ok(MemRef { base: reg(base, line)?, disp })
}

fn fmt_imm(v: u64) -> String {
    if v < 0x1_0000 {
        v.to_string()
    } else {
        format!("{v:#x}")
    }
}

fn fmt_src(s: Src) -> String {
    match s {
        Src::Reg(r) => r.to_string(),
        Src::Imm(v) => fmt_imm(v),
    }
}

fn fmt_mem(m: MemRef) -> String {
    match m.disp {
        0 => format!("[{}]", m.base),
        d if d > 0 => format!("[{}+{}]", m.base, fmt_imm(d as u64)),
        d => format!("[{}-{}]", m.base, fmt_imm(d.unsigned_abs())),
    }
}

pub(crate) fn fmt_inst(i: &Inst) -> String {
    match *i {
        Inst::Bin { op, dst, lhs, rhs } => format!("{} {dst}, {lhs}, {}", op.mnemonic(), fmt_src(rhs)),
        Inst::Un { op, dst, src } => format!("{} {dst}, {src}", op.mnemonic()),
        Inst::MovImm { dst, imm } => format!("movimm {dst}, {}", fmt_imm(imm)),
        Inst::Cmp { lhs, rhs } => format!("cmp {lhs}, {}", fmt_src(rhs)),
        Inst::Load { dst, addr } => format!("load {dst}, {}", fmt_mem(addr)),
        Inst::Store { addr, src } => format!("store {}, {src}", fmt_mem(addr)),
        Inst::FBin { op, dst, lhs, rhs } => format!("{} {dst}, {lhs}, {rhs}", op.mnemonic()),
        Inst::Fcmp { dst, lhs, rhs } => format!("fcmp {dst}, {lhs}, {rhs}"),
        Inst::Itof { dst, src } => format!("itof {dst}, {src}"),
        Inst::GetEnv { dst, slot } => format!("getenv {dst}, {slot}"),
    }
}

fn fmt_term(t: &Terminator) -> String {
    match t {
        Terminator::Jump(l) => format!("jmp {l}"),
        Terminator::CondJump { cond, taken, fallthrough } => {
            format!("jcc {} {taken} {fallthrough}", cond.mnemonic())
        }
        Terminator::Return(r) => format!("ret {r}"),
        Terminator::Call { callee, then } => format!("call {callee} {then}"),
    }
}

/// Canonical text; functions and blocks in declaration order.
pub fn emit_asm(p: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, ".base {:#x}", p.base_address);
    let _ = writeln!(out, ".entry {}", p.entry);
    for f in &p.functions {
        let _ = writeln!(out, "\nfn {}({} args)", f.name, f.arity);
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.label);
            for i in &b.insts {
                let _ = writeln!(out, "    {}", fmt_inst(i));
            }
            let _ = writeln!(out, "    {}", fmt_term(&b.term));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let p = parse_asm("fn main(1 args)\nentry:\n    ret r0\n").unwrap();
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].blocks.len(), 1);
        assert_eq!(p.entry, "main");
        assert_eq!(p.base_address, DEFAULT_BASE_ADDRESS);
    }

    #[test]
    fn undefined_label() {
        let err = parse_asm("fn main(1 args)\nentry:\n    cmp r0, 1\n    jcc eq L9 entry\n").unwrap_err();
        assert_eq!(err, AsmError::UndefinedLabel { function: "main".into(), label: "L9".into() });
    }

    #[test]
    fn arity_mismatch_reports_line() {
        let err = parse_asm("fn main(1 args)\nentry:\n    add r0, r1\n    ret r0\n").unwrap_err();
        assert!(matches!(err, AsmError::Arity { line: 3, expected: 3, found: 2, .. }), "{err:?}");
    }

    #[test]
    fn syntax_error_has_line_number() {
        let err = parse_asm("fn main(1 args)\nentry:\n    frob r0\n    ret r0\n").unwrap_err();
        assert!(matches!(err, AsmError::Syntax { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn missing_terminator() {
        let err = parse_asm("fn main(1 args)\nentry:\n    mov r1, r0\n").unwrap_err();
        assert!(matches!(err, AsmError::Syntax { .. }));
    }

    #[test]
    fn every_form_round_trips() {
        let src = "\
; all operand forms
.base 0x401000
.entry main
fn helper(1 args)
h0:
    ret r0
fn main(2 args)
b0:
    add r2, r0, r1
    sub r3, r2, 70000
    mul r3, r3, 0x10
    not r4, r3
    neg r4, r4
    mov r5, r4
    movimm r6, 0xffffffffffffffff
    load r7, [r6+8]
    store [r6-16], r7
    store [r6], r7
    itof f1, r0
    fadd f2, f1, f1
    fmul f3, f2, f1
    fcmp r8, f3, f2
    getenv r9, 15
    cmp r9, r8
    jcc sge b1 b2
b1:
    call helper b2
b2:
    jmp b3
b3:
    ret r0
";
        let p = parse_asm(src).unwrap();
        assert_eq!(p.base_address, 0x401000);
        assert_eq!(p.functions.len(), 2);
        let text = emit_asm(&p);
        assert_eq!(parse_asm(&text).unwrap(), p);
        assert_eq!(emit_asm(&parse_asm(&text).unwrap()), text);
    }

    #[test]
    fn functions_emitted_in_declaration_order() {
        let p = parse_asm("fn zed(0 args)\na:\n ret r0\nfn alpha(0 args)\nb:\n ret r0\n").unwrap();
        let text = emit_asm(&p);
        assert!(text.find("fn zed").unwrap() < text.find("fn alpha").unwrap());
    }
}
