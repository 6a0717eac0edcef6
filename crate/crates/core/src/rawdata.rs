//! Rendering of symbolic states into textual raw data and its normalization.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::learn::Task;
use crate::obfuscator::Label;
use crate::mir::PredicateId;
use crate::symex::{Analyzer, OpKind, PathBudget, SymbolicState, SymexError, IRDST};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SetKind {
    /// Branch-target expression only.
    Set1,
    /// Branch target plus the flag assignments it reads.
    Set2,
    /// Every assignment along the path plus the branch target.
    Set3,
}

impl SetKind {
    pub const ALL: [SetKind; 3] = [SetKind::Set1, SetKind::Set2, SetKind::Set3];
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SetKind::Set1 => "set1",
            SetKind::Set2 => "set2",
            SetKind::Set3 => "set3",
        })
    }
}

impl FromStr for SetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<SetKind, String> {
        match s.to_ascii_lowercase().as_str() {
            "set1" | "1" => Ok(SetKind::Set1),
            "set2" | "2" => Ok(SetKind::Set2),
            "set3" | "3" => Ok(SetKind::Set3),
            _ => Err(format!("unknown set `{s}` (expected set1, set2 or set3)")),
        }
    }
}

/// Which expression syntax to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Syntax {
    /// `ExprOp('+', ExprId('r0', size=64), ExprInt(0x1, 64))`
    #[default]
    Constructor,
    /// `(r0 + 0x1)`
    Infix,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DocMeta {
    pub program: String,
    pub function: String,
    pub predicate: String,
    pub path: usize,
    pub set: SetKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RawDocument {
    pub lines: Vec<String>,
    pub meta: DocMeta,
}

impl RawDocument {
    pub fn text(&self) -> String {
        self.lines.join("\n")
    }
}

fn irdst_line(state: &SymbolicState, syntax: Syntax) -> String {
    match syntax {
        Syntax::Constructor => format!("ExprId('{IRDST}', size=64) = {}", state.predicate_dst.render()),
        Syntax::Infix => format!("{IRDST} = {}", state.predicate_dst.render_infix()),
    }
}

fn assignment_line(state: &SymbolicState, i: usize, syntax: Syntax) -> String {
    let a = &state.assignments[i];
    match syntax {
        Syntax::Constructor => format!("{} = {}", a.dest.render(), a.value.render()),
        Syntax::Infix => format!("{} = {}", a.dest.render_infix(), a.value.render_infix()),
    }
}

/// Renders `state` for `kind`; the branch-target line is always last.
pub fn render_state(state: &SymbolicState, kind: SetKind, meta: DocMeta) -> RawDocument {
    render_state_with(state, kind, meta, Syntax::Constructor)
}

pub fn render_state_with(state: &SymbolicState, kind: SetKind, mut meta: DocMeta, syntax: Syntax) -> RawDocument {
    meta.set = kind;
    let mut lines: Vec<String> = match kind {
        SetKind::Set1 => Vec::new(),
        SetKind::Set2 => state.flag_defs.iter().map(|&i| assignment_line(state, i, syntax)).collect(),
        SetKind::Set3 => (0..state.assignments.len()).map(|i| assignment_line(state, i, syntax)).collect(),
    };
    lines.push(irdst_line(state, syntax));
    RawDocument { lines, meta }
}

const CONSTRUCTORS: [&str; 5] = ["ExprId", "ExprInt", "ExprMem", "ExprOp", "ExprCond"];
/// Words substituted for punctuation outside the kept set.
const PUNCT_WORDS: [(char, &str); 7] =
    [('\'', "q"), ('?', "cond"), (':', "else"), ('@', "mem"), ('[', "lbr"), (']', "rbr"), ('!', "bang")];

fn punct_word(c: char) -> &'static str {
    PUNCT_WORDS.iter().find(|p| p.0 == c).map(|p| p.1).unwrap_or("sym")
}

fn is_reserved(word: &str) -> bool {
    CONSTRUCTORS.contains(&word)
        || word == "size"
        || OpKind::ALL.iter().any(|o| o.word() == word)
        || PUNCT_WORDS.iter().any(|p| p.1 == word)
        || word == "sym"
}

fn is_value_symbol(word: &str) -> bool {
    word.len() > 1 && word.starts_with('v') && word[1..].bytes().all(|b| b.is_ascii_digit())
}

fn parse_number(tok: &str) -> Option<u64> {
    if let Some(h) = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else {
        tok.parse().ok()
    }
}

#[derive(Hash, PartialEq, Eq)]
enum ValueKey {
    Num(u64),
    Sym(String),
}

/// Per-document symbol tables.
#[derive(Default)]
struct Symbols {
    ids: HashMap<String, usize>,
    values: HashMap<ValueKey, usize>,
}

impl Symbols {
    fn id(&mut self, name: &str) -> String {
        let n = self.ids.len() + 1;
        format!("id{}", self.ids.entry(name.to_string()).or_insert(n))
    }

    fn value(&mut self, key: ValueKey) -> String {
        let n = self.values.len() + 1;
        format!("v{}", self.values.entry(key).or_insert(n))
    }
}

/// Position inside a constructor call: name and argument index.
struct Frame {
    ctor: Option<&'static str>,
    arg: usize,
}

fn normalize_line(line: &str, syms: &mut Symbols, out: &mut String) {
    let chars: Vec<char> = line.chars().collect();
    let mut stack: Vec<Frame> = Vec::new();
    let mut pending_ctor: Option<&'static str> = None;
    // Set after `size=` or `@`/`mem` so the next number is kept verbatim.
    let mut size_next = false;
    let mut i = 0;
    let push_word = |out: &mut String, w: &str| {
        if out.chars().last().is_some_and(|c| c.is_ascii_alphanumeric()) {
            out.push(' ');
        }
        out.push_str(w);
    };
    while i < chars.len() {
        let c = chars[i];
        let frame = stack.last().map(|f| (f.ctor, f.arg));
        if c.is_ascii_alphanumeric() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let tok: String = chars[start..i].iter().collect();
            if chars[start].is_ascii_digit() {
                let keep = size_next || frame == Some((Some("ExprInt"), 1));
                size_next = false;
                if keep {
                    push_word(out, &parse_number(&tok).map(|v| v.to_string()).unwrap_or(tok));
                } else {
                    let key = parse_number(&tok).map(ValueKey::Num).unwrap_or(ValueKey::Sym(tok));
                    let v = syms.value(key);
                    push_word(out, &v);
                }
                continue;
            }
            size_next = false;
            if let Some(ctor) = CONSTRUCTORS.iter().find(|k| **k == tok) {
                pending_ctor = Some(ctor);
                push_word(out, &tok);
            } else if tok == "size" {
                push_word(out, &tok);
                // `size=N`: the equals sign is emitted by the punctuation branch.
                let mut j = i;
                while j < chars.len() && chars[j] == ' ' {
                    j += 1;
                }
                size_next = chars.get(j) == Some(&'=');
            } else if frame == Some((Some("ExprInt"), 0)) || (frame.is_none_or(|f| f.0.is_none()) && is_value_symbol(&tok)) {
                let v = syms.value(ValueKey::Sym(tok));
                push_word(out, &v);
            } else if is_reserved(&tok) {
                size_next = tok == "mem";
                push_word(out, &tok);
            } else {
                let id = syms.id(&tok);
                push_word(out, &id);
            }
            continue;
        }
        match c {
            '\'' => {
                let close = chars[i + 1..].iter().position(|&d| d == '\'').map(|p| i + 1 + p);
                match close {
                    Some(end) => {
                        let inner: String = chars[i + 1..end].iter().collect();
                        let word = if frame == Some((Some("ExprOp"), 0)) {
                            OpKind::from_str(&inner).map(|o| o.word().to_string())
                        } else {
                            None
                        };
                        let w = word.unwrap_or_else(|| syms.id(&inner));
                        push_word(out, &w);
                        i = end + 1;
                    }
                    None => {
                        push_word(out, "q");
                        i += 1;
                    }
                }
            }
            '(' => {
                stack.push(Frame { ctor: pending_ctor.take(), arg: 0 });
                out.push('(');
                i += 1;
            }
            ')' => {
                stack.pop();
                out.push(')');
                i += 1;
            }
            ',' => {
                if let Some(f) = stack.last_mut() {
                    f.arg += 1;
                }
                out.push(',');
                i += 1;
            }
            '=' | ' ' | '\t' => {
                out.push(c);
                i += 1;
            }
            _ => {
                // Runs of operator punctuation map to the operator's word.
                let start = i;
                while i < chars.len() && !chars[i].is_ascii_alphanumeric() && !"()', \t_=".contains(chars[i]) {
                    i += 1;
                }
                let run: String = chars[start..i].iter().collect();
                if let Some(op) = OpKind::from_str(&run) {
                    push_word(out, op.word());
                } else {
                    for ch in run.chars() {
                        push_word(out, punct_word(ch));
                        size_next = ch == '@';
                    }
                }
            }
        }
    }
}

/// Replaces identifiers by `idN`, constants by `vN` (first-occurrence order,
/// counters shared across the document's lines) and other punctuation by
/// words. Size annotations are kept.
pub fn normalize(doc: &RawDocument) -> RawDocument {
    let mut syms = Symbols::default();
    let lines = doc
        .lines
        .iter()
        .map(|l| {
            let mut out = String::with_capacity(l.len());
            normalize_line(l, &mut syms, &mut out);
            out
        })
        .collect();
    RawDocument { lines, meta: doc.meta.clone() }
}

/// Normalizes free text as a single-line document.
pub fn normalize_text(text: &str) -> String {
    let mut syms = Symbols::default();
    text.lines()
        .map(|l| {
            let mut out = String::new();
            normalize_line(l, &mut syms, &mut out);
            out
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub doc: RawDocument,
    pub label: Label,
}

/// Percentage of samples (inside the task) whose document text also occurs
/// with a different projected label.
pub fn cross_label_similarity(samples: &[Sample], task: Task) -> f64 {
    let mut seen: HashMap<String, HashSet<usize>> = HashMap::new();
    let mut texts = Vec::new();
    for s in samples {
        if let Some(c) = task.project(s.label) {
            let t = s.doc.text();
            seen.entry(t.clone()).or_default().insert(c);
            texts.push(t);
        }
    }
    if texts.is_empty() {
        return 0.0;
    }
    let shared = texts.iter().filter(|t| seen[*t].len() > 1).count();
    100.0 * shared as f64 / texts.len() as f64
}

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub doc: String,
    pub label: Label,
    pub program: String,
    pub predicate: String,
    pub path: usize,
    pub set: SetKind,
    pub recipe: String,
}

impl Record {
    pub fn new(sample: &Sample, recipe: &str) -> Record {
        Record {
            doc: sample.doc.text(),
            label: sample.label,
            program: sample.doc.meta.program.clone(),
            predicate: sample.doc.meta.predicate.clone(),
            path: sample.doc.meta.path,
            set: sample.doc.meta.set,
            recipe: recipe.to_string(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Record, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Normalized documents of every path reaching `target`, in path order.
pub fn predicate_documents(
    analyzer: &Analyzer<'_>,
    program: &str,
    target: &PredicateId,
    kind: SetKind,
    budget: PathBudget,
) -> Result<Vec<RawDocument>, SymexError> {
    let states = analyzer.collect_states(target, budget)?;
    Ok(states
        .iter()
        .enumerate()
        .map(|(path, st)| {
            let meta = DocMeta {
                program: program.to_string(),
                function: target.function.clone(),
                predicate: target.to_string(),
                path,
                set: kind,
            };
            normalize(&render_state(st, kind, meta))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(lines: &[&str]) -> RawDocument {
        RawDocument {
            lines: lines.iter().map(|s| s.to_string()).collect(),
            meta: DocMeta { program: "p".into(), function: "f".into(), predicate: "f:b:0".into(), path: 0, set: SetKind::Set1 },
        }
    }

    #[test]
    fn listing_one() {
        let t = normalize(&doc(&["ExprId('IRDst', size=64) = ExprInt(0x402b36, 64)"]));
        let f = normalize(&doc(&["ExprId('IRDst', size=64) = ExprInt(0x402209, 64)"]));
        assert_eq!(t.lines, vec!["ExprId(id1, size=64) = ExprInt(v1, 64)"]);
        assert_eq!(t.lines, f.lines);
    }

    #[test]
    fn operators_and_conditions() {
        let d = doc(&[
            "ExprId('zf_1', size=1) = ExprOp('FLAG_EQ_CMP', ExprId('r0', size=64), ExprInt(0x5, 64))",
            "ExprId('IRDst', size=64) = ExprCond(ExprOp('~', ExprId('zf_1', size=1)), ExprInt(0x400010, 64), ExprInt(0x5, 64))",
        ]);
        let n = normalize(&d);
        assert_eq!(n.lines[0], "ExprId(id1, size=1) = ExprOp(flageqcmp, ExprId(id2, size=64), ExprInt(v1, 64))");
        assert_eq!(n.lines[1], "ExprId(id3, size=64) = ExprCond(ExprOp(not, ExprId(id1, size=1)), ExprInt(v2, 64), ExprInt(v1, 64))");
        assert_eq!(normalize(&n), n);
    }

    #[test]
    fn memory_and_infix() {
        let d = doc(&["ExprMem(ExprOp('+', ExprId('r4', size=64), ExprInt(0x8, 64)), size=64) = ExprId('r1', size=64)"]);
        assert_eq!(normalize(&d).lines[0], "ExprMem(ExprOp(add, ExprId(id1, size=64), ExprInt(v1, 64)), size=64) = ExprId(id2, size=64)");
        let i = normalize_text("@64[(r4 + 0x8)] = (zf_1 ? 0x400010 : r1)");
        assert_eq!(i, "mem 64 lbr(id1 add v1)rbr = (id2 cond v2 else id3)");
        assert_eq!(normalize_text(&i), i);
    }

    #[test]
    fn stray_quote() {
        assert_eq!(normalize_text("a ' b"), "id1 q id2");
    }

    #[test]
    fn similarity() {
        let mk = |t: &str, l| Sample { doc: doc(&[t]), label: l };
        let s = vec![mk("x", Label::OpTrue), mk("x", Label::OpFalse)];
        assert_eq!(cross_label_similarity(&s, Task::Deobfuscation), 100.0);
        let s = vec![mk("x", Label::OpTrue), mk("y", Label::OpFalse), mk("z", Label::Normal)];
        assert_eq!(cross_label_similarity(&s, Task::Deobfuscation), 0.0);
        assert_eq!(cross_label_similarity(&s, Task::Detection), 0.0);
        let s = vec![mk("x", Label::OpTrue), mk("x", Label::OpFalse), mk("y", Label::Normal)];
        assert_eq!(cross_label_similarity(&s, Task::Detection), 0.0);
    }

    #[test]
    fn record_round_trip() {
        let s = Sample { doc: doc(&["a", "b"]), label: Label::OpFalse };
        let r = Record::new(&s, "AddOpaque(Arithmetic,1)");
        let line = r.to_json_line();
        assert!(line.contains("\"label\":\"OP_FALSE\""));
        assert!(line.contains("\"set\":\"Set1\""));
        assert_eq!(Record::from_json_line(&line).unwrap(), r);
    }
}
