//! Opaque predicate injection and companion transforms.
//!
//! All transforms work on one function of a [`Program`] and keep its
//! observable behavior. [`apply_recipe`] chains them and records the ground
//! truth label of every conditional jump in an [`InjectionLog`].

pub(crate) mod builder;
pub(crate) mod encode;
mod flatten;
mod generate;
mod inject;
mod label;
pub mod templates;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use encode::{encode_arithmetic, encode_data, encode_literals, DataCodec};
pub use flatten::flatten;
pub use generate::{generate_program, GenConfig};
pub use inject::{has_opaque_init, init_opaque, inject_opaque, Injection};
pub use label::{Label, OpaqueKind};

use crate::mir::{enumerate_predicates, Env, Executable, Outcome, PredicateId, Program, ENV_SLOTS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ObfError {
    #[error("function `{0}` not found")]
    UnknownFunction(String),
    #[error("no injection site with enough free registers in `{0}`")]
    NoSite(String),
    #[error("no {polarity} template for {kind}")]
    TemplateExhausted { kind: OpaqueKind, polarity: Label },
    #[error("template {template} gives the wrong branch at x={x:#x} y={y:#x}")]
    TemplateUnsound { template: &'static str, x: u64, y: u64 },
    #[error("cannot flatten `{0}`: no free state register or flags live across blocks")]
    FlattenUnsupported(String),
    #[error("no encodable data variable in `{0}`")]
    NoDataVariable(String),
    #[error("{transform} changed behavior on inputs {inputs:?}")]
    BehaviorChanged { transform: String, inputs: Vec<u64> },
    #[error("bad recipe: {0}")]
    Recipe(String),
}

/// Environment tables a program may run under. Slots `0..4` hold fixed
/// platform constants; the remaining slots are unconstrained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvDomain {
    fixed: Vec<(u8, u64)>,
}

impl EnvDomain {
    pub const WORD_SIZE: u8 = 0;
    pub const PAGE_SIZE: u8 = 1;
    pub const IMAGE_BASE: u8 = 2;
    pub const CACHE_LINE: u8 = 3;

    pub fn standard() -> EnvDomain {
        EnvDomain {
            fixed: vec![
                (Self::WORD_SIZE, 8),
                (Self::PAGE_SIZE, 0x1000),
                (Self::IMAGE_BASE, crate::mir::DEFAULT_BASE_ADDRESS),
                (Self::CACHE_LINE, 64),
            ],
        }
    }

    pub fn fixed(&self) -> &[(u8, u64)] {
        &self.fixed
    }

    pub fn fixed_value(&self, slot: u8) -> u64 {
        self.fixed.iter().find(|s| s.0 == slot).map(|s| s.1).expect("slot is fixed in this domain")
    }

    pub fn free_slots(&self) -> Vec<u8> {
        (0..ENV_SLOTS as u8).filter(|s| !self.fixed.iter().any(|f| f.0 == *s)).collect()
    }

    /// Fixed slots set, free slots zero.
    pub fn base(&self) -> Env {
        let mut e = [0; ENV_SLOTS];
        for &(s, v) in &self.fixed {
            e[s as usize] = v;
        }
        e
    }

    /// A random member of the domain; free slots get small or full-width values.
    pub fn sample(&self, rng: &mut impl Rng) -> Env {
        let mut e = self.base();
        for s in self.free_slots() {
            e[s as usize] = if rng.gen_bool(0.5) { rng.gen_range(0..256) } else { rng.gen() };
        }
        e
    }

    pub fn contains(&self, env: &Env) -> bool {
        self.fixed.iter().all(|&(s, v)| env[s as usize] == v)
    }
}

impl Default for EnvDomain {
    fn default() -> Self {
        EnvDomain::standard()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    AddOpaque { kind: OpaqueKind, count: usize },
    EncodeArithmetic,
    EncodeLiterals,
    EncodeData,
    Flatten,
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transform::AddOpaque { kind, count } => write!(f, "AddOpaque({kind},{count})"),
            Transform::EncodeArithmetic => f.write_str("EncodeArithmetic"),
            Transform::EncodeLiterals => f.write_str("EncodeLiterals"),
            Transform::EncodeData => f.write_str("EncodeData"),
            Transform::Flatten => f.write_str("Flatten"),
        }
    }
}

/// Ordered transform list, written as comma-separated names with
/// parenthesized arguments: `AddOpaque(MBA,2),EncodeArithmetic,Flatten`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Recipe(pub Vec<Transform>);

impl Recipe {
    /// The same recipe with every `AddOpaque` step dropped.
    pub fn without_opaque(&self) -> Recipe {
        Recipe(self.0.iter().copied().filter(|t| !matches!(t, Transform::AddOpaque { .. })).collect())
    }

    pub fn opaque_count(&self) -> usize {
        self.0
            .iter()
            .map(|t| match t {
                Transform::AddOpaque { count, .. } => *count,
                _ => 0,
            })
            .sum()
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Recipe {
    type Err = ObfError;

    fn from_str(s: &str) -> Result<Recipe, ObfError> {
        let mut items = Vec::new();
        let (mut depth, mut start) = (0i32, 0);
        for (i, c) in s.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' if depth == 0 => {
                    items.push(&s[start..i]);
                    start = i + 1;
                }
                _ => {}
            }
            if depth < 0 {
                return Err(ObfError::Recipe(format!("unbalanced `)` in `{s}`")));
            }
        }
        if depth != 0 {
            return Err(ObfError::Recipe(format!("unbalanced `(` in `{s}`")));
        }
        items.push(&s[start..]);
        let mut out = Vec::new();
        for item in items {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (name, args) = match item.find('(') {
                Some(p) if item.ends_with(')') => (&item[..p], Some(&item[p + 1..item.len() - 1])),
                Some(_) => return Err(ObfError::Recipe(format!("bad transform `{item}`"))),
                None => (item, None),
            };
            let t = match (name.trim(), args) {
                ("AddOpaque", Some(a)) => {
                    let parts: Vec<&str> = a.split(',').map(str::trim).collect();
                    let kind = parts[0].parse::<OpaqueKind>().map_err(ObfError::Recipe)?;
                    let count = match parts.get(1) {
                        None => 1,
                        Some(c) => c.parse::<usize>().map_err(|_| ObfError::Recipe(format!("bad count `{c}`")))?,
                    };
                    if count == 0 || parts.len() > 2 {
                        return Err(ObfError::Recipe(format!("bad AddOpaque arguments `{a}`")));
                    }
                    Transform::AddOpaque { kind, count }
                }
                ("EncodeArithmetic", None) => Transform::EncodeArithmetic,
                ("EncodeLiterals", None) => Transform::EncodeLiterals,
                ("EncodeData", None) => Transform::EncodeData,
                ("Flatten", None) => Transform::Flatten,
                _ => return Err(ObfError::Recipe(format!("unknown transform `{item}`"))),
            };
            out.push(t);
        }
        if out.is_empty() {
            return Err(ObfError::Recipe("empty recipe".into()));
        }
        Ok(Recipe(out))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub label: Label,
    pub kind: Option<OpaqueKind>,
    pub template: Option<&'static str>,
}

impl LogEntry {
    pub const NORMAL: LogEntry = LogEntry { label: Label::Normal, kind: None, template: None };
}

/// Ground truth for every conditional jump of an obfuscated program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionLog {
    pub recipe: String,
    pub entries: BTreeMap<PredicateId, LogEntry>,
}

impl InjectionLog {
    /// Builds the log for `p` from the opaque entries keyed by
    /// (function, block label); every other conditional jump is NORMAL.
    fn build(p: &Program, opaque: &HashMap<(String, String), LogEntry>, recipe: &Recipe) -> InjectionLog {
        let mut entries = BTreeMap::new();
        for f in &p.functions {
            for id in enumerate_predicates(f) {
                let e = opaque.get(&(id.function.clone(), id.block.clone())).cloned().unwrap_or(LogEntry::NORMAL);
                entries.insert(id, e);
            }
        }
        InjectionLog { recipe: recipe.to_string(), entries }
    }

    pub fn label_of(&self, id: &PredicateId) -> Option<Label> {
        self.entries.get(id).map(|e| e.label)
    }

    pub fn opaque(&self) -> impl Iterator<Item = (&PredicateId, &LogEntry)> {
        self.entries.iter().filter(|(_, e)| e.label.is_opaque())
    }

    /// `predicate,label,kind,template` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("predicate,label,kind,template\n");
        for (id, e) in &self.entries {
            s.push_str(&format!(
                "{id},{},{},{}\n",
                e.label,
                e.kind.map(|k| k.as_str()).unwrap_or("-"),
                e.template.unwrap_or("-")
            ));
        }
        s
    }
}

/// Step budget for behavior comparisons.
pub const CHECK_BUDGET: u64 = 2_000_000;

/// Random input vector of `arity` values; each value is a byte or a full word.
pub fn random_inputs(rng: &mut impl Rng, arity: usize) -> Vec<u64> {
    (0..arity).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0..256) } else { rng.gen() }).collect()
}

/// Compares the observable behavior of `a` and `b` on `n` random inputs and
/// environments from `env`. Returns the first diverging input vector.
pub fn first_divergence(a: &Program, b: &Program, env: &EnvDomain, rng: &mut impl Rng, n: usize) -> Option<Vec<u64>> {
    let arity = a.entry_function().arity;
    if arity != b.entry_function().arity {
        return Some(Vec::new());
    }
    let (mut ea, mut eb) = (Executable::new(a), Executable::new(b));
    for _ in 0..n {
        let x = random_inputs(rng, arity);
        let e = env.sample(rng);
        let ra = ea.run(&x, &e, CHECK_BUDGET).ok();
        let rb = eb.run(&x, &e, CHECK_BUDGET).ok();
        let same = match (&ra, &rb) {
            (Some(Outcome::Returned(oa)), Some(Outcome::Returned(ob))) => oa == ob,
            (Some(Outcome::Fault(fa)), Some(Outcome::Fault(fb))) => fa == fb,
            (Some(Outcome::BudgetExhausted), Some(Outcome::BudgetExhausted)) => true,
            _ => false,
        };
        if !same {
            return Some(x);
        }
    }
    None
}

/// Number of random inputs used to check each recipe step.
pub const RECIPE_CHECK_INPUTS: usize = 32;

/// Applies `recipe` to the entry function of `p`, checking behavior after
/// every step.
pub fn apply_recipe(p: &Program, recipe: &Recipe, env: &EnvDomain, rng: &mut ChaCha8Rng) -> Result<(Program, InjectionLog), ObfError> {
    let func = p.entry.clone();
    let mut cur = p.clone();
    let mut opaque: HashMap<(String, String), LogEntry> = HashMap::new();
    for t in &recipe.0 {
        let next = match *t {
            Transform::AddOpaque { kind, count } => {
                let mut q = init_opaque(&cur, &func, rng)?;
                // One polarity per step.
                let pol = if rng.gen_bool(0.5) { Label::OpTrue } else { Label::OpFalse };
                for _ in 0..count {
                    let inj = inject_opaque(&q, &func, kind, pol, env, rng)?;
                    // The split block's old terminator now lives in the continuation.
                    if let Some(e) = opaque.remove(&(func.clone(), inj.split.0.clone())) {
                        opaque.insert((func.clone(), inj.split.1.clone()), e);
                    }
                    opaque.insert(
                        (func.clone(), inj.predicate.block.clone()),
                        LogEntry { label: pol, kind: Some(kind), template: Some(inj.template) },
                    );
                    q = inj.program;
                }
                q
            }
            Transform::EncodeArithmetic => encode_arithmetic(&cur, &func, rng)?,
            Transform::EncodeLiterals => encode_literals(&cur, &func, rng)?,
            Transform::EncodeData => {
                let codec = *DataCodec::ALL.choose(rng).expect("non-empty");
                encode_data(&cur, &func, codec, rng)?
            }
            Transform::Flatten => flatten(&cur, &func, rng)?,
        };
        if let Some(inputs) = first_divergence(p, &next, env, rng, RECIPE_CHECK_INPUTS) {
            return Err(ObfError::BehaviorChanged { transform: t.to_string(), inputs });
        }
        cur = next;
    }
    let log = InjectionLog::build(&cur, &opaque, recipe);
    Ok((cur, log))
}

pub(crate) fn function_index(p: &Program, func: &str) -> Result<usize, ObfError> {
    p.functions.iter().position(|f| f.name == func).ok_or_else(|| ObfError::UnknownFunction(func.to_string()))
}

#[cfg(test)]
mod tests;
