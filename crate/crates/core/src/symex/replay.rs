//! Differential check of a symbolic state against the concrete interpreter.

use std::collections::HashMap;

use super::{Dest, SymbolicState, CALL_PREFIX};
use crate::mir::{Env, Executable, Program, Tracer, WriteEvent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Replay {
    /// The concrete run did not follow the state's path.
    OffPath,
    /// Every assignment evaluated to the concrete value; carries the concrete
    /// branch direction at the end of the path (`true` = taken).
    Match { taken: bool },
    /// Assignment `index` disagreed with the concrete run.
    Mismatch { index: usize, symbolic: Option<u64>, concrete: u64 },
}

#[derive(Debug)]
enum Event {
    Block(usize),
    Write(WriteEvent),
    Branch(bool),
}

struct Recorder {
    func: usize,
    events: Vec<Event>,
    limit: usize,
}

impl Tracer for Recorder {
    const WANTS_WRITES: bool = true;

    fn block(&mut self, func: usize, block: usize, depth: usize) {
        if depth == 0 && func == self.func && self.events.len() < self.limit {
            self.events.push(Event::Block(block));
        }
    }

    fn branch(&mut self, func: usize, _block: usize, taken: bool) {
        if func == self.func && self.events.len() < self.limit {
            self.events.push(Event::Branch(taken));
        }
    }

    fn write(&mut self, ev: WriteEvent) {
        let depth = match ev {
            WriteEvent::Reg { depth, .. }
            | WriteEvent::FReg { depth, .. }
            | WriteEvent::Flags { depth, .. }
            | WriteEvent::Mem { depth, .. } => depth,
        };
        if depth == 0 && self.events.len() < self.limit {
            self.events.push(Event::Write(ev));
        }
    }
}

/// Runs `program` (whose entry function must be the state's function) on
/// `inputs` and compares every SSA assignment of `state` with the concrete
/// value written at the same program point, then the final branch target with
/// the concrete branch direction.
pub fn replay(program: &Program, state: &SymbolicState, inputs: &[u64], env: &Env, budget: u64) -> Replay {
    let f = program.entry_function();
    let map = f.label_map();
    let path: Vec<usize> = state.path.0.iter().map(|l| map[l.as_str()]).collect();
    let mut exe = Executable::new(program);
    let func = program.functions.iter().position(|g| g.name == f.name).expect("entry exists");
    let mut rec = Recorder { func, events: Vec::new(), limit: 1 << 20 };
    if exe.run_traced(inputs, env, budget, &mut rec).is_err() {
        return Replay::OffPath;
    }

    // Concrete writes made inside the path's blocks, and the final direction.
    let mut writes = Vec::new();
    let mut taken = None;
    let mut k = 0usize;
    for ev in &rec.events {
        match ev {
            Event::Block(b) => {
                if k == path.len() {
                    break;
                }
                if *b != path[k] {
                    return Replay::OffPath;
                }
                k += 1;
            }
            Event::Write(w) if k > 0 && k <= path.len() => writes.push(*w),
            Event::Branch(t) if k == path.len() => taken = Some(*t),
            _ => {}
        }
    }
    let Some(taken) = (k == path.len()).then_some(taken).flatten() else {
        return Replay::OffPath;
    };

    let mut vals: HashMap<String, u64> = HashMap::new();
    for (i, v) in inputs.iter().enumerate() {
        vals.insert(format!("r{i}"), *v);
    }
    for (i, v) in env.iter().enumerate() {
        vals.insert(super::env_symbol(i as u8), *v);
    }
    // Expand concrete events so that one `cmp` yields four flag values.
    let mut concrete: Vec<(Option<u64>, u64)> = Vec::new(); // (address for stores, value)
    for w in writes {
        match w {
            WriteEvent::Reg { value, .. } | WriteEvent::FReg { value, .. } => concrete.push((None, value)),
            WriteEvent::Flags { flags, .. } => {
                for b in [flags.zf, flags.sf, flags.cf, flags.of] {
                    concrete.push((None, b as u64));
                }
            }
            WriteEvent::Mem { addr, value, .. } => concrete.push((Some(addr), value)),
        }
    }
    if concrete.len() != state.assignments.len() {
        return Replay::Mismatch { index: concrete.len().min(state.assignments.len()), symbolic: None, concrete: 0 };
    }
    for (index, (a, (caddr, cval))) in state.assignments.iter().zip(concrete).enumerate() {
        if let Dest::Id { name, .. } = &a.dest {
            // Havocked call results take the concrete return value.
            if let super::Expr::Id { name: sym, .. } = &a.value {
                if sym.starts_with(CALL_PREFIX) {
                    vals.insert(sym.clone(), cval);
                }
            }
            let got = a.value.eval(&|n| vals.get(n).copied(), &|_| 0);
            if got != Some(cval) {
                return Replay::Mismatch { index, symbolic: got, concrete: cval };
            }
            vals.insert(name.clone(), cval);
        } else if let Dest::Mem { addr, .. } = &a.dest {
            let sym_addr = addr.eval(&|n| vals.get(n).copied(), &|_| 0);
            let got = a.value.eval(&|n| vals.get(n).copied(), &|_| 0);
            if sym_addr != caddr || got != Some(cval) {
                return Replay::Mismatch { index, symbolic: got, concrete: cval };
            }
        }
    }
    let addrs = program.block_addresses();
    let Some(crate::mir::Terminator::CondJump { taken: t, fallthrough: fl, .. }) =
        f.block(state.path.0.last().expect("non-empty path")).map(|b| &b.term)
    else {
        return Replay::OffPath;
    };
    let want = addrs[&(f.name.clone(), if taken { t.clone() } else { fl.clone() })];
    let got = state.predicate_dst.eval(&|n| vals.get(n).copied(), &|_| 0);
    if got != Some(want) {
        return Replay::Mismatch { index: state.assignments.len(), symbolic: got, concrete: want };
    }
    Replay::Match { taken }
}
