use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{function_index, ObfError};
use crate::mir::{BasicBlock, Cond, Inst, Liveness, Program, Reg, Src, Terminator, LOC_FLAGS, NUM_REGS};

/// Routes every edge of `func` through a dispatcher: a chain of
/// `cmp state, id; jcc eq` blocks selecting the next original block by the
/// value of a state register. Each edge becomes `movimm state, id` followed by
/// a jump to the dispatcher.
pub fn flatten(p: &Program, func: &str, rng: &mut ChaCha8Rng) -> Result<Program, ObfError> {
    let fi = function_index(p, func)?;
    let f = &p.functions[fi];
    let unsupported = || ObfError::FlattenUnsupported(func.to_string());
    let live = Liveness::compute(f, &|n| p.arity_of(n));
    let any_live = live.live_in.iter().fold(0u32, |a, &b| a | b);
    if any_live & LOC_FLAGS != 0 {
        return Err(unsupported());
    }
    let mut candidates: Vec<Reg> =
        (0..NUM_REGS as u8).map(Reg).filter(|r| r.0 as usize >= f.arity.max(1) && any_live & (1 << r.0) == 0).collect();
    candidates.shuffle(rng);
    let state = *candidates.first().ok_or_else(unsupported)?;

    let mut ids: Vec<u64> = Vec::with_capacity(f.blocks.len());
    while ids.len() < f.blocks.len() {
        let v = rng.gen_range(1..1u64 << 16);
        if !ids.contains(&v) {
            ids.push(v);
        }
    }
    let id_of: HashMap<&str, u64> = f.blocks.iter().zip(&ids).map(|(b, &v)| (b.label.as_str(), v)).collect();

    let mut g = f.clone();
    let entry = g.fresh_label("flat");
    g.blocks.insert(0, BasicBlock { label: entry.clone(), insts: vec![], term: Terminator::Return(state) });
    let mut order: Vec<usize> = (0..f.blocks.len()).collect();
    order.shuffle(rng);
    let mut dispatch: Vec<String> = Vec::new();
    for _ in 0..order.len().saturating_sub(1) {
        let l = g.fresh_label("disp");
        g.blocks.push(BasicBlock { label: l.clone(), insts: vec![], term: Terminator::Return(state) });
        dispatch.push(l);
    }
    let head = dispatch.first().cloned().unwrap_or_else(|| f.blocks[order[0]].label.clone());

    let mut tramps: Vec<BasicBlock> = Vec::new();
    let tramp = |g: &crate::mir::Function, target: &str, tramps: &mut Vec<BasicBlock>| -> String {
        let used: Vec<&str> = tramps.iter().map(|b| b.label.as_str()).collect();
        let label = (0..)
            .map(|n| format!("edge{n}"))
            .find(|l| g.block(l).is_none() && !used.contains(&l.as_str()))
            .expect("unbounded label space");
        tramps.push(BasicBlock {
            label: label.clone(),
            insts: vec![Inst::MovImm { dst: state, imm: id_of[target] }],
            term: Terminator::Jump(head.clone()),
        });
        label
    };
    for bi in 1..=f.blocks.len() {
        let term = g.blocks[bi].term.clone();
        let new_term = match term {
            Terminator::Jump(t) => {
                g.blocks[bi].insts.push(Inst::MovImm { dst: state, imm: id_of[t.as_str()] });
                Terminator::Jump(head.clone())
            }
            Terminator::CondJump { cond, taken, fallthrough } => Terminator::CondJump {
                cond,
                taken: tramp(&g, &taken, &mut tramps),
                fallthrough: tramp(&g, &fallthrough, &mut tramps),
            },
            Terminator::Call { callee, then } => Terminator::Call { callee, then: tramp(&g, &then, &mut tramps) },
            t @ Terminator::Return(_) => t,
        };
        g.blocks[bi].term = new_term;
    }
    g.blocks.extend(tramps);

    g.blocks[0].insts.push(Inst::MovImm { dst: state, imm: ids[0] });
    g.blocks[0].term = Terminator::Jump(head);
    for (j, d) in dispatch.iter().enumerate() {
        let b = &f.blocks[order[j]].label;
        let next = dispatch.get(j + 1).cloned().unwrap_or_else(|| f.blocks[order[j + 1]].label.clone());
        let di = g.block_index(d).expect("dispatcher block exists");
        g.blocks[di].insts = vec![Inst::Cmp { lhs: state, rhs: Src::Imm(id_of[b.as_str()]) }];
        g.blocks[di].term = Terminator::CondJump { cond: Cond::Eq, taken: b.clone(), fallthrough: next };
    }
    let mut q = p.clone();
    q.functions[fi] = g;
    Ok(q)
}
