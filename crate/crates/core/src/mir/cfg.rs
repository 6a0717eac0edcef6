use std::collections::{HashMap, HashSet};

use super::*;

/// Liveness location bit for the flags (bits 0..16 are `r*`, 16..24 are `f*`).
pub const LOC_FLAGS: u32 = 1 << 24;

pub(crate) fn reg_bit(r: Reg) -> u32 {
    1 << r.0
}

pub(crate) fn freg_bit(r: FReg) -> u32 {
    1 << (16 + r.0)
}

/// (defined, used) location sets of one instruction.
pub(crate) fn inst_def_use(i: &Inst) -> (u32, u32) {
    let mut uses: u32 = i.use_regs().into_iter().map(reg_bit).fold(0, |a, b| a | b);
    let mut defs = i.def_reg().map(reg_bit).unwrap_or(0);
    match *i {
        Inst::Cmp { .. } => defs |= LOC_FLAGS,
        Inst::FBin { dst, lhs, rhs, .. } => {
            defs |= freg_bit(dst);
            uses |= freg_bit(lhs) | freg_bit(rhs);
        }
        Inst::Fcmp { lhs, rhs, .. } => uses |= freg_bit(lhs) | freg_bit(rhs),
        Inst::Itof { dst, .. } => defs |= freg_bit(dst),
        _ => {}
    }
    (defs, uses)
}

/// Successor block indices in DFS child order.
pub fn successors(f: &Function, block: usize) -> Vec<usize> {
    let map = f.label_map();
    f.blocks[block]
        .term
        .targets()
        .into_iter()
        .filter_map(|l| map.get(l).copied())
        .collect()
}

/// Blocks reachable from the entry block.
pub fn reachable_blocks(f: &Function) -> HashSet<usize> {
    let map = f.label_map();
    let mut seen = HashSet::new();
    let mut stack = vec![0usize];
    while let Some(b) = stack.pop() {
        if !seen.insert(b) {
            continue;
        }
        for t in f.blocks[b].term.targets() {
            if let Some(&s) = map.get(t) {
                stack.push(s);
            }
        }
    }
    seen
}

/// Every CondJump site, in block order, with dense ordinals.
pub fn enumerate_predicates(f: &Function) -> Vec<PredicateId> {
    f.blocks
        .iter()
        .filter(|b| matches!(b.term, Terminator::CondJump { .. }))
        .enumerate()
        .map(|(ordinal, b)| PredicateId { function: f.name.clone(), block: b.label.clone(), ordinal })
        .collect()
}

/// Back-edges `(from, to)` of a depth-first traversal from the entry block,
/// visiting children in terminator order: edges into a block that is still on
/// the traversal stack.
pub fn back_edges(f: &Function) -> HashSet<(usize, usize)> {
    let succ: Vec<Vec<usize>> = (0..f.blocks.len()).map(|b| successors(f, b)).collect();
    let mut state = vec![0u8; f.blocks.len()]; // 0 new, 1 on stack, 2 done
    let mut out = HashSet::new();
    // Explicit stack of (block, next child index).
    let mut stack = vec![(0usize, 0usize)];
    state[0] = 1;
    while let Some(&mut (b, ref mut next)) = stack.last_mut() {
        if *next < succ[b].len() {
            let s = succ[b][*next];
            *next += 1;
            match state[s] {
                0 => {
                    state[s] = 1;
                    stack.push((s, 0));
                }
                1 => {
                    out.insert((b, s));
                }
                _ => {}
            }
        } else {
            state[b] = 2;
            stack.pop();
        }
    }
    out
}

/// Backward liveness over registers, float registers and flags.
#[derive(Clone, Debug)]
pub struct Liveness {
    pub live_in: Vec<u32>,
    pub live_out: Vec<u32>,
    term_use: Vec<u32>,
    term_def: Vec<u32>,
}

impl Liveness {
    pub fn compute(f: &Function, arity_of: &dyn Fn(&str) -> usize) -> Liveness {
        let n = f.blocks.len();
        let map: HashMap<&str, usize> = f.label_map();
        let succ: Vec<Vec<usize>> = f
            .blocks
            .iter()
            .map(|b| b.term.targets().into_iter().filter_map(|l| map.get(l).copied()).collect())
            .collect();
        let (term_use, term_def): (Vec<u32>, Vec<u32>) = f
            .blocks
            .iter()
            .map(|b| match &b.term {
                Terminator::CondJump { .. } => (LOC_FLAGS, 0),
                Terminator::Return(r) => (reg_bit(*r), 0),
                Terminator::Call { callee, .. } => {
                    let k = arity_of(callee).min(NUM_REGS);
                    (((1u64 << k) - 1) as u32, reg_bit(Reg(0)))
                }
                Terminator::Jump(_) => (0, 0),
            })
            .unzip();
        let mut live_in = vec![0u32; n];
        let mut live_out = vec![0u32; n];
        let mut changed = true;
        while changed {
            changed = false;
            for b in (0..n).rev() {
                let out = succ[b].iter().fold(0, |acc, &s| acc | live_in[s]);
                let mut live = (out & !term_def[b]) | term_use[b];
                for i in f.blocks[b].insts.iter().rev() {
                    let (d, u) = inst_def_use(i);
                    live = (live & !d) | u;
                }
                if out != live_out[b] || live != live_in[b] {
                    live_out[b] = out;
                    live_in[b] = live;
                    changed = true;
                }
            }
        }
        Liveness { live_in, live_out, term_use, term_def }
    }

    /// Live set immediately before the terminator of `block`.
    pub fn live_before_term(&self, block: usize) -> u32 {
        (self.live_out[block] & !self.term_def[block]) | self.term_use[block]
    }
}

/// Live set after each instruction of `block`; entry `i` is the set live
/// between instruction `i` and `i + 1` (the last entry precedes the terminator).
/// Entry `insts.len()` is not included; use index `i - 1` for "before `i`".
pub fn live_after_each(f: &Function, block: usize, live: &Liveness) -> Vec<u32> {
    let insts = &f.blocks[block].insts;
    let mut out = vec![0u32; insts.len()];
    let mut cur = live.live_before_term(block);
    for (i, inst) in insts.iter().enumerate().rev() {
        out[i] = cur;
        let (d, u) = inst_def_use(inst);
        cur = (cur & !d) | u;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_asm;

    const TWO_BLOCKS: &str = "\
fn main(2 args)
a:
    cmp r0, 1
    jcc eq b c
b:
    cmp r1, 2
    jcc ult c d
c:
    cmp r0, r1
    jcc ne d a
d:
    ret r0
";

    #[test]
    fn no_predicates() {
        let p = parse_asm("fn main(1 args)\nentry:\n    jmp x\nx:\n    ret r0\n").unwrap();
        assert!(enumerate_predicates(&p.functions[0]).is_empty());
    }

    #[test]
    fn dense_ordinals_in_block_order() {
        let p = parse_asm(TWO_BLOCKS).unwrap();
        let ids = enumerate_predicates(&p.functions[0]);
        let got: Vec<(&str, usize)> = ids.iter().map(|i| (i.block.as_str(), i.ordinal)).collect();
        assert_eq!(got, vec![("a", 0), ("b", 1), ("c", 2)]);
    }

    #[test]
    fn back_edge_found() {
        let p = parse_asm(TWO_BLOCKS).unwrap();
        let be = back_edges(&p.functions[0]);
        assert_eq!(be, HashSet::from([(2, 0)]));
    }

    #[test]
    fn liveness_tracks_flags_and_args() {
        let p = parse_asm(
            "fn g(1 args)\ng0:\n    ret r0\nfn main(2 args)\ne:\n    add r3, r0, r1\n    mov r0, r3\n    call g k\nk:\n    ret r0\n",
        )
        .unwrap();
        let f = p.function("main").unwrap();
        let live = Liveness::compute(f, &|n| p.arity_of(n));
        assert_eq!(live.live_in[0], reg_bit(Reg(0)) | reg_bit(Reg(1)));
        let after = live_after_each(f, 0, &live);
        assert_eq!(after[0], reg_bit(Reg(3)));
        assert_eq!(after[1], reg_bit(Reg(0)));
    }
}
