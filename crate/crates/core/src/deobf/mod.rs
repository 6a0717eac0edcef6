//! Opaque-predicate removal: brute-force oracle, CFG stripping, equivalence
//! checking and the model-driven pipeline.

mod oracle;
mod pipeline;

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mir::{reachable_blocks, Env, Executable, Outcome, PredicateId, Program, Terminator};
use crate::obfuscator::{random_inputs, CHECK_BUDGET};

pub use oracle::{observe, oracle, oracle_all, sweep_inputs, Observations, OracleConfig, OracleError, OracleVerdict, Verdict, Witness};
pub use pipeline::{
    run_pipeline, summary_csv, Action, Detector, Mode, ModelDetector, PipelineConfig, PredicateRow, DeobfReport, SUMMARY_HEADER,
};

/// Predicate to strip, mapped to whether its taken edge is the live one.
pub type Verdicts = BTreeMap<PredicateId, bool>;

/// Replaces each listed conditional jump by a jump to its live edge and drops
/// the blocks that become unreachable. Predicates are matched by function and
/// block label; blocks that no longer end in a conditional jump are skipped.
pub fn strip(p: &Program, verdicts: &Verdicts) -> Program {
    let mut q = p.clone();
    for f in &mut q.functions {
        let mut changed = false;
        for (id, &taken_live) in verdicts.iter().filter(|(id, _)| id.function == f.name) {
            let Some(b) = f.blocks.iter_mut().find(|b| b.label == id.block) else { continue };
            if let Terminator::CondJump { taken, fallthrough, .. } = &b.term {
                let live = if taken_live { taken } else { fallthrough }.clone();
                b.term = Terminator::Jump(live);
                changed = true;
            }
        }
        if changed {
            let keep = reachable_blocks(f);
            let mut i = 0;
            f.blocks.retain(|_| {
                i += 1;
                keep.contains(&(i - 1))
            });
        }
    }
    q
}

/// A run on which two programs disagree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub inputs: Vec<u64>,
    /// `None` when the program rejected the input vector.
    pub left: Option<Outcome>,
    pub right: Option<Outcome>,
}

/// `n` random input vectors for a program of `arity` inputs.
pub fn equivalence_inputs(seed: u64, arity: usize, n: usize) -> Vec<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_inputs(&mut rng, arity)).collect()
}

/// Passes iff `p` and `q` have identical outcomes on every input vector.
pub fn verify_equivalence(p: &Program, q: &Program, inputs: &[Vec<u64>], env: &Env) -> Result<(), Mismatch> {
    let (mut ep, mut eq) = (Executable::new(p), Executable::new(q));
    for x in inputs {
        let left = ep.run(x, env, CHECK_BUDGET).ok();
        let right = eq.run(x, env, CHECK_BUDGET).ok();
        if left.is_none() || left != right {
            return Err(Mismatch { inputs: x.clone(), left, right });
        }
    }
    Ok(())
}
