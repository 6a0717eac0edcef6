//! Brute-force ground truth: exhaustive byte sweep plus random trials.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mir::{enumerate_predicates, Env, Executable, Outcome, PredicateId, Program, Terminator, Tracer};
use crate::obfuscator::EnvDomain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OracleConfig {
    /// Random 64-bit trials after the byte sweep.
    pub random_trials: usize,
    /// Step budget per run.
    pub step_budget: u64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { random_trials: 10_000, step_budget: 200_000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    AlwaysTrue,
    AlwaysFalse,
    TwoWay,
}

/// Inputs and environment of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Witness {
    pub inputs: Vec<u64>,
    pub env: Env,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleVerdict {
    pub verdict: Verdict,
    /// First run that took the taken edge.
    pub taken: Option<Witness>,
    /// First run that took the fallthrough edge.
    pub fallthrough: Option<Witness>,
    /// Evaluation counts, taken then fallthrough.
    pub hits: [u64; 2],
    /// Runs performed, sweep included.
    pub runs: usize,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("predicate {0} does not exist")]
    UnknownPredicate(PredicateId),
    #[error("predicate {0} was never reached")]
    Unobserved(PredicateId),
    #[error("predicate {predicate}: {runs} runs exhausted the step budget")]
    BudgetExhausted { predicate: PredicateId, runs: usize },
}

/// Branch directions seen over a set of runs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Observations {
    pub hits: BTreeMap<PredicateId, [u64; 2]>,
    pub witnesses: BTreeMap<PredicateId, [Option<Witness>; 2]>,
    pub runs: usize,
    pub exhausted: usize,
}

impl Observations {
    /// Whether `id` was seen going the way a `taken_live` strip would not.
    pub fn contradicts(&self, id: &PredicateId, taken_live: bool) -> bool {
        self.hits.get(id).is_some_and(|h| if taken_live { h[1] > 0 } else { h[0] > 0 })
    }
}

struct BranchTrace {
    offsets: Vec<usize>,
    slot: Vec<Option<usize>>,
    hits: Vec<[u64; 2]>,
    fresh: Vec<(usize, usize)>,
}

impl Tracer for BranchTrace {
    fn branch(&mut self, func: usize, block: usize, taken: bool) {
        if let Some(s) = self.slot[self.offsets[func] + block] {
            let d = usize::from(!taken);
            if self.hits[s][d] == 0 {
                self.fresh.push((s, d));
            }
            self.hits[s][d] += 1;
        }
    }
}

/// Runs `p` on every case and records each predicate's directions.
pub fn observe<I>(p: &Program, cases: I, step_budget: u64) -> Observations
where
    I: IntoIterator<Item = (Vec<u64>, Env)>,
{
    let mut ids = Vec::new();
    let mut offsets = Vec::new();
    let mut slot = Vec::new();
    for f in &p.functions {
        offsets.push(slot.len());
        let preds = enumerate_predicates(f);
        let mut next = preds.iter();
        for b in &f.blocks {
            if matches!(b.term, Terminator::CondJump { .. }) {
                slot.push(Some(ids.len()));
                ids.push(next.next().expect("one id per conditional jump").clone());
            } else {
                slot.push(None);
            }
        }
    }
    let mut tr = BranchTrace { offsets, slot, hits: vec![[0; 2]; ids.len()], fresh: Vec::new() };
    let mut wit: Vec<[Option<Witness>; 2]> = vec![[None, None]; ids.len()];
    let mut exe = Executable::new(p);
    let (mut runs, mut exhausted) = (0, 0);
    for (inputs, env) in cases {
        runs += 1;
        if let Ok(Outcome::BudgetExhausted) = exe.run_traced(&inputs, &env, step_budget, &mut tr) {
            exhausted += 1;
        }
        for (s, d) in tr.fresh.drain(..) {
            wit[s][d] = Some(Witness { inputs: inputs.clone(), env });
        }
    }
    Observations {
        hits: ids.iter().cloned().zip(tr.hits).collect(),
        witnesses: ids.into_iter().zip(wit).collect(),
        runs,
        exhausted,
    }
}

/// Byte-sweep inputs: joint over all inputs when there are at most two,
/// otherwise one input at a time with the others zero.
pub fn sweep_inputs(arity: usize) -> Vec<Vec<u64>> {
    match arity {
        0 => vec![Vec::new()],
        1 => (0..256).map(|x| vec![x]).collect(),
        2 => (0..256 * 256).map(|i| vec![i >> 8, i & 255]).collect(),
        _ => {
            let mut out = Vec::with_capacity(arity * 256);
            for k in 0..arity {
                for x in 0..256 {
                    let mut v = vec![0; arity];
                    v[k] = x;
                    out.push(v);
                }
            }
            out
        }
    }
}

/// Verdicts for every conditional jump of `p`.
pub fn oracle_all(p: &Program, env: &EnvDomain, cfg: &OracleConfig) -> BTreeMap<PredicateId, Result<OracleVerdict, OracleError>> {
    let arity = p.entry_function().arity;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sweep = sweep_inputs(arity);
    // One environment per block of 256 sweep inputs.
    let envs: Vec<Env> = (0..sweep.len().div_ceil(256)).map(|_| env.sample(&mut rng)).collect();
    let randoms: Vec<(Vec<u64>, Env)> = (0..cfg.random_trials)
        .map(|_| {
            let x: Vec<u64> = (0..arity).map(|_| rng.gen()).collect();
            (x, env.sample(&mut rng))
        })
        .collect();
    let cases = sweep.into_iter().enumerate().map(|(i, x)| (x, envs[i / 256])).chain(randoms);
    let obs = observe(p, cases, cfg.step_budget);
    obs.hits
        .iter()
        .map(|(id, h)| {
            let w = &obs.witnesses[id];
            let v = match (h[0] > 0, h[1] > 0) {
                _ if h[0] == 0 && h[1] == 0 && obs.exhausted == 0 => Err(OracleError::Unobserved(id.clone())),
                (true, true) => Ok(Verdict::TwoWay),
                _ if obs.exhausted > 0 => Err(OracleError::BudgetExhausted { predicate: id.clone(), runs: obs.exhausted }),
                (true, false) => Ok(Verdict::AlwaysTrue),
                _ => Ok(Verdict::AlwaysFalse),
            };
            let r = v.map(|verdict| OracleVerdict {
                verdict,
                taken: w[0].clone(),
                fallthrough: w[1].clone(),
                hits: *h,
                runs: obs.runs,
            });
            (id.clone(), r)
        })
        .collect()
}

/// Verdict for one predicate.
pub fn oracle(p: &Program, target: &PredicateId, env: &EnvDomain, cfg: &OracleConfig) -> Result<OracleVerdict, OracleError> {
    oracle_all(p, env, cfg)
        .remove(target)
        .unwrap_or_else(|| Err(OracleError::UnknownPredicate(target.clone())))
}
