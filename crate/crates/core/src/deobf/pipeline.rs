use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{equivalence_inputs, observe, oracle_all, strip, sweep_inputs, verify_equivalence, OracleConfig, Verdict, Verdicts};
use crate::features::TermCounts;
use crate::learn::{majority_vote, Task, TrainedModel};
use crate::mir::{enumerate_predicates, PredicateId, Program};
use crate::obfuscator::{random_inputs, EnvDomain, InjectionLog, Label};
use crate::rawdata::{predicate_documents, SetKind};
use crate::symex::{Analyzer, PathBudget};

/// Predicate-level classifier over the per-path documents of one predicate.
pub trait Detector {
    fn classify(&self, id: &PredicateId, docs: &[TermCounts]) -> Label;
}

/// Detection model, then resilience model on predicates judged opaque; both
/// vote over paths.
pub struct ModelDetector<'a> {
    pub detector: &'a TrainedModel,
    pub deobfuscator: &'a TrainedModel,
}

impl Detector for ModelDetector<'_> {
    fn classify(&self, _id: &PredicateId, docs: &[TermCounts]) -> Label {
        let vote = |m: &TrainedModel, task: Task| {
            let preds: Vec<usize> = docs.iter().map(|d| m.predict(d)).collect();
            majority_vote(&preds, 2, task.tie_class())
        };
        if vote(self.detector, Task::Detection) == 0 {
            return Label::Normal;
        }
        // Deobfuscation classes are FALSE, TRUE.
        if vote(self.deobfuscator, Task::Deobfuscation) == 1 {
            Label::OpTrue
        } else {
            Label::OpFalse
        }
    }
}

pub enum Mode<'a> {
    Model(&'a dyn Detector),
    /// Strip exactly the predicates the oracle proves invariant.
    Oracle(OracleConfig),
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub budget: PathBudget,
    pub env: EnvDomain,
    pub seed: u64,
    /// Random runs used to veto model verdicts; 0 disables the check.
    pub guard_inputs: usize,
    pub verify_inputs: usize,
    /// Also verify on the oracle's 8-bit input sweep.
    pub verify_sweep: bool,
    /// Undo strips that break equivalence.
    pub revert: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            budget: PathBudget::default(),
            env: EnvDomain::standard(),
            seed: 0,
            guard_inputs: 32,
            verify_inputs: 64,
            verify_sweep: true,
            revert: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Removed,
    Kept,
    /// Predicted opaque, but the random runs saw the other direction.
    Guarded,
    /// Stripped, then restored after an equivalence failure.
    Reverted,
    Failed(String),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Removed => f.write_str("removed"),
            Action::Kept => f.write_str("kept"),
            Action::Guarded => f.write_str("guarded"),
            Action::Reverted => f.write_str("reverted"),
            Action::Failed(e) => write!(f, "error: {e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateRow {
    pub id: PredicateId,
    pub truth: Option<Label>,
    pub predicted: Label,
    pub action: Action,
}

#[derive(Clone, Debug)]
pub struct DeobfReport {
    pub rows: Vec<PredicateRow>,
    pub removed_opaque: usize,
    pub total_opaque: usize,
    pub fp: usize,
    pub fn_: usize,
    pub errors: usize,
    /// Whether the emitted program passed the final equivalence check.
    pub equivalent: bool,
    pub wall: Duration,
}

impl DeobfReport {
    /// Percentage of ground-truth opaque predicates removed.
    pub fn removal_rate(&self) -> f64 {
        if self.total_opaque == 0 {
            100.0
        } else {
            100.0 * self.removed_opaque as f64 / self.total_opaque as f64
        }
    }

    /// `predicate,truth,predicted,action` lines.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("predicate,truth,predicted,action\n");
        for r in &self.rows {
            let truth = r.truth.map(|l| l.as_str()).unwrap_or("-");
            s.push_str(&format!("{},{truth},{},{}\n", r.id, r.predicted, r.action));
        }
        s
    }
}

pub const SUMMARY_HEADER: &str = "Tool,Obfuscation,OP detection rate %,#FP,#FN,Errors";

/// One summary line over many program reports.
pub fn summary_csv(tool: &str, obfuscation: &str, reports: &[DeobfReport]) -> String {
    let removed: usize = reports.iter().map(|r| r.removed_opaque).sum();
    let total: usize = reports.iter().map(|r| r.total_opaque).sum();
    let rate = if total == 0 { 100.0 } else { 100.0 * removed as f64 / total as f64 };
    format!(
        "{tool},{obfuscation},{rate:.2},{},{},{}",
        reports.iter().map(|r| r.fp).sum::<usize>(),
        reports.iter().map(|r| r.fn_).sum::<usize>(),
        reports.iter().map(|r| r.errors).sum::<usize>()
    )
}

fn predictions(p: &Program, mode: &Mode<'_>, cfg: &PipelineConfig) -> BTreeMap<PredicateId, Result<Label, String>> {
    match mode {
        Mode::Oracle(oc) => oracle_all(p, &cfg.env, oc)
            .into_iter()
            .map(|(id, v)| {
                let l = v.map(|v| match v.verdict {
                    Verdict::AlwaysTrue => Label::OpTrue,
                    Verdict::AlwaysFalse => Label::OpFalse,
                    Verdict::TwoWay => Label::Normal,
                });
                (id, l.map_err(|e| e.to_string()))
            })
            .collect(),
        Mode::Model(det) => {
            let analyzer = Analyzer::new(p);
            p.functions
                .iter()
                .flat_map(enumerate_predicates)
                .map(|id| {
                    let r = predicate_documents(&analyzer, &p.entry, &id, SetKind::Set3, cfg.budget)
                        .map_err(|e| e.to_string())
                        .and_then(|docs| {
                            if docs.is_empty() {
                                return Err("no path reaches the predicate".to_string());
                            }
                            let tc: Vec<TermCounts> = docs.iter().map(|d| TermCounts::from_doc(&d.text())).collect();
                            Ok(det.classify(&id, &tc))
                        });
                    (id, r)
                })
                .collect()
        }
    }
}

/// Classifies every predicate of `p`, strips the ones judged opaque and
/// checks the result. `log` supplies ground truth for FP/FN bookkeeping.
pub fn run_pipeline(p: &Program, mode: &Mode<'_>, log: Option<&InjectionLog>, cfg: &PipelineConfig) -> (Program, DeobfReport) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let preds = predictions(p, mode, cfg);

    let guard = if matches!(mode, Mode::Model(_)) && cfg.guard_inputs > 0 {
        let arity = p.entry_function().arity;
        let cases: Vec<_> = (0..cfg.guard_inputs).map(|_| (random_inputs(&mut rng, arity), cfg.env.sample(&mut rng))).collect();
        Some(observe(p, cases, crate::obfuscator::CHECK_BUDGET))
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut verdicts = Verdicts::new();
    for (id, pred) in preds {
        let truth = log.and_then(|l| l.label_of(&id));
        let (predicted, action) = match pred {
            Err(e) => (Label::Normal, Action::Failed(e)),
            Ok(Label::Normal) => (Label::Normal, Action::Kept),
            Ok(l) => {
                let taken_live = l == Label::OpTrue;
                if guard.as_ref().is_some_and(|g| g.contradicts(&id, taken_live)) {
                    (l, Action::Guarded)
                } else {
                    verdicts.insert(id.clone(), taken_live);
                    (l, Action::Removed)
                }
            }
        };
        rows.push(PredicateRow { id, truth, predicted, action });
    }

    let arity = p.entry_function().arity;
    let mut inputs = equivalence_inputs(cfg.seed ^ 0x5eed, arity, cfg.verify_inputs);
    if cfg.verify_sweep && !verdicts.is_empty() {
        inputs.extend(sweep_inputs(arity));
    }
    let env = cfg.env.sample(&mut rng);
    let mut q = strip(p, &verdicts);
    let mut check = verify_equivalence(p, &q, &inputs, &env);
    if cfg.revert {
        while let Err(m) = &check {
            if verdicts.is_empty() {
                break;
            }
            let seen = observe(p, [(m.inputs.clone(), env)], crate::obfuscator::CHECK_BUDGET);
            let before = verdicts.len();
            verdicts.retain(|id, t| !seen.contradicts(id, *t));
            if verdicts.len() == before {
                verdicts.clear();
            }
            q = strip(p, &verdicts);
            check = verify_equivalence(p, &q, &inputs, &env);
        }
        for r in &mut rows {
            if r.action == Action::Removed && !verdicts.contains_key(&r.id) {
                r.action = Action::Reverted;
            }
        }
    }

    let removed = |r: &PredicateRow| r.action == Action::Removed;
    let opaque = |r: &PredicateRow| r.truth.is_some_and(Label::is_opaque);
    let report = DeobfReport {
        removed_opaque: rows.iter().filter(|r| opaque(r) && removed(r)).count(),
        total_opaque: rows.iter().filter(|r| opaque(r)).count(),
        fp: rows.iter().filter(|r| r.truth == Some(Label::Normal) && removed(r)).count(),
        fn_: rows.iter().filter(|r| opaque(r) && !removed(r)).count(),
        errors: rows.iter().filter(|r| matches!(r.action, Action::Failed(_))).count(),
        equivalent: check.is_ok(),
        wall: start.elapsed(),
        rows,
    };
    (q, report)
}
