//! Labelled corpus generation: random programs, obfuscation, the oracle
//! soundness gate and per-path documents for every raw-data set.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::deobf::{oracle_all, OracleConfig, Verdict};
use crate::mir::{emit_asm, PredicateId, Program};
use crate::obfuscator::{apply_recipe, generate_program, EnvDomain, GenConfig, InjectionLog, Label, Recipe};
use crate::rawdata::{predicate_documents, Record, SetKind};
use crate::symex::{Analyzer, PathBudget};

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Total samples; half NORMAL, a quarter each OP_TRUE and OP_FALSE.
    pub size: usize,
    /// Applied round-robin over program indices.
    pub recipes: Vec<Recipe>,
    pub budget: PathBudget,
    pub oracle: OracleConfig,
    pub gen: GenConfig,
    pub env: EnvDomain,
    /// Upper bound on generated programs.
    pub max_programs: usize,
    /// Most samples one program contributes to each class.
    pub class_cap: usize,
}

impl CorpusConfig {
    pub fn new(seed: u64, size: usize, recipes: Vec<Recipe>) -> CorpusConfig {
        CorpusConfig {
            seed,
            size,
            recipes,
            budget: PathBudget::default(),
            oracle: OracleConfig::default(),
            gen: GenConfig::default(),
            env: EnvDomain::standard(),
            max_programs: 100_000,
            class_cap: 8,
        }
    }

    /// Per-class sample quotas: NORMAL, OP_TRUE, OP_FALSE.
    pub fn quotas(&self) -> [usize; 3] {
        let quarter = self.size / 4;
        [self.size - 2 * quarter, quarter, quarter]
    }
}

/// Seed of the `index`-th program of a run.
pub fn program_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Content hash of a program's assembly.
pub fn program_id(p: &Program) -> String {
    let h = Sha256::digest(emit_asm(p).as_bytes());
    h[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Which samples a program supplies. Even indices are clean programs, built
/// with the recipe minus its opaque-predicate steps, and supply NORMAL
/// samples; odd indices get the full recipe and supply opaque samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Clean,
    Obfuscated,
}

impl Role {
    pub fn of(index: usize) -> Role {
        if index % 2 == 0 {
            Role::Clean
        } else {
            Role::Obfuscated
        }
    }

    fn labels(self) -> &'static [Label] {
        match self {
            Role::Clean => &[Label::Normal],
            Role::Obfuscated => &[Label::OpTrue, Label::OpFalse],
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusProgram {
    /// Id of the unobfuscated program.
    pub id: String,
    pub index: usize,
    pub role: Role,
    /// The recipe actually applied.
    pub recipe: Recipe,
    pub original: Program,
    pub program: Program,
    pub log: InjectionLog,
}

/// Why a program did not enter the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    Obfuscation(String),
    /// An injected predicate whose oracle verdict disagrees with its label.
    OpaqueMismatch(PredicateId),
    /// A NORMAL predicate that is invariant or never reached.
    NormalNotTwoWay(PredicateId),
    Symex(String),
}

/// Oracle counts over the injected predicates of one program.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateStats {
    pub opaque_checked: usize,
    pub opaque_matched: usize,
}

/// Generates, transforms and gates the `index`-th program.
pub fn build_program(cfg: &CorpusConfig, index: usize) -> (Result<CorpusProgram, Rejection>, GateStats) {
    let seed = program_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = generate_program(&mut rng, &cfg.gen);
    let role = Role::of(index);
    let recipe = cfg.recipes[(index / 2) % cfg.recipes.len()].clone();
    let recipe = if role == Role::Clean { recipe.without_opaque() } else { recipe };
    rng.set_stream(1);
    let mut stats = GateStats::default();
    let (program, log) = match apply_recipe(&original, &recipe, &cfg.env, &mut rng) {
        Ok(r) => r,
        Err(e) => return (Err(Rejection::Obfuscation(e.to_string())), stats),
    };
    let verdicts = oracle_all(&program, &cfg.env, &OracleConfig { seed, ..cfg.oracle });
    let mut rejection = None;
    for (id, entry) in &log.entries {
        let v = verdicts.get(id).and_then(|r| r.as_ref().ok()).map(|v| v.verdict);
        match entry.label {
            Label::Normal => {
                if v != Some(Verdict::TwoWay) && rejection.is_none() {
                    rejection = Some(Rejection::NormalNotTwoWay(id.clone()));
                }
            }
            l => {
                stats.opaque_checked += 1;
                let want = if l == Label::OpTrue { Verdict::AlwaysTrue } else { Verdict::AlwaysFalse };
                if v == Some(want) {
                    stats.opaque_matched += 1;
                } else {
                    rejection = Some(Rejection::OpaqueMismatch(id.clone()));
                }
            }
        }
    }
    if let Some(r) = rejection {
        return (Err(r), stats);
    }
    let cp = CorpusProgram { id: program_id(&original), index, role, recipe, original, program, log };
    (Ok(cp), stats)
}

/// One path reaching one predicate, with its normalized document per set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSample {
    pub program: String,
    pub predicate: PredicateId,
    pub path: usize,
    pub label: Label,
    pub recipe: String,
    /// Indexed like `SetKind::ALL`.
    pub docs: [String; 3],
}

impl CorpusSample {
    pub fn doc(&self, set: SetKind) -> &str {
        &self.docs[set as usize]
    }

    pub fn record(&self, set: SetKind) -> Record {
        Record {
            doc: self.doc(set).to_string(),
            label: self.label,
            program: self.program.clone(),
            predicate: self.predicate.to_string(),
            path: self.path,
            set,
            recipe: self.recipe.clone(),
        }
    }
}

/// Per-path samples of the predicates the program's role supplies, in
/// predicate then path order.
pub fn program_samples(cp: &CorpusProgram, budget: PathBudget) -> Result<Vec<CorpusSample>, Rejection> {
    let analyzer = Analyzer::new(&cp.program);
    let mut out = Vec::new();
    for (id, entry) in cp.log.entries.iter().filter(|(_, e)| cp.role.labels().contains(&e.label)) {
        let mut per_set: Vec<Vec<String>> = Vec::new();
        for set in SetKind::ALL {
            let docs = predicate_documents(&analyzer, &cp.id, id, set, budget).map_err(|e| Rejection::Symex(e.to_string()))?;
            per_set.push(docs.iter().map(|d| d.text()).collect());
        }
        for path in 0..per_set[0].len() {
            out.push(CorpusSample {
                program: cp.id.clone(),
                predicate: id.clone(),
                path,
                label: entry.label,
                recipe: cp.recipe.to_string(),
                docs: [per_set[0][path].clone(), per_set[1][path].clone(), per_set[2][path].clone()],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub samples: Vec<CorpusSample>,
    /// Programs contributing at least one sample, in index order.
    pub programs: Vec<CorpusProgram>,
    pub rejected: Vec<(usize, Rejection)>,
    pub gate: GateStats,
    pub generated: usize,
}

impl Corpus {
    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// One JSON record per line for `set`.
    pub fn jsonl(&self, set: SetKind) -> String {
        let mut s = String::new();
        for x in &self.samples {
            s.push_str(&x.record(set).to_json_line());
            s.push('\n');
        }
        s
    }
}

fn class_of(l: Label) -> usize {
    match l {
        Label::Normal => 0,
        Label::OpTrue => 1,
        Label::OpFalse => 2,
    }
}

/// Programs per parallel batch.
const BATCH: usize = 16;

/// Builds a balanced corpus. Programs are processed in index order and each
/// sample fills its class quota first come, first served, so the result
/// depends only on the configuration. Samples come out sorted by program id,
/// predicate id and path.
pub fn build_corpus(cfg: &CorpusConfig) -> Corpus {
    let quotas = cfg.quotas();
    let mut filled = [0usize; 3];
    let mut corpus = Corpus::default();
    let mut next = 0;
    while filled.iter().zip(&quotas).any(|(f, q)| f < q) && next < cfg.max_programs {
        let batch: Vec<usize> = (next..(next + BATCH).min(cfg.max_programs)).collect();
        next += batch.len();
        let built: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let (r, stats) = build_program(cfg, i);
                let r = r.and_then(|cp| program_samples(&cp, cfg.budget).map(|s| (cp, s)));
                (i, r, stats)
            })
            .collect();
        for (i, r, stats) in built {
            corpus.generated += 1;
            corpus.gate.opaque_checked += stats.opaque_checked;
            corpus.gate.opaque_matched += stats.opaque_matched;
            let (cp, samples) = match r {
                Ok(x) => x,
                Err(e) => {
                    corpus.rejected.push((i, e));
                    continue;
                }
            };
            let mut used = false;
            let mut taken = [0usize; 3];
            for s in spread(samples) {
                let c = class_of(s.label);
                if filled[c] < quotas[c] && taken[c] < cfg.class_cap {
                    filled[c] += 1;
                    taken[c] += 1;
                    corpus.samples.push(s);
                    used = true;
                }
            }
            if used {
                corpus.programs.push(cp);
            }
        }
    }
    corpus.samples.sort_by(|a, b| (&a.program, &a.predicate, a.path).cmp(&(&b.program, &b.predicate, b.path)));
    corpus
}

/// Reorders one program's samples path-major: first path of every predicate,
/// then the second, and so on.
fn spread(samples: Vec<CorpusSample>) -> Vec<CorpusSample> {
    let mut v: Vec<(usize, usize, CorpusSample)> = Vec::with_capacity(samples.len());
    let mut rank = 0;
    for (i, s) in samples.into_iter().enumerate() {
        if i > 0 && s.path == 0 {
            rank += 1;
        }
        v.push((s.path, rank, s));
    }
    v.sort_by_key(|x| (x.0, x.1));
    v.into_iter().map(|x| x.2).collect()
}

/// Sample counts per program id.
pub fn program_histogram(samples: &[CorpusSample]) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.program.as_str()).or_insert(0) += 1;
    }
    m
}
