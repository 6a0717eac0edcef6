//! Batch front-end: corpus generation, studies, training, cross-validation
//! and deobfuscation runs. Every command writes into the configured output
//! directory together with a manifest carrying the config hash.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{build_corpus, build_program, CorpusConfig, CorpusProgram};
use crate::deobf::{run_pipeline, summary_csv, Mode, ModelDetector, OracleConfig, PipelineConfig, SUMMARY_HEADER};
use crate::features::{FeatureKind, TermCounts};
use crate::learn::{kfold_cv, CvConfig, CvReport, ModelKind, ModelParams, Task, TrainedModel};
use crate::obfuscator::{Label, Recipe, Transform};
use crate::rawdata::{cross_label_similarity, DocMeta, RawDocument, Record, Sample, SetKind};
use crate::symex::PathBudget;

pub const MIN_SIZE: usize = 1000;
pub const MAX_SIZE: usize = 100_000;
pub const DEFAULT_RECIPES: &str = "AddOpaque(Arithmetic,8);AddOpaque(MBA,8);AddOpaque(Environment,8)";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("analysis: {0}")]
    Analysis(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Analysis(_) => 2,
        }
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn analysis_err(e: impl ToString) -> CliError {
    CliError::Analysis(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DeobfMode {
    Model,
    Oracle,
}

impl DeobfMode {
    fn as_str(self) -> &'static str {
        match self {
            DeobfMode::Model => "model",
            DeobfMode::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus size in samples.
    pub size: usize,
    /// Applied round-robin over program indices.
    pub recipes: Vec<Recipe>,
    pub set: SetKind,
    pub features: FeatureKind,
    pub model: ModelKind,
    pub budget: PathBudget,
    pub k: usize,
    pub out: PathBuf,
    /// Seed of the held-out programs used by `deobf`.
    pub eval_seed: u64,
    pub eval_programs: usize,
    pub mode: DeobfMode,
    /// Report wall-clock times. Off by default so reports are reproducible.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            size: 5000,
            recipes: parse_recipes(DEFAULT_RECIPES).expect("default recipes parse"),
            set: SetKind::Set3,
            features: FeatureKind::Tf,
            model: ModelKind::Tree,
            budget: PathBudget::default(),
            k: 20,
            out: PathBuf::from("out"),
            eval_seed: 1_000_001,
            eval_programs: 100,
            mode: DeobfMode::Model,
            timing: false,
        }
    }
}

/// `;`-separated recipe list.
pub fn parse_recipes(s: &str) -> Result<Vec<Recipe>, CliError> {
    let v: Vec<Recipe> = s
        .split(';')
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| r.parse::<Recipe>().map_err(config_err))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(config_err("no recipe given"));
    }
    Ok(v)
}

fn recipes_text(rs: &[Recipe]) -> String {
    rs.iter().map(Recipe::to_string).collect::<Vec<_>>().join(";")
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(MIN_SIZE..=MAX_SIZE).contains(&self.size) {
            return Err(config_err(format!("size {} outside [{MIN_SIZE}, {MAX_SIZE}]", self.size)));
        }
        if self.k < 2 {
            return Err(config_err("k must be at least 2"));
        }
        if self.recipes.iter().all(|r| r.opaque_count() == 0) {
            return Err(config_err("no recipe injects opaque predicates"));
        }
        if self.eval_programs == 0 {
            return Err(config_err("eval_programs must be positive"));
        }
        PathBudget::new(self.budget.alpha_loop, self.budget.alpha_paths).map_err(config_err)?;
        Ok(())
    }

    /// Every field except `out`, one `key = value` per line in fixed order.
    pub fn canonical(&self) -> String {
        format!(
            "seed = {}\nsize = {}\nrecipes = {}\nset = {}\nfeatures = {}\nmodel = {}\nalpha_loop = {}\nalpha_paths = {}\nk = {}\neval_seed = {}\neval_programs = {}\nmode = {}\ntiming = {}\n",
            self.seed,
            self.size,
            recipes_text(&self.recipes),
            self.set,
            self.features,
            self.model,
            self.budget.alpha_loop,
            self.budget.alpha_paths,
            self.k,
            self.eval_seed,
            self.eval_programs,
            self.mode.as_str(),
            self.timing
        )
    }

    pub fn to_text(&self) -> String {
        format!("{}out = {}\n", self.canonical(), self.out.display())
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown or repeated keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(config_err(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            self.set_key(k, v).map_err(|e| config_err(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    fn set_key(&mut self, k: &str, v: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad number `{v}`"))
        }
        match k {
            "seed" => self.seed = num(v)?,
            "size" => self.size = num(v)?,
            "recipes" => self.recipes = parse_recipes(v).map_err(|e| e.to_string())?,
            "set" => self.set = v.parse()?,
            "features" => self.features = v.parse()?,
            "model" => self.model = v.parse()?,
            "alpha_loop" => self.budget.alpha_loop = num(v)?,
            "alpha_paths" => self.budget.alpha_paths = num(v)?,
            "k" => self.k = num(v)?,
            "out" => self.out = PathBuf::from(v),
            "eval_seed" => self.eval_seed = num(v)?,
            "eval_programs" => self.eval_programs = num(v)?,
            "mode" => self.mode = DeobfMode::from_str(v, true)?,
            "timing" => self.timing = num(v)?,
            _ => return Err(format!("unknown key `{k}`")),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    fn corpus_config(&self, seed: u64) -> CorpusConfig {
        let mut c = CorpusConfig::new(seed, self.size, self.recipes.clone());
        c.budget = self.budget;
        c
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: String,
    /// Program ids the command consumed or produced.
    pub programs: Vec<String>,
    /// Output file name to hex SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
    pub stats: BTreeMap<String, String>,
}

impl Manifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest.{command}.json")
    }

    pub fn load(dir: &Path, command: &str) -> Result<Manifest, CliError> {
        let p = dir.join(Self::file_name(command));
        let text = fs::read_to_string(&p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
    }
}

/// Collects output files, then writes them and the manifest.
struct Output<'a> {
    cfg: &'a RunConfig,
    command: &'static str,
    files: Vec<(String, String)>,
    programs: Vec<String>,
    stats: BTreeMap<String, String>,
}

impl<'a> Output<'a> {
    fn new(cfg: &'a RunConfig, command: &'static str) -> Output<'a> {
        Output { cfg, command, files: Vec::new(), programs: Vec::new(), stats: BTreeMap::new() }
    }

    fn file(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    fn stat(&mut self, key: &str, value: impl ToString) {
        self.stats.insert(key.to_string(), value.to_string());
    }

    fn write(self) -> Result<Vec<PathBuf>, CliError> {
        let dir = &self.cfg.out;
        fs::create_dir_all(dir).map_err(|e| analysis_err(format!("{}: {e}", dir.display())))?;
        let mut written = Vec::new();
        let mut hashes = BTreeMap::new();
        for (name, contents) in &self.files {
            let p = dir.join(name);
            fs::write(&p, contents).map_err(|e| analysis_err(format!("{}: {e}", p.display())))?;
            hashes.insert(name.clone(), hex(&Sha256::digest(contents.as_bytes())));
            written.push(p);
        }
        let m = Manifest {
            command: self.command.to_string(),
            config_hash: self.cfg.hash(),
            config: self.cfg.canonical(),
            programs: self.programs,
            files: hashes,
            stats: self.stats,
        };
        let p = dir.join(Manifest::file_name(self.command));
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
        fs::write(&p, text).map_err(|e| analysis_err(format!("{}: {e}", p.display())))?;
        written.push(p);
        Ok(written)
    }
}

pub fn corpus_file(set: SetKind) -> String {
    format!("corpus.{set}.jsonl")
}

/// Generates the corpus and writes one JSONL file per set.
pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let corpus = build_corpus(&cfg.corpus_config(cfg.seed));
    let quotas = cfg.corpus_config(cfg.seed).quotas();
    let got = [corpus.count(Label::Normal), corpus.count(Label::OpTrue), corpus.count(Label::OpFalse)];
    if got != quotas {
        return Err(analysis_err(format!("unbalanced corpus: got {got:?}, wanted {quotas:?}")));
    }
    let mut out = Output::new(cfg, "gen");
    for set in SetKind::ALL {
        out.file(corpus_file(set), corpus.jsonl(set));
    }
    out.programs = corpus.programs.iter().map(|p| p.id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    out.stat("samples", corpus.samples.len());
    out.stat("programs_generated", corpus.generated);
    out.stat("programs_rejected", corpus.rejected.len());
    out.stat("opaque_checked", corpus.gate.opaque_checked);
    out.stat("opaque_matched", corpus.gate.opaque_matched);
    out.write()
}

/// Documents, labels and program ids of one corpus file.
pub struct LoadedSet {
    pub records: Vec<Record>,
    pub docs: Vec<TermCounts>,
    pub labels: Vec<Label>,
    pub groups: Vec<String>,
}

pub fn load_set(dir: &Path, set: SetKind) -> Result<LoadedSet, CliError> {
    let p = dir.join(corpus_file(set));
    let text = fs::read_to_string(&p).map_err(|e| config_err(format!("missing corpus {}: {e}", p.display())))?;
    let records: Vec<Record> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Record::from_json_line(l).map_err(|e| config_err(format!("{}:{}: {e}", p.display(), i + 1))))
        .collect::<Result<_, _>>()?;
    if records.is_empty() {
        return Err(config_err(format!("empty corpus {}", p.display())));
    }
    Ok(LoadedSet {
        docs: records.iter().map(|r| TermCounts::from_doc(&r.doc)).collect(),
        labels: records.iter().map(|r| r.label).collect(),
        groups: records.iter().map(|r| r.program.clone()).collect(),
        records,
    })
}

fn cv_config(cfg: &RunConfig, model: ModelKind, features: FeatureKind) -> CvConfig {
    CvConfig { model, params: ModelParams::default(), features, l2: false, k: cfg.k, seed: cfg.seed }
}

/// Program-grouped k-fold CV of one task.
pub fn run_cv(cfg: &RunConfig, data: &LoadedSet, task: Task, model: ModelKind, features: FeatureKind) -> Result<CvReport, CliError> {
    kfold_cv(&data.docs, &data.labels, Some(&data.groups), task, &cv_config(cfg, model, features)).map_err(analysis_err)
}

const TASKS: [Task; 2] = [Task::Detection, Task::Deobfuscation];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Study {
    SetCompare,
    ModelCompare,
    Similarity,
}

impl Study {
    fn name(self) -> &'static str {
        match self {
            Study::SetCompare => "set-compare",
            Study::ModelCompare => "model-compare",
            Study::Similarity => "similarity",
        }
    }
}

pub const STUDY_HEADER: &str = "Condition,Task,Accuracy %,F1 %";

pub fn cmd_study(cfg: &RunConfig, which: Study) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let mut csv = String::new();
    let mut programs = BTreeSet::new();
    match which {
        Study::SetCompare => {
            csv.push_str(STUDY_HEADER);
            csv.push('\n');
            for set in SetKind::ALL {
                let data = load_set(&cfg.out, set)?;
                programs.extend(data.groups.iter().cloned());
                for task in TASKS {
                    let r = run_cv(cfg, &data, task, cfg.model, cfg.features)?;
                    let _ = writeln!(csv, "{set},{task},{:.2},{:.2}", 100.0 * r.mean_accuracy, 100.0 * r.mean_f1);
                }
            }
        }
        Study::ModelCompare => {
            csv.push_str(STUDY_HEADER);
            csv.push('\n');
            let data = load_set(&cfg.out, cfg.set)?;
            programs.extend(data.groups.iter().cloned());
            for features in [FeatureKind::Tf, FeatureKind::TfIdf] {
                for model in [ModelKind::Tree, ModelKind::Knn, ModelKind::Mnb] {
                    for task in TASKS {
                        let r = run_cv(cfg, &data, task, model, features)?;
                        let _ = writeln!(csv, "{model}-{features},{task},{:.2},{:.2}", 100.0 * r.mean_accuracy, 100.0 * r.mean_f1);
                    }
                }
            }
        }
        Study::Similarity => {
            csv.push_str("Set,detection %,deobfuscation %\n");
            for set in SetKind::ALL {
                let data = load_set(&cfg.out, set)?;
                programs.extend(data.groups.iter().cloned());
                let samples: Vec<Sample> = data.records.iter().map(record_sample).collect();
                let _ = writeln!(
                    csv,
                    "{set},{:.2},{:.2}",
                    cross_label_similarity(&samples, Task::Detection),
                    cross_label_similarity(&samples, Task::Deobfuscation)
                );
            }
        }
    }
    let mut out = Output::new(cfg, "study");
    out.file(format!("study.{}.csv", which.name()), csv);
    out.programs = programs.into_iter().collect();
    out.stat("study", which.name());
    out.write()
}

/// A stored record as a sample whose document renders to the stored text.
fn record_sample(r: &Record) -> Sample {
    let meta = DocMeta {
        program: r.program.clone(),
        function: String::new(),
        predicate: r.predicate.clone(),
        path: r.path,
        set: r.set,
    };
    Sample { doc: RawDocument { meta, lines: r.doc.lines().map(str::to_string).collect() }, label: r.label }
}

pub const CV_HEADER: &str = "Types of OP,Other transforms,Analysis time,Accuracy %,F1 %";

/// Opaque kinds and other transforms named by the recipes, `+`-joined.
fn recipe_columns(recipes: &[Recipe]) -> (String, String) {
    let (mut ops, mut other) = (BTreeSet::new(), BTreeSet::new());
    for t in recipes.iter().flat_map(|r| r.0.iter()) {
        match t {
            Transform::AddOpaque { kind, .. } => ops.insert(kind.to_string()),
            t => other.insert(t.to_string()),
        };
    }
    let join = |s: BTreeSet<String>| if s.is_empty() { "-".to_string() } else { s.into_iter().collect::<Vec<_>>().join("+") };
    (join(ops), join(other))
}

pub fn cv_table(cfg: &RunConfig, r: &CvReport) -> String {
    let (ops, other) = recipe_columns(&cfg.recipes);
    let time = if cfg.timing { format!("{:.2}s", r.wall.as_secs_f64()) } else { "-".to_string() };
    format!("{CV_HEADER}\n{ops},{other},{time},{:.2},{:.2}\n", 100.0 * r.mean_accuracy, 100.0 * r.mean_f1)
}

pub fn cmd_cv(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let data = load_set(&cfg.out, cfg.set)?;
    let mut out = Output::new(cfg, "cv");
    for task in TASKS {
        let r = run_cv(cfg, &data, task, cfg.model, cfg.features)?;
        out.file(format!("cv.{task}.csv"), cv_table(cfg, &r));
        out.file(format!("cv.{task}.folds.csv"), r.folds_csv());
    }
    out.programs = data.groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    out.write()
}

pub fn model_file(task: Task) -> String {
    format!("model.{task}.txt")
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    if cfg.model != ModelKind::Tree {
        return Err(config_err("only decision trees can be persisted; use model = tree"));
    }
    let data = load_set(&cfg.out, cfg.set)?;
    let mut out = Output::new(cfg, "train");
    for task in TASKS {
        let m = TrainedModel::train(&data.docs, &data.labels, task, cfg.model, &ModelParams::default(), cfg.features, false)
            .map_err(analysis_err)?;
        out.file(model_file(task), m.to_text().map_err(analysis_err)?);
    }
    out.programs = data.groups.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    out.stat("samples", data.records.len());
    out.write()
}

/// Accepted obfuscated programs from `seed`, in index order, skipping any id
/// in `exclude`. Returns the programs and the number skipped.
pub fn held_out_programs(cfg: &RunConfig, seed: u64, n: usize, exclude: &BTreeSet<String>) -> (Vec<CorpusProgram>, usize) {
    const BATCH: usize = 16;
    let cc = cfg.corpus_config(seed);
    let (mut progs, mut skipped, mut next) = (Vec::new(), 0, 0);
    while progs.len() < n && next < cc.max_programs {
        // Odd indices are the obfuscated programs.
        let built: Vec<_> = (next..next + BATCH).into_par_iter().map(|i| build_program(&cc, 2 * i + 1).0).collect();
        next += BATCH;
        for cp in built.into_iter().flatten() {
            if progs.len() == n {
                break;
            }
            if exclude.contains(&cp.id) {
                skipped += 1;
            } else {
                progs.push(cp);
            }
        }
    }
    (progs, skipped)
}

pub fn cmd_deobf(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    cfg.validate()?;
    let train = Manifest::load(&cfg.out, "train");
    let models = match cfg.mode {
        DeobfMode::Model => {
            let load = |task: Task| -> Result<TrainedModel, CliError> {
                let p = cfg.out.join(model_file(task));
                let text = fs::read_to_string(&p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                TrainedModel::from_text(&text).map_err(config_err)
            };
            Some((load(Task::Detection)?, load(Task::Deobfuscation)?))
        }
        DeobfMode::Oracle => None,
    };
    let exclude: BTreeSet<String> = match (&train, cfg.mode) {
        (Ok(m), _) => m.programs.iter().cloned().collect(),
        (Err(e), DeobfMode::Model) => return Err(config_err(format!("training manifest required: {e}"))),
        (Err(_), DeobfMode::Oracle) => BTreeSet::new(),
    };
    let (progs, skipped) = held_out_programs(cfg, cfg.eval_seed, cfg.eval_programs, &exclude);
    if progs.len() < cfg.eval_programs {
        return Err(analysis_err(format!("only {} held-out programs could be built", progs.len())));
    }
    if let Some(id) = progs.iter().map(|p| &p.id).find(|id| exclude.contains(*id)) {
        return Err(analysis_err(format!("program {id} is in the training set")));
    }

    let detector = models.as_ref().map(|(d, o)| ModelDetector { detector: d, deobfuscator: o });
    let reports: Vec<_> = progs
        .par_iter()
        .map(|cp| {
            let pc = PipelineConfig { budget: cfg.budget, seed: cfg.eval_seed ^ cp.index as u64, ..PipelineConfig::default() };
            let mode = match &detector {
                Some(d) => Mode::Model(d),
                None => Mode::Oracle(OracleConfig { seed: pc.seed, ..OracleConfig::default() }),
            };
            run_pipeline(&cp.program, &mode, Some(&cp.log), &pc).1
        })
        .collect();

    let tool = format!("opdeob-{}", cfg.mode.as_str());
    let obfuscation = recipe_columns(&cfg.recipes).0;
    let mut summary = format!("{SUMMARY_HEADER}\n{}\n", summary_csv(&tool, &obfuscation, &reports));
    if cfg.timing {
        let secs: f64 = reports.iter().map(|r| r.wall.as_secs_f64()).sum();
        let _ = writeln!(summary, "# wall {secs:.2}s");
    }
    let mut rows = String::from("program,predicate,truth,predicted,action\n");
    for (cp, r) in progs.iter().zip(&reports) {
        for line in r.rows_csv().lines().skip(1) {
            let _ = writeln!(rows, "{},{line}", cp.id);
        }
    }
    let mut out = Output::new(cfg, "deobf");
    out.file("deobf.summary.csv", summary);
    out.file("deobf.rows.csv", rows);
    out.programs = progs.iter().map(|p| p.id.clone()).collect();
    out.stat("mode", cfg.mode.as_str());
    out.stat("equivalent", reports.iter().filter(|r| r.equivalent).count());
    out.stat("skipped_training_programs", skipped);
    out.write()
}

#[derive(Debug, Parser)]
#[command(name = "opdeob", version, about = "Opaque predicate corpus generation, learning and removal")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled corpus.
    Gen(Flags),
    /// Run one of the comparison studies on an existing corpus.
    Study {
        #[arg(value_enum)]
        which: Study,
        #[command(flatten)]
        flags: Flags,
    },
    /// Train and save the detection and deobfuscation models.
    Train(Flags),
    /// k-fold cross-validation on an existing corpus.
    Cv(Flags),
    /// Remove opaque predicates from held-out programs.
    Deobf(Flags),
}

#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    /// `;`-separated recipes; repeatable.
    #[arg(long)]
    pub recipe: Vec<String>,
    #[arg(long)]
    pub set: Option<String>,
    #[arg(long)]
    pub features: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub alpha_loop: Option<u32>,
    #[arg(long)]
    pub alpha_paths: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub eval_programs: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<DeobfMode>,
    #[arg(long)]
    pub timing: bool,
}

impl Flags {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        macro_rules! set {
            ($field:expr, $v:expr) => {
                if let Some(v) = $v {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.size, self.size);
        if !self.recipe.is_empty() {
            c.recipes = parse_recipes(&self.recipe.join(";"))?;
        }
        set!(c.set, self.set.as_deref().map(str::parse).transpose().map_err(config_err)?);
        set!(c.features, self.features.as_deref().map(str::parse).transpose().map_err(config_err)?);
        set!(c.model, self.model.as_deref().map(str::parse).transpose().map_err(config_err)?);
        set!(c.budget.alpha_loop, self.alpha_loop);
        set!(c.budget.alpha_paths, self.alpha_paths);
        set!(c.k, self.k);
        set!(c.out, self.out.clone());
        set!(c.eval_seed, self.eval_seed);
        set!(c.eval_programs, self.eval_programs);
        set!(c.mode, self.mode);
        c.timing |= self.timing;
        c.validate()?;
        Ok(c)
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    match &cli.command {
        Command::Gen(f) => cmd_gen(&f.resolve()?),
        Command::Study { which, flags } => cmd_study(&flags.resolve()?, *which),
        Command::Train(f) => cmd_train(&f.resolve()?),
        Command::Cv(f) => cmd_cv(&f.resolve()?),
        Command::Deobf(f) => cmd_deobf(&f.resolve()?),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("opdeob: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 42;
        c.set = SetKind::Set1;
        c.out = PathBuf::from("/tmp/x");
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig::default();
        let b = RunConfig { out: PathBuf::from("elsewhere"), ..RunConfig::default() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 2, ..RunConfig::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn size_bounds() {
        for (size, ok) in [(999, false), (1000, true), (100_000, true), (10_000_000, false)] {
            let c = RunConfig { size, ..RunConfig::default() };
            assert_eq!(c.validate().is_ok(), ok, "{size}");
        }
    }

    #[test]
    fn bad_lines_rejected() {
        for text in ["bogus = 1", "seed = x", "seed = 1\nseed = 2", "no equals sign", "recipes = Nope(1)"] {
            assert!(matches!(RunConfig::from_text(text), Err(CliError::Config(_))), "{text}");
        }
        assert!(RunConfig::from_text("# comment\n\nseed = 3\n").is_ok());
    }

    #[test]
    fn recipe_columns_split() {
        let rs = parse_recipes("AddOpaque(MBA,2),Flatten;AddOpaque(Arithmetic)").unwrap();
        assert_eq!(recipe_columns(&rs), ("Arithmetic+MBA".to_string(), "Flatten".to_string()));
    }

    #[test]
    fn record_sample_renders_stored_text() {
        let r = Record {
            doc: "a = b\nc = d".into(),
            label: Label::Normal,
            program: "p".into(),
            predicate: "f:b:0".into(),
            path: 0,
            set: SetKind::Set3,
            recipe: String::new(),
        };
        assert_eq!(record_sample(&r).doc.text(), r.doc);
    }
}
