use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use hisgt_core::checkpoint::Checkpoint;
use hisgt_core::corpus::{
    ingest_tables, read_jsonl, split, stats, synthesize_ground_truth, write_jsonl, ClusteredParams, CodeSystem,
    GroundTruthSpec, IngestConfig, PatientRecord, PhenotypeMapping,
};
use hisgt_core::evaluation::{
    aia, fidelity, mia, report_csv, sample_records, top_codes, tstr_probe, FidelityReport, PrivacyReport, ProbeConfig,
    ReportRow, UtilityReport, PRIVACY_NOTE,
};
use hisgt_core::hashing::file_sha256;
use hisgt_core::hierarchy::{
    reconstruction_auc, train_hier_embeddings, CodeSystemDescriptor, GnnConfig, GraphOptions, HierGraph,
};
use hisgt_core::model::{FrozenTables, HiSGTConfig, HiSGTModel};
use hisgt_core::sampler::{generate_corpus, GenerationConfig};
use hisgt_core::semantics::{coverage_report, fallback_embed, load_embeddings, DescriptionCatalog, EmbeddingTable};
use hisgt_core::tokenizer::Vocabulary;
use hisgt_core::trainer::{encode_corpus, write_history, TrainConfig, TrainSession};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Synthetic EHR generation with hierarchy- and semantics-guided transformers.
///
/// File formats: corpora are JSON Lines records `{patient_id, labels,
/// visits: [{admit_ts, codes}]}`; embedding files are a JSON header line
/// followed by one `token<TAB>v1 v2 ...` row per token; checkpoints are
/// binary with a JSON header. Every command writes a manifest naming the
/// SHA-256 of its inputs and outputs.
#[derive(Parser)]
#[command(name = "hisgt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus from patients, admissions and diagnoses CSV tables.
    Ingest(IngestArgs),
    /// Sample a ground-truth corpus from a generator spec.
    GenCorpus(GenCorpusArgs),
    /// Split a corpus into train/val/test (72/8/20).
    Split(SplitArgs),
    /// Build the token vocabulary of a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train hierarchy embeddings on the code taxonomy graph.
    BuildHierarchy(BuildHierarchyArgs),
    /// Embed a description catalog with the trigram-hashing fallback.
    FallbackSemantics(FallbackArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Sample synthetic records from a checkpoint.
    Generate(GenerateArgs),
    /// Fidelity, privacy or utility evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Collect evaluation outputs into one CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    patients: PathBuf,
    #[arg(long)]
    admissions: PathBuf,
    #[arg(long)]
    diagnoses: PathBuf,
    /// Phenotype mapping JSON; the bundled generic mapping when omitted.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Column names and code system JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    /// A full generator spec, or clustered-preset parameters.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write the resolved full spec here.
    #[arg(long)]
    spec_out: Option<PathBuf>,
    /// Write the phenotype mapping used for labels here.
    #[arg(long)]
    mapping_out: Option<PathBuf>,
    /// Write a code description catalog here (clustered preset only).
    #[arg(long)]
    catalog_out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "generic")]
    system: CodeSystem,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long, default_value = "generic")]
    system: CodeSystem,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildHierarchyArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Descriptor JSON, or a bundled name: generic, icd9cm, icd10cm.
    #[arg(long)]
    descriptor: String,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_siblings: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FallbackArgs {
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Describe labels missing from the catalog by their names.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    hier: Option<PathBuf>,
    #[arg(long)]
    sem: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_hier: bool,
    #[arg(long)]
    no_sem: bool,
    #[arg(long)]
    no_consistency: bool,
    /// Continue from `last.ckpt` in the output directory; the model section
    /// must match, the train section (e.g. more epochs) is taken from the file.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    tables: TableArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    top_k: usize,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    grammar_mask: bool,
    #[arg(long, value_delimiter = ',')]
    condition_labels: Option<Vec<String>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCommand {
    Fidelity(FidelityArgs),
    Privacy(PrivacyArgs),
    Utility(UtilityArgs),
}

#[derive(Args)]
struct FidelityArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrivacyArgs {
    /// Training records (attack members).
    #[arg(long)]
    members: PathBuf,
    /// Held-out records (attack non-members).
    #[arg(long)]
    non_members: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Records sampled from each side.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    n_attrs: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UtilityArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// One subdirectory per model holding fidelity/privacy/utility JSON.
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    seed: Option<u64>,
    params: Value,
    inputs: BTreeMap<String, Artifact>,
    outputs: BTreeMap<String, Artifact>,
}

impl Manifest {
    fn new(command: &str, seed: Option<u64>, params: Value) -> Self {
        Self {
            command: command.into(),
            version: VERSION,
            seed,
            params,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn artifact(path: &Path) -> Result<Artifact> {
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }

    fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(name.into(), Self::artifact(path)?);
        Ok(self)
    }

    fn input_opt(self, name: &str, path: Option<&PathBuf>) -> Result<Self> {
        match path {
            Some(p) => self.input(name, p),
            None => Ok(self),
        }
    }

    fn output(mut self, name: &str, path: &Path) -> Result<Self> {
        self.outputs.insert(name.into(), Self::artifact(path)?);
        Ok(self)
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

/// `<file>.manifest.json` beside a single-file output.
fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<PatientRecord>> {
    Ok(read_jsonl(path, vocab.system())?)
}

fn mapping_or_default(path: Option<&PathBuf>) -> Result<PhenotypeMapping> {
    Ok(match path {
        Some(p) => PhenotypeMapping::load(p)?,
        None => PhenotypeMapping::default_generic(),
    })
}

fn load_tables(args: &TableArgs, vocab: &Vocabulary) -> Result<FrozenTables> {
    let hier = args.hier.as_deref().map(EmbeddingTable::read).transpose()?;
    let sem = match &args.sem {
        Some(p) => {
            let (table, report) = load_embeddings(p, vocab)?;
            if !report.ignored.is_empty() {
                eprintln!(
                    "warning: {} semantic rows are not vocabulary tokens and were ignored",
                    report.ignored.len()
                );
            }
            Some(table)
        }
        None => None,
    };
    Ok(FrozenTables::from_tables(vocab, hier.as_ref(), sem.as_ref()))
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let mapping = mapping_or_default(a.mapping.as_ref())?;
    let config = match &a.config {
        Some(p) => IngestConfig::load(p)?,
        None => IngestConfig::default(),
    };
    let out = ingest_tables(&a.patients, &a.admissions, &a.diagnoses, &mapping, &config)?;
    write_jsonl(&a.out, &out.records)?;
    let rejects = a.out.with_extension("rejects.jsonl");
    write_text(&rejects, &out.rejects_jsonl()?)?;
    Manifest::new(
        "ingest",
        None,
        json!({ "config": config, "stats": stats(&out.records) }),
    )
    .input("patients", &a.patients)?
    .input("admissions", &a.admissions)?
    .input("diagnoses", &a.diagnoses)?
    .input_opt("mapping", a.mapping.as_ref())?
    .input_opt("config", a.config.as_ref())?
    .output("corpus", &a.out)?
    .output("rejects", &rejects)?
    .write(&manifest_path(&a.out))
}

fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let raw: Value = read_json(&a.spec)?;
    let (spec, params) = if raw.get("transitions").is_some() {
        (serde_json::from_value::<GroundTruthSpec>(raw)?, None)
    } else {
        let p: ClusteredParams = serde_json::from_value(raw)?;
        (p.build()?, Some(p))
    };
    let records = synthesize_ground_truth(&spec)?;
    write_jsonl(&a.out, &records)?;
    let mut m = Manifest::new("gen-corpus", Some(spec.seed), json!({ "stats": stats(&records) }))
        .input("spec", &a.spec)?
        .output("corpus", &a.out)?;
    if let Some(p) = &a.spec_out {
        write_text(p, &spec.to_json()?)?;
        m = m.output("spec", p)?;
    }
    if let Some(p) = &a.mapping_out {
        write_text(p, &spec.mapping.to_json()?)?;
        m = m.output("mapping", p)?;
    }
    if let Some(p) = &a.catalog_out {
        let Some(params) = &params else {
            bail!("--catalog-out needs clustered-preset parameters");
        };
        params.catalog(&spec).save(p)?;
        m = m.output("catalog", p)?;
    }
    m.write(&manifest_path(&a.out))
}

fn cmd_split(a: &SplitArgs) -> Result<()> {
    let records = read_jsonl(&a.input, a.system)?;
    let s = split(&records, a.seed)?;
    let mut m = Manifest::new("split", Some(a.seed), json!({ "system": a.system })).input("corpus", &a.input)?;
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        let p = a.out_dir.join(format!("{name}.jsonl"));
        write_jsonl(&p, part)?;
        m = m.output(name, &p)?;
    }
    m.write(&a.out_dir.join("manifest.json"))
}

fn cmd_build_vocab(a: &BuildVocabArgs) -> Result<()> {
    if a.corpus.is_empty() {
        bail!("at least one --corpus is required");
    }
    let mapping = mapping_or_default(a.mapping.as_ref())?;
    let mut records = Vec::new();
    let mut m = Manifest::new("build-vocab", None, json!({ "system": a.system }));
    for (i, p) in a.corpus.iter().enumerate() {
        records.extend(read_jsonl(p, a.system)?);
        m = m.input(&format!("corpus{i}"), p)?;
    }
    let vocab = Vocabulary::build(&records, &mapping)?;
    vocab.save(&a.out)?;
    m.params = json!({ "system": a.system, "size": vocab.len(), "hash": vocab.hash() });
    m.input_opt("mapping", a.mapping.as_ref())?
        .output("vocab", &a.out)?
        .write(&manifest_path(&a.out))
}

fn cmd_build_hierarchy(a: &BuildHierarchyArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let descriptor_path = Path::new(&a.descriptor);
    let descriptor = if descriptor_path.exists() {
        CodeSystemDescriptor::load(descriptor_path)?
    } else {
        CodeSystemDescriptor::builtin(&a.descriptor)?
    };
    let opts = GraphOptions {
        siblings: !a.no_siblings,
        ..GraphOptions::default()
    };
    let graph = HierGraph::build(vocab.codes().iter().map(String::as_str), &descriptor, opts)?;
    let cfg = GnnConfig {
        dim: a.dim,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
    };
    let trained = train_hier_embeddings(&graph, &cfg)?;
    trained.table.save(&a.out)?;
    let auc = reconstruction_auc(&trained.table, &graph)?;
    let params = json!({
        "gnn": cfg,
        "descriptor": descriptor.name,
        "siblings": opts.siblings,
        "nodes": graph.len(),
        "edges": graph.edges.len(),
        "final_loss": trained.loss_trace.last(),
        "reconstruction_auc": auc,
    });
    let mut m = Manifest::new("build-hierarchy", Some(a.seed), params).input("vocab", &a.vocab)?;
    if descriptor_path.exists() {
        m = m.input("descriptor", descriptor_path)?;
    }
    m.output("embeddings", &a.out)?.write(&manifest_path(&a.out))
}

fn cmd_fallback(a: &FallbackArgs) -> Result<()> {
    let mut catalog = DescriptionCatalog::load(&a.catalog)?;
    let vocab = a.vocab.as_deref().map(Vocabulary::load).transpose()?;
    if let Some(v) = &vocab {
        catalog = catalog.with_label_names(v);
    }
    let table = fallback_embed(&catalog, a.dim, a.seed)?;
    table.save(&a.out)?;
    let coverage = vocab.as_ref().map(|v| coverage_report(&table, v));
    Manifest::new(
        "fallback-semantics",
        Some(a.seed),
        json!({ "dim": a.dim, "coverage": coverage }),
    )
    .input("catalog", &a.catalog)?
    .input_opt("vocab", a.vocab.as_ref())?
    .output("embeddings", &a.out)?
    .write(&manifest_path(&a.out))
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: HiSGTConfig,
    train: TrainConfig,
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut file: TrainFile = read_json(&a.config)?;
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    file.model.use_hier &= !a.no_hier;
    file.model.use_sem &= !a.no_sem;
    file.model.use_consistency &= !a.no_consistency;
    let vocab = Vocabulary::load(&a.tables.vocab)?;
    let tables = load_tables(&a.tables, &vocab)?;
    let train = encode_corpus(&load_corpus(&a.train, &vocab)?, &vocab, file.model.max_len)?;
    let val = encode_corpus(&load_corpus(&a.val, &vocab)?, &vocab, file.model.max_len)?;

    let last_path = a.out_dir.join("last.ckpt");
    let best_path = a.out_dir.join("best.ckpt");
    let mut session = if a.resume {
        let last = Checkpoint::load(&last_path)?;
        let best = best_path.exists().then(|| Checkpoint::load(&best_path)).transpose()?;
        if last.header.config != file.model {
            bail!(
                "resume: model config differs from the checkpoint in {}",
                a.out_dir.display()
            );
        }
        let mut s = TrainSession::resume(last, best, &vocab, &tables)?;
        s.state.config = file.train.clone();
        s
    } else {
        let model = HiSGTModel::<f32>::new(file.model.clone(), &vocab, &tables, file.train.seed)?;
        TrainSession::new(model, file.train.clone())?
    };
    while !session.finished() {
        let r = session.run_epoch(&train, &val)?;
        eprintln!(
            "epoch {} step {} train {:.4} val {:.4} (ce {:.4}){}",
            r.epoch,
            r.step,
            r.train.total,
            r.val.total,
            r.val.ce,
            if r.improved { " *" } else { "" }
        );
        // checkpoint every epoch so an interrupted run can resume
        session.last_checkpoint().save(&last_path)?;
        session.best_checkpoint()?.save(&best_path)?;
    }
    session.last_checkpoint().save(&last_path)?;
    session.best_checkpoint()?.save(&best_path)?;
    let history = a.out_dir.join("history.csv");
    write_history(&history, &session.state.history)?;
    write_json(&a.out_dir.join("config.json"), &file)?;

    let params = json!({
        "model": file.model,
        "train": file.train,
        "config_hash": file.model.hash(),
        "vocab_hash": vocab.hash(),
        "best_epoch": session.state.best_epoch,
        "best_val": session.state.best_val,
        "epochs_done": session.state.epochs_done,
    });
    Manifest::new("train", Some(file.train.seed), params)
        .input("config", &a.config)?
        .input("train", &a.train)?
        .input("val", &a.val)?
        .input("vocab", &a.tables.vocab)?
        .input_opt("hier", a.tables.hier.as_ref())?
        .input_opt("sem", a.tables.sem.as_ref())?
        .output("best", &best_path)?
        .output("last", &last_path)?
        .output("history", &history)?
        .write(&a.out_dir.join("manifest.json"))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.tables.vocab)?;
    let tables = load_tables(&a.tables, &vocab)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let ckpt_hash = ckpt.hash()?;
    let model = ckpt.into_model(&vocab, &tables)?;
    let cfg = GenerationConfig {
        n_records: a.n,
        temperature: a.temperature,
        top_k: a.top_k,
        max_len: a.max_len,
        grammar_mask: a.grammar_mask,
        condition_labels: a.condition_labels.clone(),
        seed: a.seed,
        ..GenerationConfig::default()
    };
    let (records, report) = generate_corpus(&model, &vocab, &cfg)?;
    write_jsonl(&a.out, &records)?;
    let report_path = a.out.with_extension("report.json");
    write_json(&report_path, &report)?;
    Manifest::new(
        "generate",
        Some(a.seed),
        json!({ "generation": cfg, "checkpoint_hash": ckpt_hash }),
    )
    .input("checkpoint", &a.ckpt)?
    .input("vocab", &a.tables.vocab)?
    .input_opt("hier", a.tables.hier.as_ref())?
    .input_opt("sem", a.tables.sem.as_ref())?
    .output("corpus", &a.out)?
    .output("report", &report_path)?
    .write(&manifest_path(&a.out))
}

fn cmd_eval(e: &EvalCommand) -> Result<()> {
    match e {
        EvalCommand::Fidelity(a) => {
            let vocab = Vocabulary::load(&a.vocab)?;
            let r = fidelity(
                &load_corpus(&a.real, &vocab)?,
                &load_corpus(&a.synthetic, &vocab)?,
                &vocab,
            )?;
            write_json(&a.out, &r)?;
            Manifest::new("eval fidelity", None, Value::Null)
                .input("real", &a.real)?
                .input("synthetic", &a.synthetic)?
                .input("vocab", &a.vocab)?
                .output("report", &a.out)?
                .write(&manifest_path(&a.out))
        }
        EvalCommand::Privacy(a) => {
            let vocab = Vocabulary::load(&a.vocab)?;
            let members = sample_records(&load_corpus(&a.members, &vocab)?, a.n, a.seed);
            let non = sample_records(&load_corpus(&a.non_members, &vocab)?, a.n, a.seed ^ 1);
            let synthetic = load_corpus(&a.synthetic, &vocab)?;
            let attributes = top_codes(&synthetic, a.n_attrs);
            let r = PrivacyReport {
                mia: mia(&members, &non, &synthetic, &vocab)?,
                aia: aia(&members, &synthetic, &attributes, a.k)?,
                note: PRIVACY_NOTE.into(),
            };
            write_json(&a.out, &r)?;
            let params = json!({ "n": a.n, "n_attrs": a.n_attrs, "k": a.k });
            Manifest::new("eval privacy", Some(a.seed), params)
                .input("members", &a.members)?
                .input("non_members", &a.non_members)?
                .input("synthetic", &a.synthetic)?
                .input("vocab", &a.vocab)?
                .output("report", &a.out)?
                .write(&manifest_path(&a.out))
        }
        EvalCommand::Utility(a) => {
            let vocab = Vocabulary::load(&a.vocab)?;
            let cfg = ProbeConfig {
                seed: a.seed,
                ..ProbeConfig::default()
            };
            let r = tstr_probe(
                &load_corpus(&a.train, &vocab)?,
                &load_corpus(&a.test, &vocab)?,
                &vocab,
                &cfg,
            )?;
            write_json(&a.out, &r)?;
            Manifest::new("eval utility", Some(a.seed), json!({ "probe": cfg }))
                .input("train", &a.train)?
                .input("test", &a.test)?
                .input("vocab", &a.vocab)?
                .output("report", &a.out)?
                .write(&manifest_path(&a.out))
        }
    }
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let eval_dir = a.eval_dir.as_ref().unwrap_or(&a.out_dir);
    let mut dirs: Vec<PathBuf> = fs::read_dir(eval_dir)
        .with_context(|| format!("reading {}", eval_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|p| p.is_dir());
    dirs.sort();
    let mut rows = Vec::new();
    let mut m = Manifest::new("report", None, Value::Null);
    for dir in dirs {
        let model = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut row = ReportRow {
            model: model.clone(),
            ..ReportRow::default()
        };
        let f = dir.join("fidelity.json");
        if f.exists() {
            row.fidelity = Some(read_json::<FidelityReport>(&f)?);
            m = m.input(&format!("{model}/fidelity"), &f)?;
        }
        let u = dir.join("utility.json");
        if u.exists() {
            row.utility = Some(read_json::<UtilityReport>(&u)?);
            m = m.input(&format!("{model}/utility"), &u)?;
        }
        let p = dir.join("privacy.json");
        if p.exists() {
            let r: PrivacyReport = read_json(&p)?;
            row.mia = Some(r.mia);
            row.aia = Some(r.aia);
            row.notes.push(r.note);
            m = m.input(&format!("{model}/privacy"), &p)?;
        }
        if row.fidelity.is_some() || row.utility.is_some() || row.mia.is_some() {
            rows.push(row);
        }
    }
    if rows.is_empty() {
        bail!("no evaluation outputs under {}", eval_dir.display());
    }
    let out = a.out_dir.join("report.csv");
    write_text(&out, &report_csv(&rows)?)?;
    m.output("report", &out)?.write(&a.out_dir.join("report.manifest.json"))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::GenCorpus(a) => cmd_gen_corpus(a),
        Command::Split(a) => cmd_split(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::BuildHierarchy(a) => cmd_build_hierarchy(a),
        Command::FallbackSemantics(a) => cmd_fallback(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(e) => cmd_eval(e),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", json!({ "error": msg }));
            ExitCode::FAILURE
        }
    }
}
