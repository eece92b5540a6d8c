//! Command-line frontend.
//!
//! One binary covers the whole pipeline: bank artifacts, synthetic
//! datasets, training, evaluation, rule extraction, per-sample
//! explanation, concept intervention, activation statistics, and the
//! gradient check harness. Exit codes: 0 on success, 1 when the input was
//! invalid (bad flags, malformed files, failed validation), 2 on runtime
//! failure.

use crate::analysis::{self, ConceptGrouping};
use crate::checkpoint::{self, CheckpointMeta, ModelManifest};
use crate::concept_bank::{
    self, check_signature_uniqueness, fixtures, to_canonical_json, RecordsFile,
};
use crate::config::{BankSource, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::Model;
use crate::rules;
use crate::synthetic::{self, sample_batch, FeatureBatch, World};
use crate::trainer::{self, TrainInputs};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "reason",
    version,
    about = "Concept-driven rule learning over motion features"
)]
struct Cli {
    /// Worker thread budget (or REASON_THREADS). Execution is sequential
    /// and deterministic; the flag is validated and otherwise unused.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Concept vocabulary and association matrix artifacts.
    #[command(subcommand)]
    Bank(BankCmd),
    /// Synthetic planted-rule datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Extracted rule artifacts.
    #[command(subcommand)]
    Rules(RulesCmd),
    /// Explain one sample's prediction by its fired rules.
    Explain(ExplainArgs),
    /// Accuracy under progressive concept correction.
    Intervene(InterveneArgs),
    /// Concept activation statistics over a split.
    Stats(StatsArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum BankCmd {
    /// Build vocabulary and matrix files from a bundled vocabulary and an
    /// annotation records file.
    Build(BankBuildArgs),
    /// Validate bank files and report duplicate action signatures.
    Check(BankCheckArgs),
}

#[derive(Args)]
struct BankBuildArgs {
    /// Bundled vocabulary to annotate against.
    #[arg(long, default_value = "ntu74", value_parser = ["ntu74", "desk67"])]
    fixture: String,
    /// Annotation records (bundled demo records when omitted).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Output directory for vocabulary.json and matrix.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BankCheckArgs {
    #[arg(long)]
    vocabulary: PathBuf,
    #[arg(long)]
    matrix: PathBuf,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a dataset directory with train and eval splits.
    Gen(DataGenArgs),
}

#[derive(Args)]
struct DataGenArgs {
    /// Run configuration (desk defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use a bundled vocabulary with the demo records instead of the
    /// configured bank.
    #[arg(long, value_parser = ["ntu74", "desk67"])]
    fixture: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["ntu74", "desk67"])]
    fixture: Option<String>,
    /// Train on an existing dataset directory instead of sampling one in
    /// memory. Its configuration hash must match.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory: metrics.ndjson, config.json, checkpoint/.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Also write the report to a file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RulesCmd {
    /// Extract each action's strongest rules into a JSON artifact.
    Extract(RulesExtractArgs),
}

#[derive(Args)]
struct RulesExtractArgs {
    #[arg(long)]
    model: PathBuf,
    /// Rules kept per action, ranked by absolute classifier weight.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Sample index within the split.
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterveneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Correction budgets, most-uncertain concepts first.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 3])]
    budgets: Vec<usize>,
    /// Restrict corrections to samples the unintervened model got wrong.
    #[arg(long)]
    misclassified_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    /// JSON object mapping group labels to concept name lists.
    #[arg(long)]
    grouping: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every registered component (the default).
    #[arg(long)]
    all: bool,
    /// Check one component by name; repeatable.
    #[arg(long)]
    component: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses and dispatches, translating errors to the exit-code contract.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = resolve_threads(cli.threads) {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("REASON_THREADS") {
            Ok(s) => s.trim().parse().map_err(|_| {
                Error::validation(format!("REASON_THREADS must be a positive integer, got '{s}'"))
            })?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(Error::validation("threads must be at least 1"));
    }
    Ok(n)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Bank(BankCmd::Build(a)) => bank_build(a),
        Command::Bank(BankCmd::Check(a)) => bank_check(a),
        Command::Data(DataCmd::Gen(a)) => data_gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rules(RulesCmd::Extract(a)) => rules_extract(a),
        Command::Explain(a) => explain(a),
        Command::Intervene(a) => intervene(a),
        Command::Stats(a) => stats(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn load_run_config(
    path: Option<&Path>,
    seed: Option<u64>,
    fixture: Option<&str>,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = fixture {
        cfg.bank = BankSource::Fixture { name: f.to_string(), records: None };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn take_split<'a>(
    ds: &'a synthetic::LoadedDataset,
    split: &str,
) -> Result<&'a FeatureBatch> {
    ds.splits.get(split).ok_or_else(|| {
        Error::validation(format!(
            "split '{split}' not found; dataset has: {}",
            ds.splits.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })
}

/// A checkpoint only makes sense against the bank it was trained on.
fn ensure_bank_match(model: &Model, world: &World) -> Result<()> {
    if model.vocabulary != world.config.vocabulary
        || model.actions != world.config.matrix.actions
    {
        return Err(Error::validation(
            "checkpoint bank does not match the dataset bank \
             (different vocabulary or action set)",
        ));
    }
    Ok(())
}

fn load_model_and_data(
    model_dir: &Path,
    data_dir: &Path,
) -> Result<(Model, ModelManifest, synthetic::LoadedDataset)> {
    let (model, manifest) = checkpoint::load_model(model_dir)?;
    let ds = synthetic::load_dataset(data_dir)?;
    ensure_bank_match(&model, &ds.world)?;
    Ok((model, manifest, ds))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn bank_build(a: BankBuildArgs) -> Result<()> {
    let vocab = fixtures::fixture_vocabulary(&a.fixture)?;
    let records: RecordsFile = match &a.records {
        Some(path) => concept_bank::load_records(path)?,
        None => serde_json::from_str(fixtures::DEMO_RECORDS_JSON).expect("bundled records parse"),
    };
    let matrix = concept_bank::build_association_matrix(&vocab, &records.actions, &records.records)?;
    let dups = check_signature_uniqueness(&matrix);
    if !dups.is_empty() {
        for (i, j) in &dups {
            println!("duplicate signature: {} / {}", matrix.actions[*i], matrix.actions[*j]);
        }
        return Err(Error::validation(format!(
            "{} duplicate action signature pair(s); refine the records",
            dups.len()
        )));
    }
    std::fs::create_dir_all(&a.out)?;
    concept_bank::save_vocabulary(&vocab, &a.out.join("vocabulary.json"))?;
    concept_bank::save_matrix(&matrix, &a.out.join("matrix.json"))?;
    println!(
        "bank: {} concepts, {} actions -> {}",
        vocab.len(),
        matrix.num_actions(),
        a.out.display()
    );
    Ok(())
}

fn bank_check(a: BankCheckArgs) -> Result<()> {
    let vocab = concept_bank::load_vocabulary(&a.vocabulary)?;
    let matrix = concept_bank::load_matrix(&a.matrix)?;
    matrix.bind(&vocab)?;
    let dups = check_signature_uniqueness(&matrix);
    if !dups.is_empty() {
        for (i, j) in &dups {
            println!("duplicate signature: {} / {}", matrix.actions[*i], matrix.actions[*j]);
        }
        return Err(Error::validation(format!(
            "{} duplicate action signature pair(s)",
            dups.len()
        )));
    }
    println!("bank ok: {} concepts, {} actions", vocab.len(), matrix.num_actions());
    Ok(())
}

fn data_gen(a: DataGenArgs) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), a.seed, a.fixture.as_deref())?;
    let world = synthetic::generate_world(cfg.world_config()?, cfg.seed)?;
    let train = sample_batch(&world, cfg.data.train_samples, synthetic::split_seed(cfg.seed, 0));
    let eval = sample_batch(&world, cfg.data.eval_samples, synthetic::split_seed(cfg.seed, 1));
    synthetic::save_dataset(&a.out, &world, &cfg.hash(), &[("train", &train), ("eval", &eval)])?;
    println!(
        "dataset: {} train + {} eval samples, {} actions, {} concepts -> {}",
        train.len(),
        eval.len(),
        world.config.matrix.num_actions(),
        world.config.vocabulary.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), a.seed, a.fixture.as_deref())?;
    let hash = cfg.hash();

    let (world, train_batch, eval_batch) = match &a.data {
        Some(dir) => {
            let ds = synthetic::load_dataset(dir)?;
            if ds.config_hash != hash {
                return Err(Error::validation(
                    "dataset was generated from a different configuration \
                     (hash mismatch)",
                ));
            }
            let train = take_split(&ds, "train")?.clone();
            let eval = take_split(&ds, "eval")?.clone();
            (ds.world, train, eval)
        }
        None => {
            let world = synthetic::generate_world(cfg.world_config()?, cfg.seed)?;
            let train = sample_batch(&world, cfg.data.train_samples, synthetic::split_seed(cfg.seed, 0));
            let eval = sample_batch(&world, cfg.data.eval_samples, synthetic::split_seed(cfg.seed, 1));
            (world, train, eval)
        }
    };

    let wc = &world.config;
    let mut model = Model::init(
        wc.vocabulary.clone(),
        &wc.matrix,
        cfg.decoder.clone(),
        cfg.logic.clone(),
        wc.channels,
        wc.text_dim,
        cfg.proj_dim,
        cfg.seed,
    )?;
    let meta = CheckpointMeta {
        config_hash: hash,
        seed: cfg.seed,
        epoch: cfg.train.epochs,
        matrix_rows: wc.matrix.rows.clone(),
        channels: wc.channels,
        text_dim: wc.text_dim,
        proj_dim: cfg.proj_dim,
    };
    let inputs = TrainInputs {
        train: &train_batch,
        eval: &eval_batch,
        text_embeddings: &world.text_embeddings,
        part_map: &wc.part_map,
    };
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("config.json"), cfg.to_json())?;
    let report = trainer::train(&mut model, &inputs, &cfg.train, cfg.seed, Some(&a.out), &meta)?;
    checkpoint::save_model(&a.out.join("checkpoint"), &model, &meta)?;

    let last = report.metrics.last().expect("at least one epoch");
    let summary = trainer::evaluate(&model, &eval_batch);
    println!(
        "trained {} epochs: eval accuracy {:.4}, macro f1 {:.4}, concept f1 {:.4}, \
         {} active switchboard weights",
        last.epoch, summary.accuracy, summary.macro_f1, summary.concept_f1, last.active_weights
    );
    println!("checkpoint -> {}", a.out.join("checkpoint").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    split: String,
    samples: usize,
    accuracy: f64,
    macro_f1: f64,
    concept_f1: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, manifest, ds) = load_model_and_data(&a.model, &a.data)?;
    let batch = take_split(&ds, &a.split)?;
    let summary = trainer::evaluate(&model, batch);
    let report = EvalReport {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: manifest.config_hash,
        seed: manifest.seed,
        split: a.split,
        samples: batch.len(),
        accuracy: summary.accuracy,
        macro_f1: summary.macro_f1,
        concept_f1: summary.concept_f1,
    };
    let json = to_canonical_json(&report);
    print!("{json}");
    if let Some(path) = &a.out {
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn rules_extract(a: RulesExtractArgs) -> Result<()> {
    let (model, manifest) = checkpoint::load_model(&a.model)?;
    let file = rules::extract_rules(
        &model.logic,
        &model.classifier,
        &model.vocabulary,
        &model.actions,
        a.top_k,
        &manifest.config_hash,
        manifest.seed,
    )?;
    std::fs::write(&a.out, to_canonical_json(&file))?;
    for action in &file.actions {
        if let Some(term) = action.terms.first() {
            println!("{}: [{:+.3}] {}", action.action, term.weight, term.expr);
        }
    }
    println!(
        "{} actions, {} rules each -> {}",
        file.actions.len(),
        a.top_k,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ExplainReport {
    schema_version: u32,
    config_hash: String,
    seed: u64,
    split: String,
    sample: usize,
    label: String,
    predicted: String,
    correct: bool,
    terms: Vec<rules::RuleTerm>,
}

fn explain(a: ExplainArgs) -> Result<()> {
    let (model, manifest, ds) = load_model_and_data(&a.model, &a.data)?;
    let batch = take_split(&ds, &a.split)?;
    if a.sample >= batch.len() {
        return Err(Error::validation(format!(
            "sample {} out of range; split '{}' has {} samples",
            a.sample,
            a.split,
            batch.len()
        )));
    }
    let inf = model.forward_sample(&batch.sample_features(a.sample));
    let terms = rules::explain_instance(
        &model.logic,
        &model.classifier,
        &model.vocabulary,
        &inf.representation,
        inf.predicted,
        a.top_k,
    );
    let label = batch.labels[a.sample];
    let report = ExplainReport {
        schema_version: crate::SCHEMA_VERSION,
        config_hash: manifest.config_hash,
        seed: manifest.seed,
        split: a.split,
        sample: a.sample,
        label: model.actions[label].clone(),
        predicted: model.actions[inf.predicted].clone(),
        correct: inf.predicted == label,
        terms,
    };
    let json = to_canonical_json(&report);
    print!("{json}");
    if let Some(path) = &a.out {
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn intervene(a: InterveneArgs) -> Result<()> {
    let (model, manifest, ds) = load_model_and_data(&a.model, &a.data)?;
    let batch = take_split(&ds, &a.split)?;
    let curve = analysis::intervention_curve(
        &model,
        batch,
        &a.budgets,
        a.misclassified_only,
        &manifest.config_hash,
        manifest.seed,
    )?;
    std::fs::write(&a.out, to_canonical_json(&curve))?;
    for p in &curve.points {
        println!("budget {}: accuracy {:.4} over {} samples", p.budget, p.accuracy, p.samples);
    }
    println!("curve -> {}", a.out.display());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let (model, manifest, ds) = load_model_and_data(&a.model, &a.data)?;
    let batch = take_split(&ds, &a.split)?;
    let grouping: Option<ConceptGrouping> = match &a.grouping {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?,
            )
        }
        None => None,
    };
    let file = analysis::concept_stats(
        &model,
        batch,
        grouping.as_ref(),
        &manifest.config_hash,
        manifest.seed,
    )?;
    std::fs::write(&a.out, to_canonical_json(&file))?;
    println!(
        "{} concepts over {} samples, {:.2} active per sample -> {}",
        file.concepts.len(),
        file.samples,
        file.mean_active_per_sample,
        a.out.display()
    );
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = if a.component.is_empty() {
        gradcheck::run_all(a.seed)?
    } else {
        a.component
            .iter()
            .map(|c| gradcheck::run_component(c, a.seed))
            .collect::<Result<Vec<_>>>()?
    };
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{}: max rel err {:.2e} over {} probes ({})",
            r.component,
            r.max_rel_err,
            r.probes,
            if r.pass { "ok" } else { "FAIL" }
        );
        if !r.pass {
            failed.push(r.component.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Error::validation(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
