mod config;
mod manifest;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use arena_pref::ensemble::{
    ensemble_predict, read_predictions, search_weights, validate_weights, write_predictions,
    EnsembleError, EnsembleWeights, MemberPredictions,
};
use arena_pref::ingest::{
    clean_dataset, parse_dataset, read_records_jsonl, split_dataset, write_raw_csv,
    write_records_jsonl, DataFormat, IngestError, LabelVector, PreferenceRecord,
};
use arena_pref::metrics::{self, MetricsError, MetricsReport};
use arena_pref::model::{init_model, Model, ModelError, ModelSpec};
use arena_pref::preset::MemberPreset;
use arena_pref::synthgen::{self, RuleKind, SynthRule};
use arena_pref::tokenizer::format_input;
use arena_pref::train::{export_curve, train_sft, TrainError, TrainOutcome, EVAL_BATCH_SIZE};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{MemberConfig, RunAllConfig};
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "arena-pref",
    version,
    about = "Pairwise preference prediction pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw corpus.
    Synth(SynthArgs),
    /// Clean a raw dataset and split it into train/validation/test JSONL.
    Preprocess(PreprocessArgs),
    /// Print the expanded configuration of a member preset.
    Config(ConfigArgs),
    /// Fine-tune one member.
    Train(TrainArgs),
    /// Write class probabilities for a JSONL dataset.
    Predict(PredictArgs),
    /// Blend member predictions with fixed or searched weights.
    Ensemble(EnsembleArgs),
    /// Score predictions against labels.
    Evaluate(EvaluateArgs),
    /// Synthesize, preprocess, train both members, blend and evaluate.
    RunAll(RunAllArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl From<Format> for DataFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => DataFormat::Csv,
            Format::Jsonl => DataFormat::Jsonl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    LongerWins,
    KeywordWins,
    Mixed,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value = "longer-wins")]
    rule: Rule,
    #[arg(long, default_value_t = 0.1)]
    tie_band: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    split: String,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    preset: MemberPreset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding train.jsonl and validation.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    preset: MemberPreset,
    /// Full member configuration (JSON); defaults to the preset bundle.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Base seed when no config file is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint file; its config is read from the `.json` sidecar.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cleaned JSONL records.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = EVAL_BATCH_SIZE)]
    batch_size: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Fixed,
    Search,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    members: Vec<PathBuf>,
    /// Cleaned JSONL records aligned with the member files.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fixed")]
    mode: Mode,
    /// Comma-separated weights for fixed mode.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long, default_value_t = arena_pref::ensemble::DEFAULT_STEP)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the chosen weights (default: next to --out).
    #[arg(long)]
    weights_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    #[arg(long, env = "ARENA_PREF_OUT")]
    out: PathBuf,
    /// Run configuration (JSON); defaults to the built-in demo.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// An error carrying an explicit exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit_err(code: u8, message: impl Into<String>) -> anyhow::Error {
    anyhow!(Exit {
        code,
        message: message.into()
    })
}

const EXIT_USAGE: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_DUPLICATE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_WEIGHTS: u8 = 5;
const EXIT_MISALIGNED: u8 = 6;

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::LengthMismatch { .. } => EXIT_MISALIGNED,
        MetricsError::Empty | MetricsError::Simplex { .. } => EXIT_SCHEMA,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<IngestError>() {
            return match e {
                IngestError::DuplicateIds(_) => EXIT_DUPLICATE,
                IngestError::Io(_) | IngestError::InvalidRatios(_) => EXIT_USAGE,
                _ => EXIT_SCHEMA,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::NonFiniteLoss { .. } => return EXIT_NUMERIC,
                TrainError::Metrics(m) => return metrics_code(m),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<EnsembleError>() {
            return match e {
                EnsembleError::InvalidWeights(_) | EnsembleError::WeightCount { .. } => {
                    EXIT_WEIGHTS
                }
                EnsembleError::Misaligned { .. } => EXIT_MISALIGNED,
                EnsembleError::Metrics(m) => metrics_code(m),
                EnsembleError::Format(_) => EXIT_SCHEMA,
                EnsembleError::NoMembers | EnsembleError::InvalidStep(_) => EXIT_USAGE,
            };
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return metrics_code(e);
        }
        if cause.downcast_ref::<ModelError>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return EXIT_SCHEMA;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Config(a) => cmd_config(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::RunAll(a) => cmd_run_all(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<PreferenceRecord>> {
    read_records_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| exit_err(EXIT_USAGE, format!("bad {what} value `{p}`")))
        })
        .collect()
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let rule = SynthRule::new(
        match a.rule {
            Rule::LongerWins => RuleKind::LongerWins,
            Rule::KeywordWins => RuleKind::KeywordWins,
            Rule::Mixed => RuleKind::Mixed,
        },
        a.tie_band,
        a.noise,
        a.seed,
    );
    let records =
        synthgen::generate(a.n, &rule).map_err(|e| exit_err(EXIT_USAGE, e.to_string()))?;
    let mut w = create(&a.out)?;
    match a.format {
        Format::Csv => write_raw_csv(&mut w, &records)?,
        Format::Jsonl => arena_pref::ingest::write_raw_jsonl(&mut w, &records)?,
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PreprocessConfig<'a> {
    input: &'a Path,
    format: DataFormat,
    seed: u64,
    split: [f64; 3],
}

/// Cleans and splits `input` into `output/{train,validation,test}.jsonl` plus
/// `drop_report.json`.
fn preprocess(
    input: &Path,
    format: DataFormat,
    output: &Path,
    seed: u64,
    split: [f64; 3],
) -> Result<RunManifest> {
    let started = Instant::now();
    let raw = parse_dataset(open(input)?, format)
        .with_context(|| format!("parsing {}", input.display()))?;
    let cleaned = clean_dataset(&raw);
    let parts = split_dataset(&cleaned.records, split, seed)?;

    let mut manifest = RunManifest::new(
        "preprocess",
        PreprocessConfig {
            input,
            format,
            seed,
            split,
        },
    )?;
    manifest.hash_input(input)?;
    manifest.seeds.insert("split".into(), seed);
    fs::create_dir_all(output)?;
    for (name, records) in [
        ("train", &parts.train),
        ("validation", &parts.validation),
        ("test", &parts.test),
    ] {
        let path = output.join(format!("{name}.jsonl"));
        let mut w = create(&path)?;
        write_records_jsonl(&mut w, records)?;
        w.flush()?;
        manifest.artifact(&path);
    }
    let report_path = output.join("drop_report.json");
    write_json(&report_path, &cleaned.report)?;
    manifest.artifact(&report_path);
    manifest
        .timings_seconds
        .insert("preprocess".into(), started.elapsed().as_secs_f64());
    eprintln!(
        "kept {} of {} rows (train {}, validation {}, test {}); dropped {}",
        cleaned.records.len(),
        raw.len(),
        parts.train.len(),
        parts.validation.len(),
        parts.test.len(),
        serde_json::to_string(&cleaned.report)?
    );
    Ok(manifest)
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let split: [f64; 3] = parse_floats(&a.split, "split")?
        .try_into()
        .map_err(|_| exit_err(EXIT_USAGE, "--split takes three comma-separated fractions"))?;
    let manifest = preprocess(&a.input, a.format.into(), &a.output, a.seed, split)?;
    manifest.write(&a.output.join("manifest.json"))
}

fn cmd_config(a: ConfigArgs) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(&MemberConfig::from_preset(a.preset, a.seed))?
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    member: String,
    best_step: usize,
    best_val_log_loss: f64,
    best_val_accuracy: f64,
    steps: usize,
    stop: arena_pref::train::StopReason,
}

fn save_model(model: &Model, ckpt: &Path) -> Result<()> {
    let mut w = create(ckpt)?;
    model.write_checkpoint(&mut w)?;
    w.flush()?;
    write_json(&ckpt.with_extension("json"), &model.spec())
}

fn load_model(ckpt: &Path) -> Result<Model> {
    let sidecar = ckpt.with_extension("json");
    let spec: ModelSpec = serde_json::from_reader(open(&sidecar)?)
        .with_context(|| format!("reading {}", sidecar.display()))?;
    Model::read_checkpoint(&spec, open(ckpt)?)
        .with_context(|| format!("loading {}", ckpt.display()))
}

/// Trains one member from `data/{train,validation}.jsonl` into `out`.
fn train_member(
    cfg: &MemberConfig,
    data: &Path,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let train_path = data.join("train.jsonl");
    let val_path = data.join("validation.jsonl");
    let split = arena_pref::ingest::DatasetSplit {
        train: read_records(&train_path)?,
        validation: read_records(&val_path)?,
        test: Vec::new(),
        seed: 0,
    };
    manifest.hash_input(&train_path)?;
    manifest.hash_input(&val_path)?;
    let base = init_model(cfg.model, cfg.init_seed)?;
    let adapted = base.attach_lora(&cfg.lora, cfg.lora_seed)?;
    let outcome = train_sft(&adapted, &split, &cfg.train)
        .with_context(|| format!("training {}", cfg.name))?;

    fs::create_dir_all(out)?;
    let best = out.join("best.ckpt");
    save_model(&outcome.best.model, &best)?;
    let latest = out.join("latest.ckpt");
    save_model(&outcome.latest.model, &latest)?;
    let curve = out.join("curve.csv");
    let mut w = create(&curve)?;
    export_curve(&outcome.trace, &mut w)?;
    w.flush()?;
    let summary_path = out.join("train_summary.json");
    write_json(
        &summary_path,
        &TrainSummary {
            member: cfg.name.clone(),
            best_step: outcome.best.step,
            best_val_log_loss: outcome.trace.best_val_log_loss,
            best_val_accuracy: outcome.best.metrics.accuracy,
            steps: outcome.steps,
            stop: outcome.stop,
        },
    )?;
    for p in [&best, &latest, &curve, &summary_path] {
        manifest.artifact(p);
    }
    manifest.presets.push(cfg.preset.name().to_string());
    manifest
        .seeds
        .insert(format!("{}.init", cfg.name), cfg.init_seed);
    manifest
        .seeds
        .insert(format!("{}.lora", cfg.name), cfg.lora_seed);
    manifest
        .seeds
        .insert(format!("{}.train", cfg.name), cfg.train.seed);
    manifest.timings_seconds.insert(
        format!("train.{}", cfg.name),
        started.elapsed().as_secs_f64(),
    );
    eprintln!(
        "{}: best val log loss {:.4} (accuracy {:.3}) at step {} of {}",
        cfg.name,
        outcome.trace.best_val_log_loss,
        outcome.best.metrics.accuracy,
        outcome.best.step,
        outcome.steps
    );
    Ok(outcome)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(path) => {
            let cfg: MemberConfig = serde_json::from_reader(open(path)?)
                .with_context(|| format!("reading {}", path.display()))?;
            if cfg.preset != a.preset {
                return Err(exit_err(
                    EXIT_USAGE,
                    format!(
                        "--preset {} does not match config preset {}",
                        a.preset, cfg.preset
                    ),
                ));
            }
            cfg
        }
        None => MemberConfig::from_preset(a.preset, a.seed),
    };
    let mut manifest = RunManifest::new("train", &cfg)?;
    train_member(&cfg, &a.data, &a.out, &mut manifest)?;
    manifest.write(&a.out.join("manifest.json"))
}

fn predict_records(
    model: &Model,
    records: &[PreferenceRecord],
    batch_size: usize,
) -> Result<Vec<metrics::ProbabilityTriple>> {
    if batch_size == 0 {
        return Err(exit_err(EXIT_USAGE, "--batch-size must be at least 1"));
    }
    let seqs = records
        .iter()
        .map(|r| format_input(r, model.config().max_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(model.predict(&seqs, batch_size)?)
}

fn predict_file(model: &Model, data: &Path, out: &Path, batch_size: usize) -> Result<()> {
    let records = read_records(data)?;
    let preds = predict_records(model, &records, batch_size)?;
    let ids: Vec<String> = records.into_iter().map(|r| r.id).collect();
    let mut w = create(out)?;
    write_predictions(&mut w, &ids, &preds)?;
    w.flush()?;
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    predict_file(&model, &a.data, &a.out, a.batch_size)
}

fn read_members(paths: &[PathBuf]) -> Result<Vec<MemberPredictions>> {
    paths
        .iter()
        .map(|p| {
            let name = p.display().to_string();
            read_predictions(&name, open(p)?).map_err(anyhow::Error::from)
        })
        .collect()
}

/// Labels for `ids`, which must list the same records in the same order.
fn aligned_labels(ids: &[String], labels_path: &Path) -> Result<Vec<LabelVector>> {
    let records = read_records(labels_path)?;
    if records.len() != ids.len() {
        return Err(exit_err(
            EXIT_MISALIGNED,
            format!(
                "{} predictions but {} labelled records",
                ids.len(),
                records.len()
            ),
        ));
    }
    if let Some(i) = records.iter().zip(ids).position(|(r, id)| &r.id != id) {
        return Err(exit_err(
            EXIT_MISALIGNED,
            format!(
                "row {}: prediction id `{}` but label id `{}`",
                i + 1,
                ids[i],
                records[i].id
            ),
        ));
    }
    Ok(records.iter().map(|r| r.label.encode()).collect())
}

#[derive(Serialize)]
struct WeightsReport<'a> {
    members: Vec<String>,
    weights: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    val_log_loss: Option<f64>,
}

fn cmd_ensemble(a: EnsembleArgs) -> Result<()> {
    let members = read_members(&a.members)?;
    let names: Vec<String> = members.iter().map(|m| m.member_id.clone()).collect();
    let (weights, loss) = match a.mode {
        Mode::Fixed => {
            let raw = a
                .weights
                .as_deref()
                .ok_or_else(|| exit_err(EXIT_USAGE, "--mode fixed requires --weights"))?;
            let weights = EnsembleWeights {
                w: parse_floats(raw, "weight")?,
            };
            validate_weights(&weights)
                .map_err(|v| exit_err(EXIT_WEIGHTS, format!("invalid weights: {v}")))?;
            if let Some(labels) = &a.labels {
                aligned_labels(&members[0].ids, labels)?;
            }
            (weights, None)
        }
        Mode::Search => {
            let labels_path = a
                .labels
                .as_deref()
                .ok_or_else(|| exit_err(EXIT_USAGE, "--mode search requires --labels"))?;
            let labels = aligned_labels(&members[0].ids, labels_path)?;
            let (w, loss) = search_weights(&members, &labels, a.step)?;
            (w, Some(loss))
        }
    };
    let blended = ensemble_predict(&members, &weights)?;
    let mut w = create(&a.out)?;
    write_predictions(&mut w, &members[0].ids, &blended)?;
    w.flush()?;
    let report = WeightsReport {
        members: names,
        weights: &weights.w,
        val_log_loss: loss,
    };
    let weights_out = a
        .weights_out
        .unwrap_or_else(|| a.out.with_extension("weights.json"));
    write_json(&weights_out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn evaluate_file(predictions: &Path, labels: &Path) -> Result<MetricsReport> {
    let preds = read_predictions(&predictions.display().to_string(), open(predictions)?)?;
    let labels = aligned_labels(&preds.ids, labels)?;
    Ok(metrics::evaluate(&preds.triples, &labels)?)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let report = evaluate_file(&a.predictions, &a.labels)?;
    write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct SplitScores {
    validation: MetricsReport,
    test: MetricsReport,
}

#[derive(Serialize)]
struct RunSummary {
    members: BTreeMap<String, SplitScores>,
    ensemble: SplitScores,
    weights: Vec<f64>,
}

fn cmd_run_all(a: RunAllArgs) -> Result<()> {
    let started = Instant::now();
    let cfg: RunAllConfig = match &a.config {
        Some(path) => serde_json::from_reader(open(path)?)
            .with_context(|| format!("reading {}", path.display()))?,
        None => RunAllConfig::default(),
    };
    if cfg.members.is_empty() {
        return Err(exit_err(EXIT_USAGE, "run config lists no members"));
    }
    let mut names: Vec<&str> = cfg.members.iter().map(|m| m.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != cfg.members.len() {
        return Err(exit_err(EXIT_USAGE, "member names must be unique"));
    }
    let out = &a.out;
    fs::create_dir_all(out)?;
    write_json(&out.join("run_config.json"), &cfg)?;

    let data = out.join("data");
    let raw_path = data.join("raw.csv");
    let raw = synthgen::generate(cfg.records, &cfg.synth)
        .map_err(|e| exit_err(EXIT_USAGE, e.to_string()))?;
    let mut w = create(&raw_path)?;
    write_raw_csv(&mut w, &raw)?;
    w.flush()?;
    let pre = preprocess(&raw_path, DataFormat::Csv, &data, cfg.split_seed, cfg.split)?;

    let mut manifest = RunManifest::new("run-all", &cfg)?;
    manifest.dataset_sha256 = pre.dataset_sha256;
    manifest.artifacts = pre.artifacts;
    manifest.timings_seconds = pre.timings_seconds;
    manifest.seeds.insert("synth".into(), cfg.synth.seed);
    manifest.seeds.insert("split".into(), cfg.split_seed);

    let val_path = data.join("validation.jsonl");
    let test_path = data.join("test.jsonl");
    let mut val_preds = Vec::new();
    let mut test_preds = Vec::new();
    let mut summary_members = BTreeMap::new();
    for member in &cfg.members {
        let dir = out.join("members").join(&member.name);
        let outcome = train_member(member, &data, &dir, &mut manifest)?;
        let model = &outcome.best.model;
        let pv = dir.join("pred_validation.csv");
        let pt = dir.join("pred_test.csv");
        predict_file(model, &val_path, &pv, EVAL_BATCH_SIZE)?;
        predict_file(model, &test_path, &pt, EVAL_BATCH_SIZE)?;
        manifest.artifact(&pv);
        manifest.artifact(&pt);
        summary_members.insert(
            member.name.clone(),
            SplitScores {
                validation: evaluate_file(&pv, &val_path)?,
                test: evaluate_file(&pt, &test_path)?,
            },
        );
        val_preds.push(pv);
        test_preds.push(pt);
    }

    let ens_dir = out.join("ensemble");
    let val_members = read_members(&val_preds)?;
    let val_labels = aligned_labels(&val_members[0].ids, &val_path)?;
    let (weights, _) = search_weights(&val_members, &val_labels, cfg.ensemble_step)?;
    let mut ensemble_scores = Vec::new();
    for (members, labels, name) in [
        (val_members, &val_path, "validation"),
        (read_members(&test_preds)?, &test_path, "test"),
    ] {
        let blended = ensemble_predict(&members, &weights)?;
        let path = ens_dir.join(format!("pred_{name}.csv"));
        let mut w = create(&path)?;
        write_predictions(&mut w, &members[0].ids, &blended)?;
        w.flush()?;
        manifest.artifact(&path);
        ensemble_scores.push(evaluate_file(&path, labels)?);
    }
    let weights_path = ens_dir.join("weights.json");
    write_json(
        &weights_path,
        &WeightsReport {
            members: cfg.members.iter().map(|m| m.name.clone()).collect(),
            weights: &weights.w,
            val_log_loss: Some(ensemble_scores[0].log_loss),
        },
    )?;
    manifest.artifact(&weights_path);

    let summary = RunSummary {
        members: summary_members,
        ensemble: SplitScores {
            validation: ensemble_scores[0],
            test: ensemble_scores[1],
        },
        weights: weights.w.clone(),
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    manifest.artifact(&summary_path);
    manifest
        .timings_seconds
        .insert("total".into(), started.elapsed().as_secs_f64());
    manifest.write(&out.join("manifest.json"))?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
