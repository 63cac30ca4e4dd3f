//! Command-line pipelines: corpus statistics, training, evaluation and
//! prompt evaluation. Every command writes a run manifest before any output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::backbone::{load_encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::evaluation::{report_for, GroupedReport};
use crate::model::HidacConfig;
use crate::prompting::{
    build_pool, run_prompt_eval, stratified_subsets, Experiment, FallbackPolicy, HttpClient, LlmClient, MockClient,
    PromptSpec, PromptTemplate, RunOptions,
};
use crate::relsdata::{
    corpus_stats, load_rels_path, rels_files, trainable_instances, OrderingStrategy, RelationInstance, RelsSchema,
    UnifiedLabel,
};
use crate::trainer::{self, load_checkpoint, load_checkpoint_with, save_checkpoint, TrainConfig, TrainMode, TrainedModel};

/// Ratios accepted by `--unfreeze`.
pub const UNFREEZE_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Parser)]
#[command(name = "hidac", version, about = "Discourse relation classification with dual adapters")]
pub struct Cli {
    /// TOML file; its values sit between built-in defaults and flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw (default 42).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `hidac-out/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label distribution with framework and language breakdowns.
    Stats(StatsArgs),
    /// Train HiDAC or a fine-tuning baseline and save a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a `.rels` file or directory.
    Eval(EvalArgs),
    /// Score an LLM client with zero- or few-shot prompts.
    PromptEval(PromptArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// `.rels` files or directories.
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// hidac, hidac-instance, baseline or baseline-full.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Use a randomly initialised toy encoder and desk-scale settings.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, default_value_t = 4)]
    pub toy_layers: usize,
    #[arg(long, default_value_t = 16)]
    pub toy_dim: usize,
    /// Pretrained encoder directory with `config.json` and safetensors weights.
    #[arg(long)]
    pub encoder_dir: Option<PathBuf>,
    /// Fraction of top encoder layers to train: 0, 0.25, 0.5, 0.75 or 1.
    #[arg(long)]
    pub unfreeze: Option<f64>,
    #[arg(long)]
    pub ordering: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Rebuild the encoder from this directory instead of the recorded spec.
    #[arg(long)]
    pub encoder_dir: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Exit with status 1 when accuracy falls below this value.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PromptArgs {
    /// Development data to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Training data for the few-shot example pool.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// zero-shot or few-shot; an experiment implies few-shot.
    #[arg(long)]
    pub mode: Option<String>,
    /// exp1 (same language), exp2 (English) or exp3 (weak labels).
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub ordering: Option<String>,
    /// mock:gold, mock:fixed:<label>, mock:unparseable, or an http(s) endpoint.
    #[arg(long)]
    pub client: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key for HTTP clients.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Comma-separated list of the six weakest labels (experiment 3).
    #[arg(long, value_delimiter = ',')]
    pub weak_labels: Option<Vec<String>>,
    /// Split the data into this many stratified folds...
    #[arg(long)]
    pub folds: Option<usize>,
    /// ...and score this many of them.
    #[arg(long)]
    pub select: Option<usize>,
    #[arg(long)]
    pub per_combo: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// english (top up from English entries) or strict.
    #[arg(long)]
    pub fallback: Option<String>,
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    train: Option<toml::Table>,
    hidac: Option<toml::Table>,
    eval: Option<EvalFile>,
    prompt: Option<PromptFile>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    batch_size: Option<usize>,
    min_accuracy: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    mode: Option<String>,
    experiment: Option<String>,
    ordering: Option<String>,
    client: Option<String>,
    model: Option<String>,
    api_key_env: Option<String>,
    weak_labels: Option<Vec<String>>,
    folds: Option<usize>,
    select: Option<usize>,
    per_combo: Option<usize>,
    concurrency: Option<usize>,
    fallback: Option<String>,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overlays `over` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// `defaults` overlaid with `file`, then deserialized. Unknown keys fail
/// with serde's message, which lists the valid ones.
fn layered<T: Serialize + serde::de::DeserializeOwned>(defaults: &T, file: Option<&toml::Table>, what: &str) -> Result<T> {
    let mut table = toml::Table::try_from(defaults).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(file) = file {
        merge(&mut table, file);
    }
    table
        .try_into()
        .map_err(|e| Error::Config(format!("[{what}] {e}")))
}

/// The record every command writes before touching its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, Value>,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    /// Facts known only once the run is over.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub summary: BTreeMap<String, Value>,
}

pub const MANIFEST_FILE: &str = "run.json";

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 of every file behind `paths`: `.rels` files for data
/// directories, all regular files for other directories.
pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for path in paths {
        let files = match rels_files(path) {
            Ok(files) => files,
            Err(_) if path.is_dir() => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)
                    .map_err(|e| Error::io(*path, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.is_file())
                    .collect();
                files.sort();
                files
            }
            Err(e) => return Err(e),
        };
        for f in files {
            out.insert(f.display().to_string(), sha256_file(&f)?);
        }
    }
    Ok(out)
}

impl RunManifest {
    fn begin(
        command: &str,
        config: BTreeMap<String, Value>,
        seed: u64,
        inputs: &[&Path],
        out: &Path,
    ) -> Result<Self> {
        let manifest = Self {
            command: command.into(),
            config,
            seed,
            input_hashes: hash_inputs(inputs)?,
            started: Utc::now(),
            finished: None,
            summary: BTreeMap::new(),
        };
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        manifest.write(out)?;
        Ok(manifest)
    }

    fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    fn finish(mut self, out: &Path) -> Result<Self> {
        self.finished = Some(Utc::now());
        self.write(out)?;
        Ok(self)
    }
}

/// What a successful command concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A requested gate such as `--min-accuracy` was not met.
    GateFailed,
}

/// 0 on success, 1 for gate or runtime failures, 2 for usage errors.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::GateFailed) => 1,
        Err(e) if e.is_usage() => 2,
        Err(_) => 1,
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let file = read_config(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(42);
    let out = |name: &str| cli.out.clone().unwrap_or_else(|| Path::new("hidac-out").join(name));
    match &cli.command {
        Command::Stats(args) => cmd_stats(args, seed, &out("stats")),
        Command::Train(args) => cmd_train(args, &file, cli.seed, &out("train")),
        Command::Eval(args) => cmd_eval(args, &file, seed, &out("eval")),
        Command::PromptEval(args) => cmd_prompt_eval(args, &file, seed, &out("prompt-eval")),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load(path: &Path) -> Result<Vec<RelationInstance>> {
    load_rels_path(path, &RelsSchema::default())
}

fn cmd_stats(args: &StatsArgs, seed: u64, out: &Path) -> Result<Outcome> {
    let inputs: Vec<&Path> = args.paths.iter().map(PathBuf::as_path).collect();
    let config = BTreeMap::from([("paths".to_string(), json!(args.paths))]);
    let manifest = RunManifest::begin("stats", config, seed, &inputs, out)?;
    let mut all = Vec::new();
    for p in &args.paths {
        all.extend(load(p)?);
    }
    let stats = corpus_stats(&all);
    let text = serde_json::to_string_pretty(&stats)?;
    println!("{text}");
    write_json(&out.join("stats.json"), &stats)?;
    manifest.finish(out)?;
    Ok(Outcome::Success)
}

fn parse_ordering(s: &str) -> Result<OrderingStrategy> {
    s.parse()
}

/// Defaults < `[train]`/`[hidac]` tables < flags.
pub fn resolve_train(
    args: &TrainArgs,
    file_train: Option<&toml::Table>,
    file_hidac: Option<&toml::Table>,
    file_seed: Option<u64>,
    flag_seed: Option<u64>,
) -> Result<(TrainConfig, EncoderSpec, HidacConfig)> {
    let mode: TrainMode = match (&args.mode, file_train.and_then(|t| t.get("mode"))) {
        (Some(m), _) => m.parse()?,
        (None, Some(toml::Value::String(m))) => m.parse()?,
        (None, Some(other)) => return Err(Error::Config(format!("[train] mode must be a string, got {other}"))),
        (None, None) => TrainMode::HidacLabelCentered,
    };
    let defaults = if args.toy { TrainConfig::toy(mode) } else { TrainConfig::for_mode(mode) };
    let mut cfg = layered(&defaults, file_train, "train")?;
    cfg.mode = mode;
    if let Some(s) = flag_seed.or(file_seed) {
        cfg.seed = s;
    }
    if let Some(o) = &args.ordering {
        cfg.ordering = parse_ordering(o)?;
    }
    if let Some(lr) = args.lr {
        cfg.lr_peak = lr;
    }
    if let Some(e) = args.epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = args.max_steps {
        cfg.max_steps = Some(s);
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(u) = args.unfreeze {
        if mode.is_hidac() {
            return Err(Error::Config("--unfreeze applies to the baseline modes only".into()));
        }
        cfg.unfreeze_ratio = u;
    }
    if mode == TrainMode::BaselineFull {
        cfg.unfreeze_ratio = 1.0;
    }
    if !mode.is_hidac() && !UNFREEZE_RATIOS.contains(&cfg.unfreeze_ratio) {
        return Err(Error::Config(format!(
            "unfreeze ratio {} is not one of {UNFREEZE_RATIOS:?}",
            cfg.unfreeze_ratio
        )));
    }
    cfg.validate()?;

    let spec = match (&args.encoder_dir, args.toy) {
        (Some(_), true) => return Err(Error::Config("--toy and --encoder-dir are exclusive".into())),
        (Some(dir), false) => EncoderSpec::pretrained_dir(dir)?,
        (None, true) => EncoderSpec::toy(args.toy_layers, args.toy_dim, cfg.seed),
        (None, false) => return Err(Error::Config("pass --toy or --encoder-dir".into())),
    };
    let n = spec.n_layers();
    let base_hidac = if args.toy {
        HidacConfig::toy(n)
    } else if n == 24 {
        HidacConfig::full_scale()
    } else {
        HidacConfig::scaled(n, 128, 256.0)
    };
    let mut hidac = layered(&base_hidac, file_hidac, "hidac")?;
    hidac.ordering = cfg.ordering;
    hidac.seed = cfg.seed;
    Ok((cfg, spec, hidac))
}

fn cmd_train(args: &TrainArgs, file: &FileConfig, flag_seed: Option<u64>, out: &Path) -> Result<Outcome> {
    let (cfg, spec, hidac) = resolve_train(args, file.train.as_ref(), file.hidac.as_ref(), file.seed, flag_seed)?;
    let mut config = BTreeMap::from([
        ("train".to_string(), serde_json::to_value(&cfg)?),
        ("encoder".to_string(), serde_json::to_value(&spec)?),
    ]);
    if cfg.mode.is_hidac() {
        config.insert("hidac".into(), serde_json::to_value(&hidac)?);
    }
    let mut inputs = vec![args.train.as_path()];
    inputs.extend(args.dev.as_deref());
    let mut manifest = RunManifest::begin("train", config, cfg.seed, &inputs, out)?;

    let train = trainable_instances(&load(&args.train)?, cfg.include_masked);
    let dev = match &args.dev {
        Some(p) => trainable_instances(&load(p)?, false),
        None => Vec::new(),
    };
    log::info!("training {:?} on {} instances, {} dev", cfg.mode, train.len(), dev.len());
    let metrics = out.join("metrics.jsonl");
    let (model, history) = trainer::train(&cfg, &spec, &hidac, &train, &dev, Some(&metrics))?;
    let ckpt = out.join("checkpoint");
    match &model {
        TrainedModel::Hidac(m) => {
            save_checkpoint(m, &ckpt)?;
            manifest.summary.insert("trainable_params".into(), json!(m.trainable_param_count()));
            manifest.summary.insert("base_params".into(), json!(m.encoder().param_count()));
        }
        TrainedModel::Baseline(m) => {
            save_checkpoint(m, &ckpt)?;
            let report = m.freeze_report();
            manifest.summary.insert(
                "trainable_layers".into(),
                json!(format!("{}/{}", report.trainable_layer_indices.len(), spec.n_layers())),
            );
            manifest.summary.insert("freeze_report".into(), serde_json::to_value(report)?);
        }
    }
    write_json(&out.join("history.json"), &history)?;
    if let Some(best) = history.best_epoch {
        manifest.summary.insert("best_epoch".into(), json!(best));
    }
    if let Some(acc) = history.dev_accuracies().into_iter().reduce(f64::max) {
        manifest.summary.insert("best_dev_accuracy".into(), json!(acc));
    }
    println!("{}", serde_json::to_string(&manifest.summary)?);
    manifest.finish(out)?;
    Ok(Outcome::Success)
}

fn write_report(out: &Path, report: &GroupedReport) -> Result<()> {
    let json_path = out.join("report.json");
    std::fs::write(&json_path, report.to_json()?).map_err(|e| Error::io(&json_path, e))?;
    let tsv_path = out.join("report.tsv");
    std::fs::write(&tsv_path, report.to_tsv()).map_err(|e| Error::io(&tsv_path, e))
}

fn cmd_eval(args: &EvalArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<Outcome> {
    let fe = file.eval.clone().unwrap_or_default();
    let batch = args.batch_size.or(fe.batch_size).unwrap_or(32);
    let min_accuracy = args.min_accuracy.or(fe.min_accuracy);
    if let Some(m) = min_accuracy {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("--min-accuracy {m} is outside [0, 1]")));
        }
    }
    let config = BTreeMap::from([
        ("checkpoint".to_string(), json!(args.checkpoint)),
        ("data".to_string(), json!(args.data)),
        ("batch_size".to_string(), json!(batch)),
        ("min_accuracy".to_string(), json!(min_accuracy)),
    ]);
    let mut manifest = RunManifest::begin("eval", config, seed, &[&args.checkpoint, &args.data], out)?;
    let model = match &args.encoder_dir {
        Some(dir) => load_checkpoint_with(&args.checkpoint, load_encoder(&EncoderSpec::pretrained_dir(dir)?)?)?,
        None => load_checkpoint(&args.checkpoint)?,
    };
    let data = trainable_instances(&load(&args.data)?, false);
    if data.is_empty() {
        return Err(Error::Input(format!("{}: no unmasked instances", args.data.display())));
    }
    let preds = model.classifier().predict(&data, batch)?;
    let preds: Vec<Option<UnifiedLabel>> = preds.into_iter().map(Some).collect();
    let report = report_for(&data, &preds)?;
    write_report(out, &report)?;
    let passed = min_accuracy.map_or(true, |m| report.overall_accuracy >= m);
    manifest.summary.insert("accuracy".into(), json!(report.overall_accuracy));
    manifest.summary.insert("macro_f1".into(), json!(report.overall_macro_f1));
    manifest.summary.insert("gate_passed".into(), json!(passed));
    println!("{}", serde_json::to_string(&manifest.summary)?);
    manifest.finish(out)?;
    Ok(if passed { Outcome::Success } else { Outcome::GateFailed })
}

/// Builds a client from its command-line description.
pub fn make_client(desc: &str, api_key_env: &str, data: &[RelationInstance]) -> Result<Box<dyn LlmClient>> {
    if desc.starts_with("http://") || desc.starts_with("https://") {
        return Ok(Box::new(HttpClient::from_env(desc, api_key_env)?));
    }
    let client = match desc.split(':').collect::<Vec<_>>().as_slice() {
        ["mock", "gold"] => MockClient::gold(data),
        ["mock", "unparseable"] => MockClient::Unparseable,
        ["mock", "fixed", label] => MockClient::Fixed(label.parse().map_err(|_| {
            Error::Config(format!("mock:fixed needs a label, got {label:?}"))
        })?),
        _ => {
            return Err(Error::Config(format!(
                "unknown client {desc:?} (mock:gold, mock:fixed:<label>, mock:unparseable or an http(s) URL)"
            )))
        }
    };
    Ok(Box::new(client))
}

fn cmd_prompt_eval(args: &PromptArgs, file: &FileConfig, seed: u64, out: &Path) -> Result<Outcome> {
    let f = file.prompt.clone().unwrap_or_default();
    let experiment: Option<Experiment> = args.experiment.clone().or(f.experiment).map(|e| e.parse()).transpose()?;
    let mode = args.mode.clone().or(f.mode);
    let few_shot = match mode.as_deref() {
        None => experiment.is_some(),
        Some("zero-shot") => false,
        Some("few-shot") => true,
        Some(other) => return Err(Error::Config(format!("unknown prompt mode {other:?} (zero-shot | few-shot)"))),
    };
    let ordering = parse_ordering(args.ordering.as_deref().or(f.ordering.as_deref()).unwrap_or("natural"))?;
    let spec = match (few_shot, experiment) {
        (false, None) => PromptSpec::zero_shot(ordering),
        (false, Some(_)) => return Err(Error::Config("zero-shot prompting takes no --experiment".into())),
        (true, None) => return Err(Error::Config("few-shot prompting needs --experiment".into())),
        (true, Some(e)) => PromptSpec {
            fallback: match args.fallback.as_deref().or(f.fallback.as_deref()).unwrap_or("english") {
                "english" => FallbackPolicy::English,
                "strict" => FallbackPolicy::Strict,
                other => return Err(Error::Config(format!("unknown fallback {other:?} (english | strict)"))),
            },
            ..PromptSpec::few_shot(e, ordering)
        },
    };
    let weak_labels: Option<Vec<UnifiedLabel>> = args
        .weak_labels
        .clone()
        .or(f.weak_labels)
        .map(|v| v.iter().map(|s| s.trim().parse()).collect::<Result<_>>())
        .transpose()
        .map_err(|e| Error::Config(format!("--weak-labels: {e}")))?;
    if experiment == Some(Experiment::Exp3WeakLabels) && weak_labels.is_none() {
        return Err(Error::Config("experiment 3 needs --weak-labels".into()));
    }
    let pool_path = args.pool.as_deref();
    if few_shot && pool_path.is_none() {
        return Err(Error::Config("few-shot prompting needs --pool".into()));
    }
    let client_desc = args.client.clone().or(f.client).unwrap_or_else(|| "mock:gold".into());
    let api_key_env = args.api_key_env.clone().or(f.api_key_env).unwrap_or_else(|| "LLM_API_KEY".into());
    let folds = args.folds.or(f.folds);
    let select = args.select.or(f.select).unwrap_or(4);
    let per_combo = args.per_combo.or(f.per_combo).unwrap_or(3);
    let template = match &args.template {
        Some(p) => PromptTemplate::from_file(p)?,
        None => PromptTemplate::default(),
    };
    let opts = RunOptions {
        model: args.model.clone().or(f.model).unwrap_or_else(|| "unspecified".into()),
        concurrency: args.concurrency.or(f.concurrency).unwrap_or(4),
        seed,
        weak_labels: weak_labels.clone(),
        template,
        audit_path: Some(out.join("audit.jsonl")),
        ..RunOptions::default()
    };

    let config = BTreeMap::from([
        ("spec".to_string(), serde_json::to_value(&spec)?),
        ("client".to_string(), json!(client_desc)),
        ("model".to_string(), json!(opts.model)),
        ("weak_labels".to_string(), json!(weak_labels)),
        ("folds".to_string(), json!(folds)),
        ("select".to_string(), json!(select)),
        ("per_combo".to_string(), json!(per_combo)),
        ("concurrency".to_string(), json!(opts.concurrency)),
        ("template_sha256".to_string(), json!(hex::encode(Sha256::digest(opts.template.text().as_bytes())))),
    ]);
    let mut inputs = vec![args.data.as_path()];
    inputs.extend(pool_path);
    let mut manifest = RunManifest::begin("prompt-eval", config, seed, &inputs, out)?;

    let data = trainable_instances(&load(&args.data)?, false);
    let client = make_client(&client_desc, &api_key_env, &data)?;
    let pool = match pool_path {
        Some(p) if few_shot => Some(build_pool(&load(p)?, per_combo, seed)),
        _ => None,
    };
    let (subset, chosen, fold_sets) = match folds {
        Some(k) => {
            let s = stratified_subsets(&data, k, seed)?;
            let chosen = s.select(select)?;
            let sets: Vec<Vec<String>> = chosen
                .iter()
                .map(|&c| s.folds[c].iter().map(|&i| data[i].id.clone()).collect())
                .collect();
            (s.subset(&data, &chosen), Some(chosen), sets)
        }
        None => (data.clone(), None, Vec::new()),
    };
    let audit = out.join("audit.jsonl");
    if audit.exists() {
        std::fs::remove_file(&audit).map_err(|e| Error::io(&audit, e))?;
    }
    let result = run_prompt_eval(client.as_ref(), &subset, &spec, pool.as_ref(), &opts)?;

    let mut per_fold = Vec::new();
    for (fold, ids) in chosen.iter().flatten().zip(&fold_sets) {
        let (insts, preds): (Vec<RelationInstance>, Vec<Option<UnifiedLabel>>) = subset
            .iter()
            .zip(&result.records)
            .filter(|(i, _)| ids.contains(&i.id))
            .map(|(i, r)| (i.clone(), r.parsed))
            .unzip();
        per_fold.push(json!({"fold": fold, "report": report_for(&insts, &preds)?}));
    }
    write_report(out, &result.report)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "prompt": spec.name(),
            "selected_folds": chosen,
            "aggregate": result.report,
            "per_fold": per_fold,
        }),
    )?;
    manifest.summary.insert("prompt".into(), json!(spec.name()));
    manifest.summary.insert("selected_folds".into(), json!(chosen));
    manifest.summary.insert("instances".into(), json!(subset.len()));
    manifest.summary.insert("accuracy".into(), json!(result.report.overall_accuracy));
    manifest.summary.insert("parse_failures".into(), json!(result.report.parse_failures));
    println!("{}", serde_json::to_string(&manifest.summary)?);
    manifest.finish(out)?;
    Ok(Outcome::Success)
}
